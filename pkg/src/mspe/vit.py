"""A small pre-norm Vision Transformer with a hand-written backward pass.

Parameters live in a flat name -> array dict so optimizers, checkpoints and
freeze masks can treat them uniformly. Everything is batched: tokens are
(B, N, N, D) and logits (B, num_classes).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _accel

LN_EPS = 1e-6


class StaleCacheError(RuntimeError):
    pass


@dataclass
class ViTParams:
    dim: int
    depth: int
    heads: int
    grid: int
    num_classes: int
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"heads ({self.heads}) must divide dim ({self.dim})")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")

    def __getitem__(self, name):
        return self.tensors[name]

    def names(self):
        return list(self.tensors)

    @property
    def dtype(self):
        return self.tensors["head.w"].dtype

    def copy(self) -> "ViTParams":
        return ViTParams(self.dim, self.depth, self.heads, self.grid, self.num_classes,
                         {k: v.copy() for k, v in self.tensors.items()}, self.mlp_ratio)

    def astype(self, dtype) -> "ViTParams":
        return ViTParams(self.dim, self.depth, self.heads, self.grid, self.num_classes,
                         {k: v.astype(dtype) for k, v in self.tensors.items()}, self.mlp_ratio)

    @classmethod
    def init(cls, rng, dim, depth, heads, grid, num_classes, mlp_ratio=4, dtype=np.float32):
        d, hidden = dim, dim * mlp_ratio

        def xavier(fan_in, fan_out):
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-lim, lim, size=(fan_in, fan_out))

        t = {
            "pos_embed": rng.normal(0.0, 0.02, size=(grid, grid, d)),
            "cls_token": rng.normal(0.0, 0.02, size=d),
            "cls_pos": rng.normal(0.0, 0.02, size=d),
        }
        for i in range(depth):
            p = f"blocks.{i}."
            t[p + "ln1.g"] = np.ones(d)
            t[p + "ln1.b"] = np.zeros(d)
            t[p + "qkv.w"] = xavier(d, 3 * d)
            t[p + "qkv.b"] = np.zeros(3 * d)
            t[p + "proj.w"] = xavier(d, d)
            t[p + "proj.b"] = np.zeros(d)
            t[p + "ln2.g"] = np.ones(d)
            t[p + "ln2.b"] = np.zeros(d)
            t[p + "fc1.w"] = xavier(d, hidden)
            t[p + "fc1.b"] = np.zeros(hidden)
            t[p + "fc2.w"] = xavier(hidden, d)
            t[p + "fc2.b"] = np.zeros(d)
        t["norm.g"] = np.ones(d)
        t["norm.b"] = np.zeros(d)
        t["head.w"] = rng.normal(0.0, 0.02, size=(d, num_classes))
        t["head.b"] = np.zeros(num_classes)
        return cls(dim, depth, heads, grid, num_classes,
                   {k: np.asarray(v, dtype=dtype) for k, v in t.items()}, mlp_ratio)


def layernorm_forward(x, g, b):
    """Returns (y, cache) with cache = (xhat, 1 / std)."""
    y, xhat, inv = _accel.layernorm_forward(x, g, b, LN_EPS)
    return y, (xhat, inv)


def layernorm_backward(dy, g, cache):
    xhat, inv = cache
    return _accel.layernorm_backward(dy, g, xhat, inv)


def gelu(u):
    return _accel.gelu_forward(u)[0]


def gelu_grad(u, cdf=None):
    if cdf is None:
        cdf = _accel.gelu_forward(u)[1]
    return _accel.gelu_grad(u, cdf)


def _outer_sum(a, b):
    # sum over batch and sequence of a[..., j] b[..., k]
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


def softmax(s, axis=-1):
    e = np.exp(s - s.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


@dataclass
class ForwardCache:
    grid: int
    dim: int
    batch: int
    blocks: list
    final: tuple
    features: np.ndarray  # class-token feature after the final layernorm


def encoder_forward(params: ViTParams, tokens: np.ndarray):
    """Logits for a batch of token grids.

    tokens: (B, N, N, D) or a single (N, N, D) grid. Returns (logits, cache),
    logits (B, num_classes) (or (num_classes,) for a single grid).
    """
    t = params.tensors
    single = tokens.ndim == 3
    if single:
        tokens = tokens[None]
    n, d = params.grid, params.dim
    if tokens.shape[1:] != (n, n, d):
        raise ValueError(f"token grid {tokens.shape[1:]} does not match the position grid {(n, n, d)}")
    b = tokens.shape[0]
    dtype = params.dtype
    tokens = tokens.astype(dtype, copy=False)
    heads, dh = params.heads, d // params.heads
    scale = 1.0 / math.sqrt(dh)

    cls = np.broadcast_to(t["cls_token"] + t["cls_pos"], (b, 1, d))
    patches = tokens.reshape(b, n * n, d) + t["pos_embed"].reshape(n * n, d)
    x = np.concatenate([cls, patches], axis=1)
    seq = x.shape[1]

    blocks = []
    for i in range(params.depth):
        p = f"blocks.{i}."
        h1, ln1 = layernorm_forward(x, t[p + "ln1.g"], t[p + "ln1.b"])
        qkv = h1 @ t[p + "qkv.w"] + t[p + "qkv.b"]
        qkv = qkv.reshape(b, seq, 3, heads, dh).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        a = softmax((q @ k.transpose(0, 1, 3, 2)) * scale)
        o = (a @ v).transpose(0, 2, 1, 3).reshape(b, seq, d)
        x = x + o @ t[p + "proj.w"] + t[p + "proj.b"]
        h2, ln2 = layernorm_forward(x, t[p + "ln2.g"], t[p + "ln2.b"])
        u = h2 @ t[p + "fc1.w"] + t[p + "fc1.b"]
        g, cdf = _accel.gelu_forward(u)
        x = x + g @ t[p + "fc2.w"] + t[p + "fc2.b"]
        blocks.append((h1, ln1, q, k, v, a, o, h2, ln2, u, cdf, g))

    f, lnf = layernorm_forward(x[:, 0], t["norm.g"], t["norm.b"])
    logits = f @ t["head.w"] + t["head.b"]
    cache = ForwardCache(n, d, b, blocks, lnf, f)
    return (logits[0] if single else logits), cache


def encoder_backward(params: ViTParams, cache: ForwardCache, dlogits: np.ndarray, trainable=None):
    """Backpropagate ``dlogits`` through the encoder.

    ``trainable`` names the parameters that receive gradients (None = all);
    pass an empty collection for a frozen encoder. Returns
    (grad_tokens (B, N, N, D), {name: grad}).
    """
    t = params.tensors
    single = dlogits.ndim == 1
    if single:
        dlogits = dlogits[None]
    if (cache.grid, cache.dim) != (params.grid, params.dim) or len(cache.blocks) != params.depth \
            or dlogits.shape[0] != cache.batch:
        raise StaleCacheError("forward cache does not match these parameters / gradient shape")
    want = set(t) if trainable is None else set(trainable)
    grads = {}

    def put(name, fn):
        if name in want:
            grads[name] = fn()

    b, n, d = cache.batch, params.grid, params.dim
    heads, dh = params.heads, d // params.heads
    scale = 1.0 / math.sqrt(dh)
    dlogits = dlogits.astype(params.dtype, copy=False)

    f = cache.features
    put("head.w", lambda: f.T @ dlogits)
    put("head.b", lambda: dlogits.sum(axis=0))
    df = dlogits @ t["head.w"].T
    xhat_f = cache.final[0]
    put("norm.g", lambda: (df * xhat_f).sum(axis=0))
    put("norm.b", lambda: df.sum(axis=0))
    dx = np.zeros((b, n * n + 1, d), dtype=params.dtype)
    dx[:, 0] = layernorm_backward(df, t["norm.g"], cache.final)

    for i in reversed(range(params.depth)):
        p = f"blocks.{i}."
        h1, ln1, q, k, v, a, o, h2, ln2, u, cdf, g = cache.blocks[i]
        # mlp branch
        dm = dx
        put(p + "fc2.w", lambda: _outer_sum(g, dm))
        put(p + "fc2.b", lambda: dm.sum(axis=(0, 1)))
        du = (dm @ t[p + "fc2.w"].T) * gelu_grad(u, cdf)
        put(p + "fc1.w", lambda: _outer_sum(h2, du))
        put(p + "fc1.b", lambda: du.sum(axis=(0, 1)))
        dh2 = du @ t[p + "fc1.w"].T
        put(p + "ln2.g", lambda: (dh2 * ln2[0]).sum(axis=(0, 1)))
        put(p + "ln2.b", lambda: dh2.sum(axis=(0, 1)))
        dx = dx + layernorm_backward(dh2, t[p + "ln2.g"], ln2)
        # attention branch
        dy = dx
        put(p + "proj.w", lambda: _outer_sum(o, dy))
        put(p + "proj.b", lambda: dy.sum(axis=(0, 1)))
        do = (dy @ t[p + "proj.w"].T).reshape(b, -1, heads, dh).transpose(0, 2, 1, 3)
        da = do @ v.transpose(0, 1, 3, 2)
        dv = a.transpose(0, 1, 3, 2) @ do
        ds = a * (da - (da * a).sum(axis=-1, keepdims=True)) * scale
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q
        dqkv = np.stack([dq, dk, dv]).transpose(1, 3, 0, 2, 4).reshape(b, -1, 3 * d)
        put(p + "qkv.w", lambda: _outer_sum(h1, dqkv))
        put(p + "qkv.b", lambda: dqkv.sum(axis=(0, 1)))
        dh1 = dqkv @ t[p + "qkv.w"].T
        put(p + "ln1.g", lambda: (dh1 * ln1[0]).sum(axis=(0, 1)))
        put(p + "ln1.b", lambda: dh1.sum(axis=(0, 1)))
        dx = dx + layernorm_backward(dh1, t[p + "ln1.g"], ln1)

    dpatch = dx[:, 1:]
    put("pos_embed", lambda: dpatch.sum(axis=0).reshape(n, n, d))
    put("cls_token", lambda: dx[:, 0].sum(axis=0))
    put("cls_pos", lambda: dx[:, 0].sum(axis=0))
    grad_tokens = dpatch.reshape(b, n, n, d)
    return (grad_tokens[0] if single else grad_tokens), grads


def cross_entropy(logits, label):
    """Loss and gradient for one example.

    >>> round(cross_entropy(np.array([1.0, 0.0]), 0)[0], 6)
    0.313262
    """
    logits = np.asarray(logits)
    if not 0 <= label < logits.shape[-1]:
        raise ValueError(f"label {label} out of range for {logits.shape[-1]} classes")
    m = logits.max()
    lse = m + np.log(np.exp(logits - m).sum())
    p = np.exp(logits - lse)
    p[label] -= 1.0
    return float(lse - logits[label]), p


def cross_entropy_batch(logits, labels):
    """Mean cross-entropy over a batch; the gradient already carries the 1/B."""
    labels = np.asarray(labels)
    b, c = logits.shape
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise ValueError(f"labels out of range for {c} classes")
    m = logits.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(logits - m).sum(axis=1, keepdims=True))
    losses = (lse[:, 0] - logits[np.arange(b), labels])
    p = np.exp(logits - lse)
    p[np.arange(b), labels] -= 1.0
    return float(losses.mean()), p / b, losses
