"""Pretraining of the tiny ViT and multi-scale fine-tuning of the kernel bank."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import _accel
from .patch_embed import PatchKernelBank, embed_with_kernel, adaptive_size
from .resize import build_resize_operator, apply_resize, pi_resize_kernel_transpose
from .vit import ViTParams, cross_entropy_batch, encoder_backward, encoder_forward

log = logging.getLogger(__name__)

FROZEN = frozenset()


class TrainingError(RuntimeError):
    def __init__(self, message, epoch=None, step=None):
        super().__init__(message)
        self.epoch = epoch
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0005
    batch_size: int = 64
    epochs: int = 5
    lam: float = 1.0
    K: int = 4
    resolutions: tuple = (8, 12, 16, 20, 24, 28, 32, 40)
    base_resolution: int = 32
    seed: int = 0
    precision: str = "float32"
    kernel_resize: str = "pi"
    resize_method: str = "bilinear"

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.K < 1 or self.K > len(self.resolutions):
            raise ValueError(f"need 1 <= K <= M, got K={self.K}, M={len(self.resolutions)}")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, got {self.precision!r}")

    @property
    def dtype(self):
        return np.dtype(self.precision)

    @property
    def subsets(self) -> list[list[tuple[int, int]]]:
        """Contiguous, near-equal partition of the sorted resolution set into K subsets."""
        res = sorted(_as_hw(r) for r in self.resolutions)
        return [[tuple(r) for r in part] for part in _split(res, self.K)]

    def with_(self, **kw) -> "TrainConfig":
        return replace(self, **kw)


def _split(seq, k):
    n = len(seq)
    bounds = [round(i * n / k) for i in range(k + 1)]
    return [seq[bounds[i]:bounds[i + 1]] for i in range(k)]


def _as_hw(r):
    return (int(r), int(r)) if np.isscalar(r) else (int(r[0]), int(r[1]))


@dataclass
class SGD:
    """SGD with momentum; weight decay is added to the gradient before the
    momentum update and only for the names in ``decay``."""

    lr: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    decay: frozenset = frozenset()
    velocity: dict = field(default_factory=dict)

    def step(self, tensors: dict, grads: dict) -> None:
        for name in sorted(grads):
            g = grads[name]
            w = tensors[name]
            if self.weight_decay and name in self.decay:
                g = g + self.weight_decay * w
            v = self.velocity.get(name)
            v = g.copy() if v is None else self.momentum * v + g
            self.velocity[name] = v
            w -= (self.lr * v).astype(w.dtype, copy=False)


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _check_finite(loss, epoch, step):
    if not np.isfinite(loss):
        raise TrainingError(f"non-finite loss {loss} at epoch {epoch}, step {step}", epoch, step)


@dataclass
class History:
    epochs: list = field(default_factory=list)   # per-epoch {term: mean loss}
    steps: list = field(default_factory=list)    # (epoch, step, term, value)

    def to_csv(self) -> str:
        lines = ["epoch,step,term,value"]
        lines += [f"{e},{s},{t},{v!r}" for e, s, t, v in self.steps]
        return "\n".join(lines) + "\n"


def pretrain(params: ViTParams, kernel, bias, dataset, config: TrainConfig, on_epoch=None):
    """Train every parameter at the base resolution.

    ``on_epoch(epoch, params, kernel, bias)`` runs after each epoch.
    Returns (params, kernel, bias, history); the inputs are not modified.
    """
    dt = config.dtype
    params = params.astype(dt)
    tensors = dict(params.tensors)
    tensors["embed.kernel"] = np.array(kernel, dtype=dt)
    tensors["embed.bias"] = np.array(bias, dtype=dt)
    params.tensors = {k: v for k, v in tensors.items() if not k.startswith("embed.")}
    images = dataset.at_resolution(config.base_resolution).astype(dt)
    labels = dataset.labels
    n = params.grid
    if config.base_resolution != n * tensors["embed.kernel"].shape[0]:
        raise ValueError("base resolution must equal token grid x patch size")
    decay = frozenset(k for k in tensors if k.endswith(".w") or k == "embed.kernel")
    opt = SGD(config.learning_rate, config.momentum, config.weight_decay, decay)
    hist = History()
    for epoch in range(config.epochs):
        rng = np.random.default_rng((config.seed, 1, epoch))
        losses, correct = [], 0
        for step, idx in enumerate(_batches(len(labels), config.batch_size, rng)):
            x = images[idx]
            tok = _accel.patch_conv(x, tensors["embed.kernel"], tensors["embed.bias"])
            logits, cache = encoder_forward(params, tok)
            loss, dlogits, _ = cross_entropy_batch(logits, labels[idx])
            _check_finite(loss, epoch, step)
            gtok, grads = encoder_backward(params, cache, dlogits)
            grads["embed.kernel"] = _accel.patch_conv_grad_kernel(x, gtok)
            grads["embed.bias"] = gtok.sum(axis=(0, 1, 2))
            opt.step(tensors, grads)
            losses.append(loss)
            correct += int((logits.argmax(axis=1) == labels[idx]).sum())
            hist.steps.append((epoch, step, "loss", loss))
        hist.epochs.append({"loss": float(np.mean(losses)), "train_acc": correct / len(labels)})
        log.info("pretrain epoch %d loss %.4f acc %.3f", epoch, hist.epochs[-1]["loss"], hist.epochs[-1]["train_acc"])
        if on_epoch is not None:
            on_epoch(epoch, params, tensors["embed.kernel"], tensors["embed.bias"])
    return params, tensors["embed.kernel"], tensors["embed.bias"], hist


def sample_resolutions(subsets, rng) -> tuple:
    """One uniform draw from each subset, in subset order."""
    out = []
    for s in subsets:
        if len(s) == 0:
            raise ValueError("cannot sample from an empty resolution subset")
        out.append(s[int(rng.integers(len(s)))])
    return tuple(out)


def mspe_loss_and_grads(params: ViTParams, bank: PatchKernelBank, batch, labels, resolutions, config: TrainConfig):
    """Total multi-scale loss and its gradient w.r.t. the bank.

    Branch k resizes the batch to ``resolutions[k]`` and embeds it with bank
    kernel k; the extra term weighted by ``config.lam`` runs the batch at its
    own resolution through the largest kernel. The encoder stays frozen.
    Returns (total, {term: loss}, kernel grads, bias grads).
    """
    n = bank.token_grid
    gk = [np.zeros_like(k) for k in bank.kernels]
    gb = [np.zeros_like(b) for b in bank.biases]
    terms = {}
    base_hw = batch.shape[1:3]
    branches = [(k, _as_hw(r), 1.0, f"r{k}") for k, r in enumerate(resolutions)]
    if config.lam > 0:
        branches.append((bank.K - 1, base_hw, config.lam, "orig"))
    total = 0.0
    for k, hw, weight, name in branches:
        x = batch if hw == base_hw else apply_resize(build_resize_operator(base_hw, hw, config.resize_method), batch)
        base = bank.kernels[k]
        tok, cropped, _ = embed_with_kernel(x, base, bank.biases[k], n, resize=bank.resize, method=bank.method)
        logits, cache = encoder_forward(params, tok)
        loss, dlogits, _ = cross_entropy_batch(logits, labels)
        terms[name] = loss
        total += weight * loss
        gtok, _ = encoder_backward(params, cache, dlogits * weight, trainable=FROZEN)
        g_resized = _accel.patch_conv_grad_kernel(cropped, gtok)
        gk[k] += pi_resize_kernel_transpose(
            g_resized, base.shape[:2], adaptive_size(hw, n), method=bank.method, resize=bank.resize
        )
        gb[k] += gtok.sum(axis=(0, 1, 2))
    if config.lam == 0:
        terms["orig"] = 0.0
    terms["total"] = total
    return total, terms, gk, gb


def make_bank_optimizer(bank: PatchKernelBank, config: TrainConfig) -> SGD:
    decay = frozenset(f"kernel.{k}" for k in range(bank.K))
    return SGD(config.learning_rate, config.momentum, config.weight_decay, decay)


def mspe_step(params, bank, batch, labels, config, rng, optstate: SGD, resolutions=None, epoch=None, step=None):
    """One SGD step on the bank. Returns (bank, {term: loss})."""
    if resolutions is None:
        resolutions = sample_resolutions(config.subsets, rng)
    total, terms, gk, gb = mspe_loss_and_grads(params, bank, batch, labels, resolutions, config)
    _check_finite(total, epoch, step)
    tensors = {f"kernel.{k}": w for k, w in enumerate(bank.kernels)}
    tensors.update({f"bias.{k}": b for k, b in enumerate(bank.biases)})
    grads = {f"kernel.{k}": g for k, g in enumerate(gk)}
    grads.update({f"bias.{k}": g for k, g in enumerate(gb)})
    optstate.step(tensors, grads)
    terms["resolutions"] = resolutions
    return bank, terms


def branch_resolutions(subsets, seed, epoch, step) -> tuple:
    """Resolutions for one step; branch k draws from its own counter-based
    stream (seed, 3, epoch, step, k), so the draw is schedule independent."""
    return tuple(sample_resolutions([s], np.random.default_rng((seed, 3, epoch, step, k)))[0]
                 for k, s in enumerate(subsets))


def mspe_train(params: ViTParams, bank: PatchKernelBank, dataset, config: TrainConfig, on_epoch=None):
    """Fine-tune a copy of ``bank`` for ``config.epochs`` epochs with the
    encoder frozen. ``on_epoch(epoch, bank)`` runs after each epoch.
    Returns (bank, history)."""
    dt = config.dtype
    params = params.astype(dt)
    bank = bank.astype(dt)
    if bank.K != config.K:
        raise ValueError(f"bank has {bank.K} kernels but config.K = {config.K}")
    images = dataset.at_resolution(config.base_resolution).astype(dt)
    labels = dataset.labels
    opt = make_bank_optimizer(bank, config)
    subsets = config.subsets
    hist = History()
    for epoch in range(config.epochs):
        order_rng = np.random.default_rng((config.seed, 2, epoch))
        sums: dict[str, list] = {}
        for step, idx in enumerate(_batches(len(labels), config.batch_size, order_rng)):
            bank, terms = mspe_step(params, bank, images[idx], labels[idx], config, None, opt,
                                    resolutions=branch_resolutions(subsets, config.seed, epoch, step),
                                    epoch=epoch, step=step)
            for name, v in terms.items():
                if name == "resolutions":
                    continue
                sums.setdefault(name, []).append(v)
                hist.steps.append((epoch, step, name, v))
        hist.epochs.append({name: float(np.mean(v)) for name, v in sums.items()})
        log.info("mspe epoch %d total %.4f", epoch, hist.epochs[-1]["total"])
        if on_epoch is not None:
            on_epoch(epoch, bank)
    return bank, hist
