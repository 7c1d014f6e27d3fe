"""Multi-resolution evaluation: IMG-resize, FlexiViT-style and MSPE modes,
resolution sweeps and the patch/class-token cosine-similarity diagnostic."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import _accel
from .patch_embed import PatchKernelBank, embed_batch, embed_with_kernel
from .resize import build_resize_operator, apply_resize
from .vit import ViTParams, cross_entropy_batch, encoder_forward

log = logging.getLogger(__name__)

EVAL_CHUNK = 256


class Mode(str, Enum):
    VANILLA = "vanilla_resize"
    FLEXIVIT = "flexivit"
    MSPE = "mspe"

    @classmethod
    def parse(cls, name: str) -> "Mode":
        aliases = {"vanilla": cls.VANILLA, "img-resize": cls.VANILLA}
        if name in aliases:
            return aliases[name]
        return cls(name)


class VanillaEmbedder:
    """Resize the image to the base resolution, then apply the base kernel."""

    def __init__(self, kernel, bias, base_resolution, method="bilinear"):
        self.kernel, self.bias = kernel, bias
        self.base = (base_resolution, base_resolution) if np.isscalar(base_resolution) else tuple(base_resolution)
        self.method = method

    def __call__(self, images):
        x = images
        if x.shape[1:3] != self.base:
            x = apply_resize(build_resize_operator(x.shape[1:3], self.base, self.method), x)
        x = x.astype(self.kernel.dtype, copy=False)
        return _accel.patch_conv(x, self.kernel, self.bias)


class FlexiEmbedder:
    """Keep the image, PI-resize the single base kernel to (h // N, w // N)."""

    def __init__(self, kernel, bias, n, resize="pi", method="bilinear"):
        self.kernel, self.bias, self.n = kernel, bias, n
        self.resize, self.method = resize, method

    def __call__(self, images):
        return embed_with_kernel(images, self.kernel, self.bias, self.n, resize=self.resize, method=self.method)[0]


class MSPEEmbedder:
    def __init__(self, bank: PatchKernelBank):
        self.bank = bank

    def __call__(self, images):
        return embed_batch(self.bank, images)[0]


@dataclass
class EvalResult:
    accuracy: float
    loss: float
    n: int
    logits: np.ndarray = field(repr=False)


def evaluate_embedder(params: ViTParams, embedder, images, labels) -> EvalResult:
    logits = []
    for i in range(0, len(labels), EVAL_CHUNK):
        tok = embedder(images[i:i + EVAL_CHUNK].astype(params.dtype, copy=False))
        logits.append(encoder_forward(params, tok)[0])
    logits = np.concatenate(logits)
    loss, _, _ = cross_entropy_batch(logits.astype(np.float64), labels)
    acc = float((logits.argmax(axis=1) == labels).mean())
    return EvalResult(acc, loss, len(labels), logits)


def eval_mode_vanilla(params, kernel, bias, dataset, resolution, base_resolution) -> EvalResult:
    return evaluate_embedder(params, VanillaEmbedder(kernel, bias, base_resolution),
                             dataset.at_resolution(resolution), dataset.labels)


def eval_mode_flexivit(params, kernel, bias, dataset, resolution, n, resize="pi") -> EvalResult:
    return evaluate_embedder(params, FlexiEmbedder(kernel, bias, n, resize=resize),
                             dataset.at_resolution(resolution), dataset.labels)


def eval_mode_mspe(params, bank, dataset, resolution) -> EvalResult:
    return evaluate_embedder(params, MSPEEmbedder(bank), dataset.at_resolution(resolution), dataset.labels)


@dataclass
class ModelState:
    """Everything a sweep needs: frozen encoder, the pretrained single kernel
    and (optionally) a trained bank."""

    params: ViTParams
    kernel: np.ndarray
    bias: np.ndarray
    bank: PatchKernelBank | None
    base_resolution: int

    def embedder(self, mode: Mode):
        if mode is Mode.VANILLA:
            return VanillaEmbedder(self.kernel, self.bias, self.base_resolution)
        if mode is Mode.FLEXIVIT:
            return FlexiEmbedder(self.kernel, self.bias, self.params.grid)
        if self.bank is None:
            raise ValueError("mspe mode needs a kernel bank")
        return MSPEEmbedder(self.bank)


@dataclass
class EvalRow:
    mode: str
    height: int
    width: int
    top1: float
    loss: float
    n: int
    error: str | None = None


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def cell(self, mode, resolution) -> EvalRow:
        mode = Mode.parse(mode) if isinstance(mode, str) else mode
        h, w = _hw(resolution)
        for r in self.rows:
            if r.mode == mode.value and (r.height, r.width) == (h, w):
                return r
        raise KeyError((mode, resolution))

    def to_csv(self) -> str:
        lines = ["mode,height,width,top1,loss,n"]
        for r in self.rows:
            if r.error is not None:
                lines.append(f"{r.mode},{r.height},{r.width},nan,nan,0")
            else:
                lines.append(f"{r.mode},{r.height},{r.width},{r.top1!r},{r.loss!r},{r.n}")
        return "\n".join(lines) + "\n"


def _hw(r):
    return (int(r), int(r)) if np.isscalar(r) else (int(r[0]), int(r[1]))


def square_resolutions(start, stop, step):
    return [(r, r) for r in range(start, stop + 1, step)]


def aspect_resolutions(fixed_height, widths):
    return [(fixed_height, w) for w in widths]


def sweep(state: ModelState, dataset, modes, resolutions, metadata=None) -> EvalReport:
    """Evaluate every (mode, resolution) cell. A failing cell is recorded with
    its error instead of aborting the sweep."""
    if not resolutions:
        raise ValueError("sweep needs at least one resolution")
    report = EvalReport(metadata=dict(metadata or {}))
    for mode in modes:
        mode = Mode.parse(mode) if isinstance(mode, str) else mode
        for res in resolutions:
            h, w = _hw(res)
            try:
                r = evaluate_embedder(state.params, state.embedder(mode), dataset.at_resolution((h, w)), dataset.labels)
                report.rows.append(EvalRow(mode.value, h, w, r.accuracy, r.loss, r.n))
            except ValueError as exc:
                log.warning("sweep cell %s %dx%d failed: %s", mode.value, h, w, exc)
                report.rows.append(EvalRow(mode.value, h, w, float("nan"), float("nan"), 0, str(exc)))
    return report


def class_features(params: ViTParams, tokens) -> np.ndarray:
    """Class-token features after the final layernorm (before the head)."""
    return encoder_forward(params, tokens)[1].features


def _cosine(a, b):
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    denom = na * nb
    zero = denom == 0
    cos = np.where(zero, 0.0, (a * b).sum(axis=-1) / np.where(zero, 1.0, denom))
    return np.clip(cos, -1.0, 1.0), int(zero.sum())


@dataclass
class DiagResult:
    patch_cos: float
    cls_cos: float
    per_image_patch: np.ndarray
    per_image_cls: np.ndarray
    zero_norm: int = 0

    def to_csv(self) -> str:
        lines = ["image_id,patch_cos,cls_cos"]
        lines += [f"{i},{p!r},{c!r}" for i, (p, c) in
                  enumerate(zip(self.per_image_patch.tolist(), self.per_image_cls.tolist()))]
        return "\n".join(lines) + "\n"


def cosine_similarity_diag(params: ViTParams, state_a, state_b, images, r_low, r_high) -> DiagResult:
    """Compare embedder ``state_a`` on images resized to ``r_low`` with
    ``state_b`` on the same images at ``r_high``.

    Patch similarity is the mean positionwise cosine over the N x N grid;
    class similarity is the cosine of final class-token features. Zero-norm
    vectors count as similarity 0 and are tallied in ``zero_norm``.
    """
    images = np.asarray(images)
    lo, hi = _hw(r_low), _hw(r_high)

    def at(res):
        if images.shape[1:3] == res:
            return images
        return apply_resize(build_resize_operator(images.shape[1:3], res, "bilinear"), images)

    ta = state_a(at(lo).astype(params.dtype, copy=False))
    tb = state_b(at(hi).astype(params.dtype, copy=False))
    pc, z1 = _cosine(ta.astype(np.float64), tb.astype(np.float64))
    per_patch = pc.reshape(len(images), -1).mean(axis=1)
    cc, z2 = _cosine(class_features(params, ta).astype(np.float64), class_features(params, tb).astype(np.float64))
    zero = z1 + z2
    if zero:
        log.warning("cosine diagnostic: %d zero-norm vectors scored as 0", zero)
    return DiagResult(float(per_patch.mean()), float(cc.mean()), per_patch, cc, zero)
