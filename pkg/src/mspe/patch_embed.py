"""Multi-scale patch embedding: a bank of K kernels, each applied at any
resolution after PI-resizing to (h // N, w // N)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _accel
from .resize import build_resize_operator, apply_resize, pi_resize_kernel


class ResolutionTooSmall(ValueError):
    pass


def token_count(h, w, kernel, stride=None, padding=0, mode="non_overlap"):
    """Tokens per side for a patch-embedding convolution.

    >>> token_count(224, 224, (16, 16))
    (14, 14)
    >>> token_count(224, 224, (16, 16), stride=(8, 8), padding=1, mode="overlap")
    (27, 27)
    """
    hk, wk = kernel
    hs, ws = stride if stride is not None else kernel
    if min(h, w, hk, wk, hs, ws) < 1 or padding < 0:
        raise ValueError("token_count: sizes must be >= 1 and padding >= 0")
    if mode == "non_overlap":
        if (hs, ws) != (hk, wk):
            raise ValueError(f"non-overlapping patches need stride == kernel, got {(hs, ws)} vs {(hk, wk)}")
        return h // hk, w // wk
    if mode == "overlap":
        # ceil((h - hk) / hs + p) in exact integer arithmetic
        return -((hk - h - padding * hs) // hs), -((wk - w - padding * ws) // ws)
    raise ValueError(f"unknown token_count mode {mode!r}")


def center_crop(images: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Crop (..., H, W, C) to (..., out_h, out_w, C); an odd remainder loses
    its extra pixel at the top/left."""
    h, w = images.shape[-3:-1]
    top = (h - out_h + 1) // 2
    left = (w - out_w + 1) // 2
    return images[..., top:top + out_h, left:left + out_w, :]


def adaptive_size(resolution, n: int) -> tuple[int, int]:
    h, w = resolution
    if h < n or w < n:
        raise ResolutionTooSmall(f"resolution {(h, w)} is smaller than the {n}x{n} token grid")
    return h // n, w // n


def embed_with_kernel(images, kernel, bias, n, base_size=None, resize="pi", method="bilinear"):
    """Embed a batch (B, h, w, C) with one kernel resized to the adaptive size.

    Returns (tokens (B, n, n, D), cropped images, resized kernel); the latter
    two are what the backward pass needs.
    """
    images = np.asarray(images)
    single = images.ndim == 3
    if single:
        images = images[None]
    hk, wk = adaptive_size(images.shape[1:3], n)
    src = kernel.shape[:2] if base_size is None else base_size
    k = pi_resize_kernel(kernel, src, (hk, wk), method=method, resize=resize)
    cropped = center_crop(images, n * hk, n * wk).astype(k.dtype, copy=False)
    tokens = _accel.patch_conv(cropped, k, bias.astype(k.dtype, copy=False))
    return (tokens[0] if single else tokens), cropped, k


@dataclass
class TokenGrid:
    tokens: np.ndarray
    source_resolution: tuple[int, int]


@dataclass
class PatchKernelBank:
    """K base kernels (hk_k x wk_k x C x D) with biases and anchor resolutions.

    Kernel k is native at anchors[k] = N * base size of kernel k.
    """

    kernels: list[np.ndarray]
    biases: list[np.ndarray]
    token_grid: int
    resize: str = "pi"
    method: str = "bilinear"
    anchors: list[tuple[int, int]] = field(default=None)

    def __post_init__(self):
        if not self.kernels or len(self.kernels) != len(self.biases):
            raise ValueError("bank needs K >= 1 kernels with one bias each")
        if self.anchors is None:
            self.anchors = [(self.token_grid * k.shape[0], self.token_grid * k.shape[1]) for k in self.kernels]
        self.anchors = [tuple(int(v) for v in a) for a in self.anchors]
        hs = [a[0] for a in self.anchors]
        if any(b <= a for a, b in zip(hs, hs[1:])):
            raise ValueError(f"anchors must be strictly increasing in height, got {self.anchors}")
        for k in self.kernels:
            if not np.all(np.isfinite(k)):
                raise ValueError("bank kernels must be finite")

    @property
    def K(self) -> int:
        return len(self.kernels)

    @property
    def channels(self) -> int:
        return self.kernels[0].shape[2]

    @property
    def embed_dim(self) -> int:
        return self.kernels[0].shape[3]

    def copy(self) -> "PatchKernelBank":
        return PatchKernelBank([k.copy() for k in self.kernels], [b.copy() for b in self.biases],
                               self.token_grid, self.resize, self.method, list(self.anchors))

    def astype(self, dtype) -> "PatchKernelBank":
        return PatchKernelBank([k.astype(dtype) for k in self.kernels], [b.astype(dtype) for b in self.biases],
                               self.token_grid, self.resize, self.method, list(self.anchors))


def base_kernel_sizes(base_patch: int, k: int) -> list[int]:
    if base_patch % k:
        raise ValueError(f"base patch {base_patch} is not divisible by K={k}")
    return [base_patch * (i + 1) // k for i in range(k)]


def bank_from_pretrained(kernel, bias, token_grid, k=4, resize="pi", method="bilinear") -> PatchKernelBank:
    """Initialise a K-kernel bank by PI-resizing one pretrained kernel to each
    base size; the largest base size equals the pretrained patch."""
    base_patch = kernel.shape[0]
    if kernel.shape[0] != kernel.shape[1]:
        raise ValueError("pretrained kernel must be square")
    kernels = [
        pi_resize_kernel(kernel, kernel.shape[:2], (s, s), method=method, resize=resize)
        for s in base_kernel_sizes(base_patch, k)
    ]
    return PatchKernelBank(kernels, [bias.copy() for _ in range(k)], token_grid, resize, method)


def select_kernel(bank: PatchKernelBank, resolution) -> int:
    """Index of the anchor nearest to ``resolution`` (Euclidean on (h, w));
    ties go to the smaller index."""
    h, w = resolution
    best, best_d = 0, None
    for i, (ah, aw) in enumerate(bank.anchors):
        d = (ah - h) ** 2 + (aw - w) ** 2
        if best_d is None or d < best_d:
            best, best_d = i, d
    return best


def adaptive_kernel(bank: PatchKernelBank, index: int, resolution):
    size = adaptive_size(resolution, bank.token_grid)
    base = bank.kernels[index]
    k = pi_resize_kernel(base, base.shape[:2], size, method=bank.method, resize=bank.resize)
    return k, bank.biases[index]


def embed_batch(bank: PatchKernelBank, images: np.ndarray, index: int | None = None):
    """Embed a same-resolution batch (B, h, w, C) -> (tokens, cropped, kernel, index)."""
    if index is None:
        index = select_kernel(bank, images.shape[1:3])
    tokens, cropped, k = embed_with_kernel(
        images, bank.kernels[index], bank.biases[index], bank.token_grid,
        resize=bank.resize, method=bank.method,
    )
    return tokens, cropped, k, index


def embed(bank: PatchKernelBank, image: np.ndarray) -> TokenGrid:
    h, w = image.shape[:2]
    tokens, _, _, _ = embed_batch(bank, image[None])
    return TokenGrid(tokens[0], (h, w))


def interpolate_pos_embed(pos: np.ndarray, target) -> np.ndarray:
    """Bilinearly resample an (Nh, Nw, D) position grid to ``target`` cells."""
    nh, nw = target
    if min(nh, nw, *pos.shape) < 1:
        raise ValueError("position grid dimensions must be >= 1")
    op = build_resize_operator(pos.shape[:2], (nh, nw), "bilinear")
    return apply_resize(op, pos)


def embed_macs(resolution, n, channels, dim, base_resolution=None) -> int:
    """Multiply-accumulates of the patch embedding at ``resolution``; with
    ``base_resolution`` the image is resized there first (image resizing cost
    not counted)."""
    if base_resolution is not None:
        resolution = base_resolution
    hk, wk = adaptive_size(resolution, n)
    return n * n * hk * wk * channels * dim
