"""Image resizing as explicit separable linear operators, and PI-resize.

A resize from (h, w) to (h*, w*) is stored as two axis matrices so that for
one channel ``out = row_matrix @ image @ col_matrix.T``. The full operator on
row-major ``vec(image)`` is ``kron(row_matrix, col_matrix)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache

import numpy as np


class Method(str, Enum):
    BILINEAR = "bilinear"
    NEAREST = "nearest"
    BICUBIC = "bicubic"


# Catmull-Rom
BICUBIC_A = -0.5


def _as_method(method) -> Method:
    try:
        return Method(method)
    except ValueError:
        raise ValueError(f"unknown resize method {method!r}") from None


def _cubic(t: float) -> float:
    a = BICUBIC_A
    t = abs(t)
    if t <= 1.0:
        return ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0
    if t < 2.0:
        return (((t - 5.0) * t + 8.0) * t - 4.0) * a
    return 0.0


def axis_matrix(src: int, dst: int, method="bilinear") -> np.ndarray:
    """Interpolation weights for one axis, shape (dst, src), float64.

    Target sample i sits at source coordinate (i + 0.5) * src / dst - 0.5;
    taps falling outside [0, src - 1] are clamped to the edge.
    """
    if src < 1 or dst < 1:
        raise ValueError(f"axis lengths must be >= 1, got src={src}, dst={dst}")
    return _axis_matrix_cached(int(src), int(dst), _as_method(method)).copy()


@lru_cache(maxsize=512)
def _axis_matrix_cached(src: int, dst: int, method: Method) -> np.ndarray:
    m = np.zeros((dst, src), dtype=np.float64)
    scale = src / dst
    for i in range(dst):
        x = (i + 0.5) * scale - 0.5
        if method is Method.NEAREST:
            j = min(int(math.floor((i + 0.5) * scale)), src - 1)
            m[i, j] = 1.0
        elif method is Method.BILINEAR:
            x = min(max(x, 0.0), src - 1.0)
            j0 = int(math.floor(x))
            j1 = min(j0 + 1, src - 1)
            t = x - j0
            m[i, j0] += 1.0 - t
            m[i, j1] += t
        else:
            j0 = int(math.floor(x))
            t = x - j0
            for off in range(-1, 3):
                j = min(max(j0 + off, 0), src - 1)
                m[i, j] += _cubic(t - off)
    m.setflags(write=False)
    return m


@dataclass(frozen=True)
class ResizeOperator:
    src_h: int
    src_w: int
    dst_h: int
    dst_w: int
    method: Method
    row_matrix: np.ndarray
    col_matrix: np.ndarray

    @property
    def is_identity(self) -> bool:
        # same-size sampling lands on integer taps for every method
        return (self.src_h, self.src_w) == (self.dst_h, self.dst_w)

    def full_matrix(self) -> np.ndarray:
        """Dense (h* w*) x (h w) operator. Only sensible for small sizes."""
        return np.kron(self.row_matrix, self.col_matrix)


def build_resize_operator(src, dst, method="bilinear") -> ResizeOperator:
    src_h, src_w = _pair(src)
    dst_h, dst_w = _pair(dst)
    if min(src_h, src_w, dst_h, dst_w) < 1:
        raise ValueError(f"resize dimensions must be >= 1, got {src} -> {dst}")
    method = _as_method(method)
    return ResizeOperator(
        src_h, src_w, dst_h, dst_w, method,
        _axis_matrix_cached(src_h, dst_h, method),
        _axis_matrix_cached(src_w, dst_w, method),
    )


def _pair(x) -> tuple[int, int]:
    if np.isscalar(x):
        return int(x), int(x)
    h, w = x
    return int(h), int(w)


def apply_resize(op: ResizeOperator, image: np.ndarray) -> np.ndarray:
    """Resize an (H, W, C) image, or a (B, H, W, C) batch, channel by channel."""
    image = np.asarray(image)
    if image.ndim not in (3, 4) or image.shape[-3:-1] != (op.src_h, op.src_w):
        raise ValueError(
            f"image shape {image.shape} does not match operator source {(op.src_h, op.src_w)}"
        )
    if not np.issubdtype(image.dtype, np.floating):
        image = image.astype(np.float64)
    if op.is_identity:
        return image.copy()
    r = op.row_matrix.astype(image.dtype)
    c = op.col_matrix.astype(image.dtype)
    # out[..., a, b, ch] = sum_ij r[a, i] img[..., i, j, ch] c[b, j]
    tmp = np.einsum("ai,...ijc->...ajc", r, image)
    return np.einsum("bj,...ajc->...abc", c, tmp)


def resize_image(image: np.ndarray, dst, method="bilinear") -> np.ndarray:
    h, w = image.shape[-3:-1]
    return apply_resize(build_resize_operator((h, w), dst, method), image)


def pseudo_inverse(m: np.ndarray, rel_tol: float = 1e-10) -> np.ndarray:
    """Moore-Penrose pseudo-inverse by SVD, always computed in float64.

    Singular values below ``rel_tol * sigma_max`` are treated as zero.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("pseudo_inverse: matrix has non-finite entries")
    if m.size == 0:
        return np.zeros(m.shape[::-1])
    u, s, vt = np.linalg.svd(m, full_matrices=False)
    cutoff = rel_tol * s.max() if s.size else 0.0
    inv_s = np.zeros_like(s)
    keep = s > cutoff
    inv_s[keep] = 1.0 / s[keep]
    return (vt.T * inv_s) @ u.T


@lru_cache(maxsize=512)
def _pi_axis_cached(src: int, dst: int, method: Method) -> np.ndarray:
    # (B^T)^+ for one axis: shape (dst, src)
    p = pseudo_inverse(_axis_matrix_cached(src, dst, method).T)
    p.setflags(write=False)
    return p


def kernel_resize_factors(src, dst, resize="pi", method="bilinear"):
    """Axis factors (L, R) with resized = L @ W @ R.T for every kernel slice W.

    ``resize="pi"`` gives the pseudo-inverse map of the ``method`` interpolation
    operator; any interpolation name instead resizes the weights directly,
    which is the plain-resize baseline for kernels.
    """
    sh, sw = _pair(src)
    dh, dw = _pair(dst)
    if min(sh, sw, dh, dw) < 1:
        raise ValueError(f"kernel sizes must be >= 1, got {src} -> {dst}")
    if resize == "pi":
        m = _as_method(method)
        return _pi_axis_cached(sh, dh, m), _pi_axis_cached(sw, dw, m)
    m = _as_method(resize)
    return _axis_matrix_cached(sh, dh, m), _axis_matrix_cached(sw, dw, m)


def pi_resize_kernel(kernel: np.ndarray, src, dst, method="bilinear", resize="pi") -> np.ndarray:
    """PI-resize a (kh, kw, C, D) kernel to (kh*, kw*, C, D).

    Each (channel, output) slice w becomes ``(B^T)^+ vec(w)`` where B is the
    image resize operator from ``src`` to ``dst``. Computed separably in
    float64 and returned in the kernel's dtype.
    """
    kernel = np.asarray(kernel)
    sh, sw = _pair(src)
    dh, dw = _pair(dst)
    if kernel.ndim != 4 or kernel.shape[:2] != (sh, sw):
        raise ValueError(f"kernel shape {kernel.shape} does not match source size {(sh, sw)}")
    if (sh, sw) == (dh, dw):
        return kernel.copy()
    left, right = kernel_resize_factors((sh, sw), (dh, dw), resize, method)
    out = np.einsum("ai,ijcd,bj->abcd", left, kernel.astype(np.float64), right)
    return out.astype(kernel.dtype if np.issubdtype(kernel.dtype, np.floating) else np.float64)


def pi_resize_kernel_transpose(grad: np.ndarray, src, dst, method="bilinear", resize="pi") -> np.ndarray:
    """Adjoint of :func:`pi_resize_kernel`: maps a gradient on the resized
    kernel (dst) back onto the source kernel (src)."""
    sh, sw = _pair(src)
    dh, dw = _pair(dst)
    if grad.shape[:2] != (dh, dw):
        raise ValueError(f"gradient shape {grad.shape} does not match target size {(dh, dw)}")
    if (sh, sw) == (dh, dw):
        return grad.copy()
    left, right = kernel_resize_factors((sh, sw), (dh, dw), resize, method)
    out = np.einsum("ai,abcd,bj->ijcd", left, grad.astype(np.float64), right)
    return out.astype(grad.dtype)
