"""Hot elementwise and row-reduction kernels, with a numba and a numpy path.

The numba path is used when numba imports cleanly and ``MSPE_DISABLE_NUMBA``
is unset (or ``0``). The fused numba loops make one pass per row where numpy
makes several over temporaries. Both paths agree to rounding but not
bitwise, so bitwise comparisons must stay on one path within a process.

Kernels where numpy already wins have a numpy path only: the patch
convolution is a reshape plus a BLAS product, and the GELU derivative is a
single vectorised ``exp`` that a scalar loop cannot beat.
"""

from __future__ import annotations

import math
import os

import numpy as np
from scipy.special import erf

_DISABLED = os.environ.get("MSPE_DISABLE_NUMBA", "0").lower() not in ("", "0", "false", "no")

try:
    if _DISABLED:
        raise ImportError("disabled by MSPE_DISABLE_NUMBA")
    from numba import njit
except ImportError:
    njit = None

USE_NUMBA = njit is not None

# python floats so float32 arrays are not promoted
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def patch_conv(images, kernel, bias):
    """Stride-equals-kernel convolution of a batch.

    images: (B, Nh*hk, Nw*wk, C); kernel: (hk, wk, C, D); bias: (D,).
    Returns tokens (B, Nh, Nw, D).
    """
    b, h, w, c = images.shape
    hk, wk, _, d = kernel.shape
    nh, nw = h // hk, w // wk
    patches = images.reshape(b, nh, hk, nw, wk, c).transpose(0, 1, 3, 2, 4, 5)
    patches = patches.reshape(b * nh * nw, hk * wk * c)
    out = patches @ kernel.reshape(hk * wk * c, d) + bias
    return out.reshape(b, nh, nw, d)


def patch_conv_grad_kernel(images, grad_tokens):
    """Gradient of sum(tokens * grad_tokens) w.r.t. the kernel, shape (hk, wk, C, D)."""
    b, h, w, c = images.shape
    _, nh, nw, d = grad_tokens.shape
    hk, wk = h // nh, w // nw
    patches = images.reshape(b, nh, hk, nw, wk, c).transpose(0, 1, 3, 2, 4, 5)
    patches = patches.reshape(b * nh * nw, hk * wk * c)
    g = patches.T @ grad_tokens.reshape(b * nh * nw, d)
    return g.reshape(hk, wk, c, d)


def gelu_grad(u, cdf):
    return cdf + u * _INV_SQRT2PI * np.exp(-0.5 * u * u)


# --- numpy path -------------------------------------------------------------------

def layernorm_forward_numpy(x, g, b, eps):
    """Returns (y, xhat, inv) with inv of shape (..., 1)."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * g + b, xhat, inv


def layernorm_backward_numpy(dy, g, xhat, inv):
    dxhat = dy * g
    return inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                  - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))


def gelu_forward_numpy(u):
    """Returns (gelu(u), Phi(u))."""
    cdf = 0.5 * (1.0 + erf(u * _INV_SQRT2))
    return u * cdf, cdf


# --- numba path -------------------------------------------------------------------

if USE_NUMBA:

    @njit(cache=True)
    def _ln_forward_nb(x, g, b, eps, y, xhat, inv):
        n, d = x.shape
        for r in range(n):
            mu = 0.0
            for j in range(d):
                mu += x[r, j]
            mu /= d
            var = 0.0
            for j in range(d):
                t = x[r, j] - mu
                var += t * t
            iv = 1.0 / math.sqrt(var / d + eps)
            inv[r] = iv
            for j in range(d):
                h = (x[r, j] - mu) * iv
                xhat[r, j] = h
                y[r, j] = h * g[j] + b[j]

    @njit(cache=True)
    def _ln_backward_nb(dy, g, xhat, inv, dx):
        n, d = dy.shape
        for r in range(n):
            s1 = 0.0
            s2 = 0.0
            for j in range(d):
                t = dy[r, j] * g[j]
                s1 += t
                s2 += t * xhat[r, j]
            s1 /= d
            s2 /= d
            for j in range(d):
                dx[r, j] = inv[r] * (dy[r, j] * g[j] - s1 - xhat[r, j] * s2)

    @njit(cache=True)
    def _gelu_forward_nb(u, out, cdf):
        for i in range(u.size):
            c = 0.5 * (1.0 + math.erf(u[i] * _INV_SQRT2))
            cdf[i] = c
            out[i] = u[i] * c

    def _rows(a, dtype):
        return np.ascontiguousarray(a, dtype=dtype).reshape(-1, a.shape[-1])

    def layernorm_forward(x, g, b, eps):
        dtype = np.result_type(x, g, b)
        x2 = _rows(x, dtype)
        y = np.empty_like(x2)
        xhat = np.empty_like(x2)
        inv = np.empty(x2.shape[0], dtype=dtype)
        _ln_forward_nb(x2, np.ascontiguousarray(g, dtype), np.ascontiguousarray(b, dtype), eps, y, xhat, inv)
        lead = x.shape[:-1]
        return y.reshape(x.shape), xhat.reshape(x.shape), inv.reshape(lead + (1,))

    def layernorm_backward(dy, g, xhat, inv):
        dtype = np.result_type(dy, g, xhat)
        dy2 = _rows(dy, dtype)
        dx = np.empty_like(dy2)
        _ln_backward_nb(dy2, np.ascontiguousarray(g, dtype), _rows(xhat, dtype),
                        np.ascontiguousarray(inv, dtype).reshape(-1), dx)
        return dx.reshape(dy.shape)

    def gelu_forward(u):
        flat = np.ascontiguousarray(u).reshape(-1)
        out = np.empty_like(flat)
        cdf = np.empty_like(flat)
        _gelu_forward_nb(flat, out, cdf)
        return out.reshape(u.shape), cdf.reshape(u.shape)

else:
    layernorm_forward = layernorm_forward_numpy
    layernorm_backward = layernorm_backward_numpy
    gelu_forward = gelu_forward_numpy
