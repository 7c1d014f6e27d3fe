import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mspe import _accel
from mspe.patch_embed import (
    PatchKernelBank, ResolutionTooSmall, adaptive_kernel, adaptive_size, bank_from_pretrained,
    base_kernel_sizes, center_crop, embed, embed_batch, embed_macs, interpolate_pos_embed,
    select_kernel, token_count,
)
from mspe.resize import axis_matrix


def make_bank(n=14, base_patch=16, k=4, c=1, d=3, seed=0):
    rng = np.random.default_rng(seed)
    kernels = [rng.normal(size=(s, s, c, d)) for s in base_kernel_sizes(base_patch, k)]
    biases = [rng.normal(size=d) for _ in range(k)]
    return PatchKernelBank(kernels, biases, n)


def brute_select(anchors, h, w):
    d = [(ah - h) ** 2 + (aw - w) ** 2 for ah, aw in anchors]
    return min(range(len(d)), key=lambda i: (d[i], i))


# --- token_count ------------------------------------------------------------------

@pytest.mark.parametrize("h,w,k,want", [(224, 224, 16, (14, 14)), (112, 112, 8, (14, 14))])
def test_token_count_non_overlap(h, w, k, want):
    assert token_count(h, w, (k, k)) == want


def test_token_count_overlap():
    assert token_count(224, 224, (16, 16), stride=(8, 8), padding=1, mode="overlap") == (27, 27)


def test_token_count_stride_mismatch():
    with pytest.raises(ValueError):
        token_count(224, 224, (16, 16), stride=(8, 8))


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 300), st.integers(1, 40), st.integers(1, 20), st.integers(0, 5))
def test_token_count_overlap_matches_float_ceil(h, k, s, p):
    import math
    got = token_count(h, h, (k, k), stride=(s, s), padding=p, mode="overlap")[0]
    assert got == math.ceil((h - k) / s + p)


# --- select_kernel ------------------------------------------------------------------

def square_bank(anchors, n=4):
    return PatchKernelBank([np.zeros((a // n, a // n, 1, 1)) for a in anchors],
                           [np.zeros(1) for _ in anchors], n)


def test_select_nearest():
    bank = square_bank([56, 112, 168, 224], n=14)
    assert select_kernel(bank, (100, 100)) == 1


def test_select_tie_goes_to_smaller():
    bank = square_bank([56, 112, 168, 224], n=14)
    assert select_kernel(bank, (84, 84)) == 0


def test_select_above_largest():
    bank = square_bank([56, 112, 168, 224], n=14)
    assert select_kernel(bank, (448, 448)) == 3


def test_select_exhaustive_against_brute_force():
    bank = square_bank([32, 64, 96, 128])
    for h, w in itertools.product(range(32, 161), repeat=2):
        assert select_kernel(bank, (h, w)) == brute_select(bank.anchors, h, w)


@settings(max_examples=200, deadline=None)
@given(st.integers(4, 400), st.integers(4, 400))
def test_select_total_and_deterministic(h, w):
    bank = make_bank(n=4, base_patch=8, k=4)
    i = select_kernel(bank, (h, w))
    assert 0 <= i < bank.K
    assert i == select_kernel(bank, (h, w)) == brute_select(bank.anchors, h, w)


# --- bank ---------------------------------------------------------------------------

def test_base_kernel_sizes():
    assert base_kernel_sizes(16, 4) == [4, 8, 12, 16]
    with pytest.raises(ValueError):
        base_kernel_sizes(10, 4)


def test_anchors_default_to_grid_times_size():
    bank = make_bank(n=8, base_patch=16)
    assert bank.anchors == [(32, 32), (64, 64), (96, 96), (128, 128)]


def test_bank_rejects_bad_anchors_and_nonfinite():
    with pytest.raises(ValueError):
        PatchKernelBank([np.zeros((2, 2, 1, 1))] * 2, [np.zeros(1)] * 2, 4, anchors=[(8, 8), (8, 8)])
    with pytest.raises(ValueError):
        PatchKernelBank([np.full((2, 2, 1, 1), np.inf)], [np.zeros(1)], 4)
    with pytest.raises(ValueError):
        PatchKernelBank([], [], 4)


def test_bank_from_pretrained_keeps_largest_kernel():
    w = np.random.default_rng(1).normal(size=(8, 8, 1, 5)).astype(np.float32)
    b = np.arange(5, dtype=np.float32)
    bank = bank_from_pretrained(w, b, 4, 4)
    np.testing.assert_array_equal(bank.kernels[-1], w)
    assert [k.shape[0] for k in bank.kernels] == [2, 4, 6, 8]
    assert all(k.dtype == np.float32 for k in bank.kernels)
    for bias in bank.biases:
        np.testing.assert_array_equal(bias, b)
    assert bank.biases[0] is not b


# --- adaptive kernel ------------------------------------------------------------------

def test_adaptive_identity_at_base():
    bank = make_bank(n=14, base_patch=16)
    k, b = adaptive_kernel(bank, 3, (224, 224))
    np.testing.assert_array_equal(k, bank.kernels[3])
    assert b is bank.biases[3]


def test_adaptive_half():
    bank = make_bank(n=14, base_patch=16)
    assert adaptive_kernel(bank, 3, (112, 112))[0].shape[:2] == (8, 8)


def test_adaptive_non_square():
    bank = make_bank(n=14, base_patch=16)
    assert adaptive_kernel(bank, 3, (230, 118))[0].shape[:2] == (16, 8)


def test_adaptive_too_small():
    bank = make_bank(n=14, base_patch=16)
    with pytest.raises(ResolutionTooSmall):
        adaptive_kernel(bank, 0, (13, 200))
    assert issubclass(ResolutionTooSmall, ValueError)


# --- embed ------------------------------------------------------------------------

def test_zero_image_gives_bias():
    bank = make_bank(n=4, base_patch=8)
    g = embed(bank, np.zeros((19, 27, 1)))
    assert g.tokens.shape == (4, 4, 3)
    np.testing.assert_allclose(g.tokens, np.broadcast_to(bank.biases[select_kernel(bank, (19, 27))], (4, 4, 3)))
    assert g.source_resolution == (19, 27)


def test_averaging_kernel_constant_image():
    n, v, bias = 4, 0.7, 0.25
    sizes = base_kernel_sizes(8, 4)
    bank = PatchKernelBank([np.full((s, s, 1, 1), 1.0 / (s * s)) for s in sizes],
                           [np.array([bias]) for _ in sizes], n)
    for a in bank.anchors:
        g = embed(bank, np.full(a + (1,), v))
        np.testing.assert_allclose(g.tokens, v + bias, atol=1e-12)


def test_crop_230_by_118():
    img = np.zeros((230, 118, 1))
    img[:3] = 1.0
    img[-3:] = 1.0
    img[:, :3] = 1.0
    img[:, -3:] = 1.0
    cropped = center_crop(img, 224, 112)
    assert cropped.shape == (224, 112, 1)
    assert cropped.max() == 0.0
    assert img[3:227, 3:115].max() == 0.0


def test_crop_odd_remainder_extra_pixel_top_left():
    img = np.arange(5 * 7).reshape(5, 7, 1)
    # 5 -> 2 drops 2 top, 1 bottom; 7 -> 4 drops 2 left, 1 right
    np.testing.assert_array_equal(center_crop(img, 2, 4), img[2:4, 2:6])


def test_embed_230_by_118_grid():
    bank = make_bank(n=14, base_patch=16)
    assert embed(bank, np.ones((230, 118, 1))).tokens.shape == (14, 14, 3)


@settings(max_examples=40, deadline=None)
@given(st.integers(4, 70), st.integers(4, 70))
def test_grid_always_n_by_n(h, w):
    bank = make_bank(n=4, base_patch=8, d=2)
    g = embed(bank, np.random.default_rng(h * w).normal(size=(h, w, 1)))
    assert g.tokens.shape == (4, 4, 2)
    assert np.all(np.isfinite(g.tokens))


@settings(max_examples=30, deadline=None)
@given(st.integers(4, 50), st.integers(4, 50), st.floats(-3, 3))
def test_linear_up_to_bias(h, w, alpha):
    bank = make_bank(n=4, base_patch=8, d=2)
    x = np.random.default_rng(h + 100 * w).normal(size=(h, w, 1))
    i = select_kernel(bank, (h, w))
    b = bank.biases[i]
    lhs = embed(bank, alpha * x).tokens - b
    rhs = alpha * (embed(bank, x).tokens - b)
    np.testing.assert_allclose(lhs, rhs, atol=1e-5)


def test_single_kernel_at_anchor_is_plain_patchify():
    rng = np.random.default_rng(5)
    w = rng.normal(size=(8, 8, 3, 6))
    b = rng.normal(size=6)
    bank = PatchKernelBank([w], [b], 4)
    x = rng.normal(size=(2, 32, 32, 3))
    tokens, _, _, idx = embed_batch(bank, x)
    patches = x.reshape(2, 4, 8, 4, 8, 3).transpose(0, 1, 3, 2, 4, 5)
    ref = np.einsum("bijyxc,yxcd->bijd", patches, w) + b
    assert idx == 0
    np.testing.assert_allclose(tokens, ref, rtol=1e-12, atol=1e-12)
    np.testing.assert_array_equal(tokens, _accel.patch_conv(x, w, b))


def test_embed_batch_matches_single():
    bank = make_bank(n=4, base_patch=8)
    x = np.random.default_rng(6).normal(size=(3, 21, 13, 1))
    tokens, _, _, _ = embed_batch(bank, x)
    for i in range(3):
        np.testing.assert_allclose(tokens[i], embed(bank, x[i]).tokens, atol=1e-12)


# --- position embedding ------------------------------------------------------------

def test_pos_embed_identity():
    p = np.random.default_rng(7).normal(size=(4, 4, 5))
    np.testing.assert_array_equal(interpolate_pos_embed(p, (4, 4)), p)


def test_pos_embed_constant():
    np.testing.assert_allclose(interpolate_pos_embed(np.full((3, 3, 2), 1.5), (7, 5)), 1.5)


def test_pos_embed_ramp():
    p = np.zeros((2, 2, 1))
    p[1] = 1.0
    out = interpolate_pos_embed(p, (4, 4))[:, :, 0]
    for col in out.T:
        np.testing.assert_allclose(col, [0, 0.25, 0.75, 1])


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 12), st.integers(1, 12))
def test_pos_embed_range_preserved(h, w, th, tw):
    p = np.random.default_rng(h * 9 + w).normal(size=(h, w, 3))
    out = interpolate_pos_embed(p, (th, tw))
    assert np.all(out.min(axis=(0, 1)) >= p.min(axis=(0, 1)) - 1e-12)
    assert np.all(out.max(axis=(0, 1)) <= p.max(axis=(0, 1)) + 1e-12)
    np.testing.assert_allclose(axis_matrix(h, th).sum(axis=1), 1.0)


# --- cost ---------------------------------------------------------------------------

def test_embed_macs():
    # adaptive kernel: N^2 patches x hk wk C D
    assert embed_macs((112, 112), 14, 3, 768) == 14 * 14 * 8 * 8 * 3 * 768
    assert embed_macs((112, 112), 14, 3, 768, base_resolution=(224, 224)) == 14 * 14 * 16 * 16 * 3 * 768
    assert adaptive_size((31, 45), 4) == (7, 11)
