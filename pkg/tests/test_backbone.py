from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rgbpose import backbone as bb
from rgbpose.diffmath import Params
from rgbpose.errors import ConfigError, DimensionError


def _params(rng, patch=4, d=8):
    p = Params()
    bb.add_embedder(p, patch, d, rng)
    bb.add_point_encoder(p, "enc", 6, d, rng)
    bb.add_point_encoder(p, "guide", 6, 2 * d, rng, frozen=True)
    return p


def test_positional_encoding_layout():
    pe = bb.positional_encoding(2, 3, 8)
    assert pe.shape == (6, 8)
    # row half depends only on the row, column half only on the column
    np.testing.assert_array_equal(pe[0, :4], pe[2, :4])
    np.testing.assert_array_equal(pe[0, 4:], pe[3, 4:])
    np.testing.assert_allclose(pe[0], [0, 0, 1, 1, 0, 0, 1, 1])
    with pytest.raises(ConfigError):
        bb.positional_encoding(2, 2, 6)


def test_patchify_row_major():
    img = np.arange(4 * 4 * 3, dtype=float).reshape(4, 4, 3)
    flat = bb.patchify(img, 2)
    assert flat.shape == (4, 12)
    np.testing.assert_array_equal(flat[1].reshape(2, 2, 3), img[:2, 2:4])
    with pytest.raises(ConfigError):
        bb.patchify(img, 3)


def test_observed_token_rule():
    mask = np.zeros((8, 8), bool)
    mask[0:4, 0:4] = True            # patch 0 full
    mask[0:2, 4:8] = True            # patch 1 half covered, center (row 2) outside
    mask[4:8, 4:8] = True
    mask[6, 6] = False               # patch 3 covered 15/16 but center pixel empty
    idx, centers = bb.observed_tokens(mask, 4)
    np.testing.assert_array_equal(idx, [0])
    np.testing.assert_array_equal(centers, [[2.0, 2.0]])


def test_embed_patches_shapes(rng):
    p = _params(rng)
    img = rng.uniform(size=(8, 8, 3))
    grid = bb.embed_patches(img, np.ones((8, 8), bool), p, 4)
    assert grid.tokens.shape == (4, 8) and len(grid.observed) == 4
    with pytest.raises(DimensionError):
        bb.embed_patches(img[:, :, :2], np.ones((8, 8), bool), p, 4)


def test_silhouette_of_full_square_and_empty():
    np.testing.assert_allclose(bb.silhouette_descriptor(np.ones((64, 64), bool)),
                               [1, 1 - 1 / 64**2, 1 - 1 / 64**2, 1, 1, 1], rtol=1e-3)
    np.testing.assert_array_equal(bb.silhouette_descriptor(np.zeros((8, 8), bool)), np.zeros(bb.SILHOUETTE_DIM))


def test_silhouette_of_bar():
    m = np.zeros((40, 40), bool)
    m[10:30, 18:22] = True
    d = bb.silhouette_descriptor(m)
    assert d[0] == pytest.approx(80 / 1600)
    assert d[4] == pytest.approx(4 / 40) and d[5] == pytest.approx(20 / 40)
    assert d[2] > d[1] and d[3] < 0.1


@given(st.integers(0, 10_000))
def test_point_encoder_is_permutation_equivariant(seed):
    rng = np.random.default_rng(seed)
    p = _params(np.random.default_rng(0))
    P = rng.uniform(-0.5, 0.5, (7, 3))
    perm = rng.permutation(7)
    a = bb.encode_points(P, p, "enc").feats.data
    b = bb.encode_points(P[perm], p, "enc").feats.data
    np.testing.assert_allclose(a[perm], b, rtol=1e-12, atol=1e-14)


def test_guidance_features_are_scaled_constants(rng):
    p = _params(rng)
    nocs = rng.uniform(-0.5, 0.5, (5, 3))
    g1 = bb.encode_nocs_guidance(nocs, p)
    g5 = bb.encode_nocs_guidance(nocs, p, scale=5.0)
    assert g5.shape == (5, 16) and not g5.requires_grad
    np.testing.assert_allclose(g5.data, 5 * g1.data)


def test_encode_points_rejects_bad_shape(rng):
    with pytest.raises(DimensionError):
        bb.encode_points(np.zeros((3, 2)), _params(rng), "enc")


def test_zero_image_gives_positional_encoding(rng):
    p = _params(rng)
    grid = bb.embed_patches(np.zeros((8, 8, 3)), np.ones((8, 8), bool), p, 4)
    np.testing.assert_array_equal(grid.tokens.data, bb.positional_encoding(2, 2, 8))


def test_embedding_is_linear_and_local(rng):
    p = _params(rng)
    mask = np.ones((8, 8), bool)
    pe = bb.positional_encoding(2, 2, 8)
    img = rng.uniform(size=(8, 8, 3))
    a = bb.embed_patches(img, mask, p, 4).tokens.data - pe
    b = bb.embed_patches(2.5 * img, mask, p, 4).tokens.data - pe
    np.testing.assert_allclose(b, 2.5 * a, atol=1e-10)
    other = img.copy()
    other[4:8, 0:4] += 0.3
    c = bb.embed_patches(other, mask, p, 4).tokens.data - pe
    changed = np.nonzero(np.any(c != a, axis=1))[0]
    np.testing.assert_array_equal(changed, [2])
    swapped = img.copy()
    swapped[0:4, 0:4], swapped[4:8, 4:8] = img[4:8, 4:8], img[0:4, 0:4]
    d = bb.embed_patches(swapped, mask, p, 4).tokens.data - pe
    np.testing.assert_allclose(d[[3, 1, 2, 0]], a, atol=1e-12)


def test_geom_head_zero_init(rng):
    p = Params()
    bb.add_geom_head(p, 8, rng)
    out = bb.geom_head(rng.normal(size=(5, 8)), p)
    assert out.shape == (5, 8)
    np.testing.assert_array_equal(out.data, 0.0)


def test_geom_head_gradient(rng):
    from rgbpose import diffmath as dm
    from rgbpose.diffmath import Tensor
    p = Params()
    bb.add_geom_head(p, 4, rng)
    p["geom.1.w"].data = rng.normal(size=(4, 4))
    x = Tensor(rng.normal(size=(3, 4)))
    w = rng.normal(size=(3, 4))
    assert dm.gradcheck(lambda: dm.sum_(dm.mul(bb.geom_head(x, p), w)), [x, p["geom.0.w"], p["geom.1.w"]]) <= 1e-5


def test_point_encoder_single_and_duplicate_points(rng):
    p = _params(rng)
    one = bb.encode_points(np.array([[0.1, -0.2, 0.3]]), p, "enc").feats.data
    assert one.shape == (1, 8)
    P = rng.uniform(-0.5, 0.5, (4, 3))
    P[3] = P[1]
    f = bb.encode_points(P, p, "enc").feats.data
    np.testing.assert_array_equal(f[3], f[1])


def test_guidance_is_deterministic_and_geometry_sensitive(rng):
    p = _params(rng)
    a = rng.uniform(-0.5, 0.5, (20, 3))
    np.testing.assert_array_equal(bb.encode_nocs_guidance(a, p).data, bb.encode_nocs_guidance(a.copy(), p).data)
    b = a + np.array([0.3, 0.0, 0.0])
    fa, fb = bb.encode_nocs_guidance(a, p).data, bb.encode_nocs_guidance(b, p).data
    assert abs(np.abs(fa).mean() - np.abs(fb).mean()) > 0
