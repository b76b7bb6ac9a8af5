import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from accnn import tensor as T
from accnn.backbone import FeatureCube
from accnn.boxes import BBox, scale_box
from accnn.local_context import (
    LocalContextConfig,
    box_to_region,
    calibrate_norm_scale,
    fuse_multiscale,
    init_local,
    local_feature,
    roi_pool,
)
from accnn.pooling import region_max_pool
from accnn.tensor import Tensor, backward, grad_check, l2_normalize_scale

import oracles


def cube_of(arr, stride=8):
    return FeatureCube(Tensor(np.asarray(arr, dtype=np.float64)), stride)


# -- scale_box ---------------------------------------------------------------


def test_scale_box_examples():
    b = BBox(50, 50, 20, 10)
    assert scale_box(b, 1.2, 100, 100) == BBox(50, 50, 24, 12)
    assert scale_box(b, 1.0, 100, 100) == b


def test_scale_box_clips_by_corner_arithmetic():
    out = scale_box(BBox(5, 5, 20, 20), 1.8, 100, 100)
    # (5,5,36,36) spans [-13, 23] on both axes; intersect with [0, 100]
    assert out.corners == (0.0, 0.0, 23.0, 23.0)
    assert out.area < 1.8**2 * 400


def test_scale_box_outside_image():
    with pytest.raises(ValueError, match="outside"):
        scale_box(BBox(-50, 10, 10, 10), 1.0, 100, 100)


@given(st.floats(20, 80), st.floats(20, 80), st.floats(2, 20), st.floats(2, 20), st.floats(0.5, 1.9))
@settings(max_examples=200, deadline=None)
def test_scale_box_unclipped_properties(cx, cy, w, h, lam):
    out = scale_box(BBox(cx, cy, w, h), lam, 100, 100)
    assert (out.cx, out.cy) == (cx, cy)
    assert abs(out.area / (w * h) - lam**2) < 1e-9


@given(st.floats(-5, 105), st.floats(-5, 105), st.floats(1, 60), st.floats(1, 60), st.floats(0.2, 3))
@settings(max_examples=200, deadline=None)
def test_scale_box_result_in_image_and_nondegenerate(cx, cy, w, h, lam):
    b = BBox(cx, cy, w, h)
    x1, y1, x2, y2 = b.corners
    if x2 <= 0 or y2 <= 0 or x1 >= 100 or y1 >= 100:
        return
    out = scale_box(b, lam, 100, 100)
    ox1, oy1, ox2, oy2 = out.corners
    assert 0 <= ox1 and 0 <= oy1 and ox2 <= 100 and oy2 <= 100
    assert out.w >= 1 - 1e-12 and out.h >= 1 - 1e-12


# -- roi_pool ----------------------------------------------------------------


def test_roi_pool_constant():
    out = roi_pool(cube_of(np.full((8, 8, 4), 3.0)), BBox(30, 30, 40, 20), 7)
    assert out.shape == (7, 7, 4)
    assert np.all(out.data == 3.0)


def test_roi_pool_single_peak_matches_bruteforce():
    c = np.zeros((10, 10, 1))
    c[4, 6, 0] = 9.0
    box = BBox.from_corners(8, 16, 72, 64)  # cells y 2..8, x 1..9
    out = roi_pool(cube_of(c), box, 3).data
    y0, x0, y1, x1 = box_to_region(box, 8, 10, 10)
    expected = oracles.bin_max_loop(c, y0, x0, y1, x1, 3)
    np.testing.assert_array_equal(out, expected)
    assert set(map(tuple, np.argwhere(out[..., 0] == 9))) == {
        (i, j) for i in range(3) for j in range(3) if expected[i, j, 0] == 9
    }
    assert (out == 9).sum() >= 1


def test_roi_pool_identity_crop():
    c = np.random.default_rng(0).normal(size=(10, 10, 2))
    out = roi_pool(cube_of(c), BBox.from_corners(16, 8, 56, 48), 5).data
    np.testing.assert_array_equal(out, c[1:6, 2:7])


@pytest.mark.parametrize("seed", range(5))
def test_region_pool_random_vs_bruteforce(seed):
    rng = np.random.default_rng(seed)
    c = rng.normal(size=(9, 7, 3))
    y0, x0 = rng.integers(0, 5), rng.integers(0, 4)
    y1, x1 = rng.integers(y0 + 1, 10), rng.integers(x0 + 1, 8)
    P = int(rng.integers(1, 6))
    out = region_max_pool(Tensor(c), np.array([[y0, x0, y1, x1]]), P).data[0]
    np.testing.assert_array_equal(out, oracles.bin_max_loop(c, y0, x0, y1, x1, P))


def test_degenerate_box_snaps_to_one_cell():
    assert box_to_region(BBox(20.5, 20.5, 0.1, 0.1), 8, 10, 10) == (2, 2, 3, 3)


def test_roi_pool_channel_permutation_equivariance():
    rng = np.random.default_rng(2)
    c = rng.normal(size=(8, 8, 5))
    perm = rng.permutation(5)
    box = BBox(30, 34, 33, 27)
    a = roi_pool(cube_of(c), box, 4).data
    b = roi_pool(cube_of(c[..., perm]), box, 4).data
    np.testing.assert_array_equal(b, a[..., perm])


def test_roi_pool_gradient_routes_to_argmax():
    c = np.zeros((4, 4, 1))
    c[1, 2, 0] = 5.0
    cube = FeatureCube(Tensor(c, requires_grad=True), 8)
    backward(T.sum(roi_pool(cube, BBox(16, 16, 32, 32), 1)))
    g = np.zeros((4, 4, 1))
    g[1, 2, 0] = 1.0
    np.testing.assert_array_equal(cube.data.grad, g)


@pytest.mark.parametrize("seed", range(3))
def test_roi_pool_grad_check(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(6, 6, 2)))
    boxes = [BBox(20, 24, 30, 20), BBox(10, 10, 12, 12)]
    assert grad_check(lambda x: T.sum(T.tanh(roi_pool(FeatureCube(x, 8), boxes, 3))), x) < 1e-4


# -- l2_normalize_scale ------------------------------------------------------


def test_l2norm_examples():
    ones = Tensor(np.ones((7, 7, 512)))
    out = l2_normalize_scale(ones, Tensor(np.ones(512))).data
    np.testing.assert_allclose(out, 1 / math.sqrt(25088), rtol=1e-14)
    x = Tensor(np.random.default_rng(0).normal(size=(3, 3, 4)))
    assert np.all(l2_normalize_scale(x, Tensor(np.zeros(4))).data == 0)
    assert abs(np.linalg.norm(l2_normalize_scale(x, Tensor(np.ones(4))).data) - 1) < 1e-6


def test_l2norm_zero_input_passes_zeros():
    x = Tensor(np.zeros((2, 2, 3)), requires_grad=True)
    g = Tensor(np.ones(3), requires_grad=True)
    y = l2_normalize_scale(x, g)
    assert np.all(y.data == 0)
    backward(T.sum(y))
    assert np.all(np.isfinite(x.grad))


def test_l2norm_batched_items_independent():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(3, 3, 2)), rng.normal(size=(3, 3, 2))
    g = Tensor(np.array([1.0, 2.0]))
    both = l2_normalize_scale(Tensor(np.stack([a, b])), g, batch_axes=1).data
    np.testing.assert_allclose(both[1], l2_normalize_scale(Tensor(b), g).data, rtol=1e-14)


# -- fuse_multiscale ---------------------------------------------------------


def test_fuse_averaging_kernel_returns_input():
    D = 4
    x = Tensor(np.random.default_rng(0).normal(size=(7, 7, D)))
    W = Tensor(np.hstack([np.eye(D) / 3] * 3))
    out = fuse_multiscale([x, x, x], W).data
    np.testing.assert_allclose(out, x.data, rtol=1e-14, atol=1e-15)


def test_fuse_concat_shape_full_scale_sizes():
    feats = [Tensor(np.zeros((7, 7, 512))) for _ in range(3)]
    assert T.concat(feats, axis=-1).shape == (7, 7, 1536)
    out = fuse_multiscale(feats, Tensor(np.zeros((512, 1536))))
    assert out.shape == (7, 7, 512)


def test_fuse_random_vs_loop():
    rng = np.random.default_rng(5)
    feats = [rng.normal(size=(2, 2, 3)) for _ in range(2)]
    W, b = rng.normal(size=(4, 6)), rng.normal(size=4)
    out = fuse_multiscale([Tensor(f) for f in feats], Tensor(W), Tensor(b)).data
    for y in range(2):
        for x in range(2):
            v = list(feats[0][y, x]) + list(feats[1][y, x])
            np.testing.assert_allclose(out[y, x], oracles.affine_loop(v, W.tolist(), list(b)), atol=1e-14)


def test_fuse_mismatched_shapes():
    with pytest.raises(ValueError, match="differ"):
        fuse_multiscale([Tensor(np.zeros((7, 7, 2))), Tensor(np.zeros((6, 6, 2)))], Tensor(np.zeros((2, 4))))


def test_fuse_no_dead_branch():
    x = [Tensor(np.ones((3, 3, 2)), requires_grad=True) for _ in range(3)]
    W = Tensor(np.random.default_rng(0).normal(size=(2, 6)))
    backward(T.sum(fuse_multiscale(x, W)))
    for t in x:
        assert np.any(t.grad != 0)


# -- local_feature -----------------------------------------------------------


def small_local(scales=(0.8, 1.2, 1.8), seed=0):
    cfg = LocalContextConfig(scales=scales, pool_size=3, fc_dims=(6, 5), init_stddev=0.3)
    return cfg, init_local(cfg, 4, np.random.default_rng(seed), np.float64)


def test_config_validation():
    with pytest.raises(ValueError):
        LocalContextConfig(scales=(1.2, 0.8))
    with pytest.raises(ValueError):
        LocalContextConfig(scales=())
    with pytest.raises(ValueError):
        LocalContextConfig(pool_size=0)


def test_local_feature_shape_and_count():
    cfg, params = small_local()
    cube = cube_of(np.random.default_rng(0).uniform(size=(8, 8, 4)))
    f = local_feature(cube, [BBox(30, 30, 20, 20), BBox(40, 20, 10, 14)], cfg, params, 64, 64)
    assert f.F_L.shape == (2, 5)
    assert len(f.pooled) == 3


def test_removing_largest_scale_changes_output():
    c = np.zeros((8, 8, 4))
    c[3:5, 3:5] = 1.0
    c[0, :] = 5.0  # only the widest crop reaches row 0
    box = BBox(32, 32, 16, 16)
    cfg3, params = small_local(seed=1)
    a = local_feature(cube_of(c), box, cfg3, params, 64, 64).F_L.data
    cfg2 = LocalContextConfig(scales=(0.8, 1.2), pool_size=3, fc_dims=(6, 5))
    p2 = dict(params)
    p2["local.reduce.weight"] = Tensor(params["local.reduce.weight"].data[:, :8])
    b = local_feature(cube_of(c), box, cfg2, p2, 64, 64).F_L.data
    assert not np.allclose(a, b)


def test_locality_bound():
    rng = np.random.default_rng(3)
    box = BBox(32, 32, 16, 16)
    cfg, params = small_local(seed=2)
    # the 1.8x box spans pixels 17.6..46.4 -> cells 2..5
    base = np.full((8, 8, 4), 0.7)
    other = base.copy()
    mask = np.ones((8, 8), bool)
    mask[2:6, 2:6] = False
    other[mask] = rng.normal(size=(mask.sum(), 4))
    a = local_feature(cube_of(base), box, cfg, params, 64, 64).F_L.data
    b = local_feature(cube_of(other), box, cfg, params, 64, 64).F_L.data
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("seed", range(3))
def test_local_feature_gradients(seed):
    cfg, params = small_local(seed=seed)
    cube = Tensor(np.random.default_rng(seed).uniform(size=(6, 6, 4)))
    boxes = [BBox(24, 24, 20, 16)]

    def f(cube_t, gamma, W):
        p = dict(params, **{"local.gamma1": gamma, "local.reduce.weight": W})
        return T.sum(local_feature(FeatureCube(cube_t, 8), boxes, cfg, p, 48, 48).F_L)

    assert grad_check(f, cube, params["local.gamma1"], params["local.reduce.weight"]) < 1e-4


def test_calibrate_norm_scale_sets_mean_amplitude():
    cfg, params = small_local()
    c = cube_of(np.random.default_rng(0).uniform(size=(8, 8, 4)))
    boxes = [BBox(30, 30, 20, 20), BBox(20, 40, 16, 10)]
    vals = calibrate_norm_scale(params, cfg, [(c, boxes, 64, 64)], n_proposals=100)
    for i, lam in enumerate(cfg.scales):
        p = roi_pool(c, [scale_box(b, lam, 64, 64) for b in boxes], 3).data
        expect = np.mean([np.linalg.norm(p[k]) for k in range(2)])
        assert vals[i] == pytest.approx(expect, rel=1e-12)
        assert np.all(params[f"local.gamma{i}"].data == vals[i])
