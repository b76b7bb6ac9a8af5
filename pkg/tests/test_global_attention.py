import math

import numpy as np
import pytest

from accnn import tensor as T
from accnn.backbone import FeatureCube
from accnn.global_attention import (
    AttentionState,
    GlobalConfig,
    adaptive_pool_cube,
    average_pool_global,
    global_feature,
    init_global,
    init_state,
    location_softmax,
    lstm_step,
    reported_map,
)
from accnn.tensor import Tensor, attend, backward, grad_check

import oracles


def t(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def cube_of(a):
    return FeatureCube(t(a), 8)


def small(K=2, D=3, d=2, T_=2, layers=2, seed=0, std=0.5):
    cfg = GlobalConfig(K=K, T=T_, d=d, layers=layers, fc_dims=(4, 3), init_stddev=std)
    return cfg, init_global(cfg, D, np.random.default_rng(seed), np.float64)


def lstm_params(W, b):
    return {"global.lstm0.weight": t(W), "global.lstm0.bias": t(b)}


# -- config / params ---------------------------------------------------------


def test_config_validation():
    for bad in (dict(K=0), dict(T=0), dict(layers=0), dict(mode="max"), dict(map_source="x")):
        with pytest.raises(ValueError):
            GlobalConfig(**bad)


def test_param_shapes():
    cfg, p = small(K=3, D=5, d=4, layers=3)
    assert p["global.lstm0.weight"].shape == (16, 4 + 5)
    assert p["global.lstm1.weight"].shape == (16, 8)
    assert p["global.loc.weight"].shape == (9, 4)
    assert p["global.init_c2.fc0.weight"].shape == (4, 5)
    avg = init_global(GlobalConfig(mode="average", fc_dims=(4, 3)), 5, np.random.default_rng(0))
    assert set(avg) == {"global.fc0.weight", "global.fc0.bias", "global.fc1.weight", "global.fc1.bias"}


# -- adaptive pooling --------------------------------------------------------


def test_adaptive_pool_constant_and_identity():
    out = adaptive_pool_cube(t(np.full((6, 5, 2), 1.5)), 3).data
    assert out.shape == (3, 3, 2) and np.all(out == 1.5)
    c = np.random.default_rng(0).normal(size=(4, 4, 3))
    np.testing.assert_array_equal(adaptive_pool_cube(t(c), 4).data, c)


def test_adaptive_pool_vs_bruteforce():
    c = np.random.default_rng(1).normal(size=(5, 5, 2))
    np.testing.assert_array_equal(adaptive_pool_cube(cube_of(c), 2).data, oracles.bin_max_loop(c, 0, 0, 5, 5, 2))


# -- lstm_step ---------------------------------------------------------------


def test_lstm_zero_weights_give_zero_state():
    p = lstm_params(np.zeros((8, 4)), np.zeros(8))
    s = lstm_step(t([0.3, -2.0]), AttentionState([t(np.zeros(2))], [t(np.zeros(2))]), p)
    assert s.c[0].data.tolist() == [0.0, 0.0]
    assert s.h[0].data.tolist() == [0.0, 0.0]


def test_lstm_forced_memory_passthrough():
    b = np.zeros(8)
    b[0:2] = -40.0  # i gate shut
    b[2:4] = 40.0  # f gate open
    p = lstm_params(np.zeros((8, 4)), b)
    c_prev = np.array([0.7, -1.3])
    s = lstm_step(t([1.0, 2.0]), AttentionState([t([0.2, 0.1])], [t(c_prev)]), p)
    np.testing.assert_allclose(s.c[0].data, c_prev, atol=1e-6)


def test_lstm_hand_case_weights_point_one():
    W, b = np.full((8, 4), 0.1), np.zeros(8)
    s = lstm_step(t([1.0, 0.0]), AttentionState([t(np.zeros(2))], [t(np.zeros(2))]), lstm_params(W, b))
    # every preactivation is 0.1
    i = f = o = 1 / (1 + math.exp(-0.1))
    g = math.tanh(0.1)
    c = i * g
    assert f * 0.0 + c == pytest.approx(c)
    np.testing.assert_allclose(s.c[0].data, [c, c], rtol=0, atol=1e-12)
    np.testing.assert_allclose(s.h[0].data, [o * math.tanh(c)] * 2, rtol=0, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_lstm_two_layer_vs_loop(seed):
    rng = np.random.default_rng(seed)
    d, D = 2, 3
    W0, b0 = rng.normal(size=(4 * d, d + D)), rng.normal(size=4 * d)
    W1, b1 = rng.normal(size=(4 * d, 2 * d)), rng.normal(size=4 * d)
    h0, c0, h1, c1, x = (rng.normal(size=n) for n in (d, d, d, d, D))
    p = {"global.lstm0.weight": t(W0), "global.lstm0.bias": t(b0), "global.lstm1.weight": t(W1), "global.lstm1.bias": t(b1)}
    s = lstm_step(t(x), AttentionState([t(h0), t(h1)], [t(c0), t(c1)]), p)
    eh0, ec0 = oracles.lstm_layer_loop(W0.tolist(), b0, h0, c0, x)
    eh1, ec1 = oracles.lstm_layer_loop(W1.tolist(), b1, h1, c1, eh0)
    for got, exp in ((s.h[0], eh0), (s.c[0], ec0), (s.h[1], eh1), (s.c[1], ec1)):
        np.testing.assert_allclose(got.data, exp, rtol=0, atol=1e-12)


def test_lstm_dimension_mismatch():
    p = lstm_params(np.zeros((8, 4)), np.zeros(8))
    with pytest.raises(ValueError, match="input dim"):
        lstm_step(t([1.0, 2.0, 3.0]), AttentionState([t(np.zeros(2))], [t(np.zeros(2))]), p)


# -- location softmax / attend -----------------------------------------------


def test_location_softmax_uniform_cases():
    np.testing.assert_array_equal(location_softmax(t([0.4, -1.0]), t(np.zeros((9, 2)))).data, np.full(9, 1 / 9))
    W = np.random.default_rng(0).normal(size=(4, 3))
    np.testing.assert_array_equal(location_softmax(t(np.zeros(3)), t(W)).data, np.full(4, 0.25))


def test_location_softmax_vs_naive():
    rng = np.random.default_rng(1)
    W, h = rng.normal(size=(4, 3)) * 0.5, rng.normal(size=3)
    logits = oracles.affine_loop(list(h), W.tolist(), [0.0] * 4)
    np.testing.assert_allclose(location_softmax(t(h), t(W)).data, oracles.softmax_naive(logits), rtol=1e-13)


def test_attend_examples():
    X = np.random.default_rng(0).normal(size=(4, 3))
    for i in range(4):
        assert attend(t(X), t(np.eye(4)[i])).data.tobytes() == X[i].tobytes()
    np.testing.assert_allclose(attend(t(X), t(np.full(4, 0.25))).data, X.mean(axis=0), rtol=0, atol=1e-12)
    l = np.random.default_rng(1).dirichlet(np.ones(4))
    loop = [sum(l[i] * X[i, k] for i in range(4)) for k in range(3)]
    np.testing.assert_allclose(attend(t(X), t(l)).data, loop, rtol=0, atol=1e-14)


def test_attend_rejects_unnormalized_map():
    with pytest.raises(ValueError):
        attend(t(np.ones((2, 3))), t([0.6, 0.6]))
    with pytest.raises(ValueError):
        attend(t(np.ones((2, 3))), t([1.2, -0.2]))


# -- init_state --------------------------------------------------------------


def test_init_state_zero_mlps():
    cfg, p = small()
    for k, v in p.items():
        if "init_" in k:
            v.data[...] = 0
    s = init_state(t(np.random.default_rng(0).normal(size=(4, 3))), p)
    for h, c in zip(s.h, s.c):
        assert np.all(h.data == 0) and np.all(c.data == 0)
    np.testing.assert_array_equal(s.l.data, np.full(4, 0.25))


def test_init_state_vs_loop():
    cfg, p = small(seed=3)
    X = np.random.default_rng(4).normal(size=(4, 3))
    s = init_state(t(X), p)
    m = [sum(X[i, k] for i in range(4)) / 4 for k in range(3)]

    def mlp(prefix, out_tanh):
        w = lambda n: p[f"{prefix}.{n}"].data  # noqa: E731
        hidden = [math.tanh(v) for v in oracles.affine_loop(m, w("fc0.weight").tolist(), w("fc0.bias"))]
        out = oracles.affine_loop(hidden, w("fc1.weight").tolist(), w("fc1.bias"))
        return [math.tanh(v) for v in out] if out_tanh else out

    for k in range(2):
        np.testing.assert_allclose(s.c[k].data, mlp(f"global.init_c{k}", False), atol=1e-13)
        np.testing.assert_allclose(s.h[k].data, mlp(f"global.init_h{k}", True), atol=1e-13)


# -- global_feature ----------------------------------------------------------


def scripted_global(cube, cfg, p):
    """Sequential pure-python evaluation of the whole attention pipeline."""
    K, D = cfg.K, cube.shape[2]
    grid = oracles.bin_max_loop(cube, 0, 0, cube.shape[0], cube.shape[1], K).reshape(K * K, D)
    X = grid.tolist()
    m = [sum(row[k] for row in X) / (K * K) for k in range(D)]
    g = lambda n: p[n].data  # noqa: E731

    def mlp(prefix, out_tanh):
        hid = [math.tanh(v) for v in oracles.affine_loop(m, g(prefix + ".fc0.weight").tolist(), g(prefix + ".fc0.bias"))]
        out = oracles.affine_loop(hid, g(prefix + ".fc1.weight").tolist(), g(prefix + ".fc1.bias"))
        return [math.tanh(v) for v in out] if out_tanh else out

    hs = [mlp(f"global.init_h{k}", True) for k in range(cfg.layers)]
    cs = [mlp(f"global.init_c{k}", False) for k in range(cfg.layers)]
    loc = lambda h: oracles.softmax_naive(oracles.affine_loop(h, g("global.loc.weight").tolist(), [0.0] * K * K))  # noqa: E731
    att = lambda l: [sum(l[i] * X[i][k] for i in range(K * K)) for k in range(D)]  # noqa: E731
    l = loc(hs[-1])
    maps = [l]
    for _ in range(cfg.T):
        inp = att(l)
        for k in range(cfg.layers):
            hs[k], cs[k] = oracles.lstm_layer_loop(g(f"global.lstm{k}.weight").tolist(), g(f"global.lstm{k}.bias"), hs[k], cs[k], inp)
            inp = hs[k]
        l = loc(hs[-1])
        maps.append(l)
    x = att(l)
    for k in range(2):
        x = [max(0.0, v) for v in oracles.affine_loop(x, g(f"global.fc{k}.weight").tolist(), g(f"global.fc{k}.bias"))]
    return x, maps


def test_global_feature_vs_scripted_oracle():
    cfg, p = small(K=2, D=3, d=2, T_=2, layers=2, seed=7, std=0.8)
    cube = np.random.default_rng(8).normal(size=(5, 4, 3))
    F_G, maps = global_feature(cube_of(cube), cfg, p)
    eF, emaps = scripted_global(cube, cfg, p)
    assert len(maps) == cfg.T + 1
    np.testing.assert_allclose(F_G.data, eF, rtol=0, atol=1e-12)
    for got, exp in zip(maps, emaps):
        np.testing.assert_allclose(got.data, exp, rtol=0, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_maps_on_simplex(seed):
    cfg, p = small(K=3, D=4, d=3, T_=4, seed=seed, std=2.0)
    _, maps = global_feature(cube_of(np.random.default_rng(seed).normal(size=(6, 6, 4))), cfg, p)
    for m in maps:
        assert np.all(m.data >= 0) and abs(m.data.sum() - 1) <= 1e-6


def test_uniform_maps_equal_average_mode_exactly():
    cfg, p = small(T_=1, seed=2)
    p["global.loc.weight"].data[...] = 0
    cube = cube_of(np.random.default_rng(3).normal(size=(4, 4, 3)))
    F_att, maps = global_feature(cube, cfg, p)
    F_avg = average_pool_global(cube, cfg, p)
    assert F_att.data.tobytes() == F_avg.data.tobytes()
    assert all(np.all(m.data == 0.25) for m in maps)


def test_average_mode_constant_cube():
    cfg, p = small()
    v = np.array([0.5, -1.0, 2.0])
    F = average_pool_global(cube_of(np.tile(v, (4, 4, 1))), cfg, p).data
    x = v
    for k in range(2):
        x = np.maximum(p[f"global.fc{k}.weight"].data @ x + p[f"global.fc{k}.bias"].data, 0)
    np.testing.assert_allclose(F, x, rtol=1e-14)


def test_trained_location_weights_break_average_equivalence():
    cfg, p = small(K=2, D=3, d=2, T_=1, seed=4, std=0.6)
    p["global.loc.weight"].data[...] = 0
    cube = cube_of(np.random.default_rng(5).normal(size=(4, 4, 3)) * 2)
    W = p["global.loc.weight"]
    for _ in range(50):
        W.zero_grad()
        F, _ = global_feature(cube, cfg, p)
        backward(T.sum(F * F))
        W.data -= 0.5 * W.grad
    assert np.any(W.data != 0)
    diff = global_feature(cube, cfg, p)[0].data - average_pool_global(cube, cfg, p).data
    assert np.abs(diff).max() > 1e-4


def test_slice_permutation_equivariance():
    cfg, p = small(K=2, D=3, d=2, T_=1, seed=6, std=1.0)
    h = t(np.random.default_rng(0).normal(size=2))
    X = np.random.default_rng(1).normal(size=(4, 3))
    perm = np.array([2, 0, 3, 1])
    W = p["global.loc.weight"].data
    l = location_softmax(h, t(W)).data
    lp = location_softmax(h, t(W[perm])).data
    np.testing.assert_allclose(lp, l[perm], rtol=1e-14)
    np.testing.assert_allclose(attend(t(X[perm]), t(lp)).data, attend(t(X), t(l)).data, atol=1e-14)


def test_reported_map_sources():
    maps = [t([0.5, 0.5]), t([1.0, 0.0])]
    assert reported_map(maps, GlobalConfig()).tolist() == [1.0, 0.0]
    assert reported_map(maps, GlobalConfig(map_source="mean")).tolist() == [0.75, 0.25]


@pytest.mark.parametrize("seed", range(3))
def test_global_gradients_fd(seed):
    cfg, p = small(K=2, D=3, d=2, T_=2, seed=seed, std=0.7)
    cube = cube_of(np.random.default_rng(seed + 10).normal(size=(4, 4, 3)))
    names = ["global.lstm0.weight", "global.lstm1.weight", "global.loc.weight", "global.init_h0.fc0.weight", "global.init_c1.fc1.weight"]

    def f(*ws):
        q = dict(p, **dict(zip(names, ws)))
        return T.sum(T.tanh(global_feature(cube, cfg, q)[0]))

    assert grad_check(f, *[p[n] for n in names]) < 1e-4
