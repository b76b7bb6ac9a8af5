"""Attention-based global context: stacked LSTM with a location softmax.

The cube is pooled to K x K x D; an LSTM stack, initialised from the mean
slice, repeatedly predicts a distribution over the K*K cells and reads the
expected slice under it.  The last map weights the global feature F_G.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import FeatureCube
from .pooling import region_max_pool
from .tensor import Tensor, attend, softmax

MODES = ("attention", "average")


@dataclass
class GlobalConfig:
    K: int = 8
    T: int = 3
    d: int | None = None  # hidden size; None means the cube depth
    layers: int = 3
    fc_dims: tuple[int, int] = (256, 256)
    mode: str = "attention"
    # None selects fan-in scaling (He for ReLU layers, 1/sqrt(fan_in) elsewhere); a float fixes the stddev
    init_stddev: float | None = None
    map_source: str = "final"  # or "mean": which map run_attend reports as *the* map

    def __post_init__(self):
        self.fc_dims = tuple(int(v) for v in self.fc_dims)
        if self.K < 1 or self.T < 1 or self.layers < 1:
            raise ValueError("K, T and layers must all be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.map_source not in ("final", "mean"):
            raise ValueError("map_source must be 'final' or 'mean'")

    def hidden(self, depth: int) -> int:
        return self.d or depth


@dataclass
class AttentionState:
    h: list[Tensor]
    c: list[Tensor]
    l: Tensor | None = None


def _gauss(rng, std, shape, dtype):
    return Tensor(rng.normal(0.0, std, shape), requires_grad=True, dtype=dtype)


def _zeros(n, dtype):
    return Tensor(np.zeros(n), requires_grad=True, dtype=dtype)


def init_global(cfg: GlobalConfig, depth: int, rng: np.random.Generator, dtype=np.float32) -> dict[str, Tensor]:
    def std(fan_in, gain=1.0):
        return cfg.init_stddev if cfg.init_stddev is not None else gain / np.sqrt(fan_in)

    params: dict[str, Tensor] = {}
    if cfg.mode == "attention":
        d = cfg.hidden(depth)
        for k in range(cfg.layers):
            in_dim = depth if k == 0 else d
            params[f"global.lstm{k}.weight"] = _gauss(rng, std(d + in_dim), (4 * d, d + in_dim), dtype)
            params[f"global.lstm{k}.bias"] = _zeros(4 * d, dtype)
            for which in ("c", "h"):
                params[f"global.init_{which}{k}.fc0.weight"] = _gauss(rng, std(depth), (d, depth), dtype)
                params[f"global.init_{which}{k}.fc0.bias"] = _zeros(d, dtype)
                params[f"global.init_{which}{k}.fc1.weight"] = _gauss(rng, std(d), (d, d), dtype)
                params[f"global.init_{which}{k}.fc1.bias"] = _zeros(d, dtype)
        params["global.loc.weight"] = _gauss(rng, std(d), (cfg.K * cfg.K, d), dtype)
    fan_in = depth
    for k, width in enumerate(cfg.fc_dims):
        params[f"global.fc{k}.weight"] = _gauss(rng, std(fan_in, np.sqrt(2.0)), (width, fan_in), dtype)
        params[f"global.fc{k}.bias"] = _zeros(width, dtype)
        fan_in = width
    return params


def adaptive_pool_cube(cube: FeatureCube | Tensor, K: int) -> Tensor:
    """Max-pool the whole cube into a K x K x D grid of near-equal bins."""
    data = cube.data if isinstance(cube, FeatureCube) else cube
    H, W, _ = data.shape
    return T.index(region_max_pool(data, np.array([[0, 0, H, W]]), K), 0)


def lstm_step(x_t: Tensor, state: AttentionState, params: dict[str, Tensor]) -> AttentionState:
    """Advance every layer one step; layer k > 0 reads layer k-1's new h."""
    inp = x_t
    hs, cs = [], []
    for k, (h_prev, c_prev) in enumerate(zip(state.h, state.c)):
        W = params[f"global.lstm{k}.weight"]
        d = h_prev.shape[0]
        if W.shape[1] != d + inp.shape[0]:
            raise ValueError(f"lstm layer {k}: input dim {inp.shape[0]} does not match weight {W.shape}")
        z = T.affine(T.concat([h_prev, inp]), W, params[f"global.lstm{k}.bias"])
        i = T.sigmoid(z[0:d])
        f = T.sigmoid(z[d : 2 * d])
        o = T.sigmoid(z[2 * d : 3 * d])
        g = T.tanh(z[3 * d : 4 * d])
        c = f * c_prev + i * g
        h = o * T.tanh(c)
        hs.append(h)
        cs.append(c)
        inp = h
    return AttentionState(hs, cs, state.l)


def location_softmax(h_top: Tensor, W_loc: Tensor) -> Tensor:
    """Distribution over the K*K cells from the top hidden state."""
    return softmax(T.affine(h_top, W_loc))


def _mlp(x: Tensor, params: dict[str, Tensor], prefix: str, out_act) -> Tensor:
    hidden = T.tanh(T.affine(x, params[f"{prefix}.fc0.weight"], params[f"{prefix}.fc0.bias"]))
    out = T.affine(hidden, params[f"{prefix}.fc1.weight"], params[f"{prefix}.fc1.bias"])
    return out_act(out) if out_act is not None else out


def init_state(X: Tensor, params: dict[str, Tensor]) -> AttentionState:
    """c_0 and h_0 per layer from MLPs of the mean slice; l_1 from the top h_0."""
    m = T.mean(X, axis=0)
    hs, cs = [], []
    k = 0
    while f"global.lstm{k}.weight" in params:
        cs.append(_mlp(m, params, f"global.init_c{k}", None))
        hs.append(_mlp(m, params, f"global.init_h{k}", T.tanh))
        k += 1
    if not hs:
        raise ValueError("no LSTM parameters found")
    l = location_softmax(hs[-1], params["global.loc.weight"])
    return AttentionState(hs, cs, l)


def _fc_head(x: Tensor, params: dict[str, Tensor]) -> Tensor:
    k = 0
    while f"global.fc{k}.weight" in params:
        x = T.relu(T.affine(x, params[f"global.fc{k}.weight"], params[f"global.fc{k}.bias"]))
        k += 1
    return x


def uniform_map(n: int, dtype) -> Tensor:
    return softmax(Tensor(np.zeros(n), dtype=dtype))


def global_feature(cube: FeatureCube, cfg: GlobalConfig, params: dict[str, Tensor]) -> tuple[Tensor, list[Tensor]]:
    """Return (F_G, maps).  Attention mode yields the T+1 maps l_1..l_{T+1}."""
    grid = adaptive_pool_cube(cube, cfg.K)
    X = T.reshape(grid, (cfg.K * cfg.K, grid.shape[2]))
    if cfg.mode == "average":
        l = uniform_map(cfg.K * cfg.K, X.dtype)
        return _fc_head(attend(X, l), params), [l]
    state = init_state(X, params)
    maps = [state.l]
    for _ in range(cfg.T):
        x_t = attend(X, state.l)
        state = lstm_step(x_t, state, params)
        state.l = location_softmax(state.h[-1], params["global.loc.weight"])
        maps.append(state.l)
    return _fc_head(attend(X, state.l), params), maps


def average_pool_global(cube: FeatureCube, cfg: GlobalConfig, params: dict[str, Tensor]) -> Tensor:
    """F_G from the uniformly weighted mean slice (average-pooling ablation)."""
    avg = GlobalConfig(K=cfg.K, T=cfg.T, d=cfg.d, layers=cfg.layers, fc_dims=cfg.fc_dims, mode="average")
    return global_feature(cube, avg, params)[0]


def reported_map(maps: list[Tensor], cfg: GlobalConfig) -> np.ndarray:
    """The single map exported as the attentive location map."""
    if cfg.map_source == "mean":
        return np.mean([m.data for m in maps], axis=0)
    return maps[-1].data
