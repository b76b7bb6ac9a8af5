"""
Recurrent attention over a feature cube
=======================================

Pool a random cube to a K x K grid, run the attention LSTM for T steps,
and print where each location map puts its mass.
"""

import numpy as np

from accnn.backbone import FeatureCube
from accnn.global_attention import GlobalConfig, global_feature, init_global
from accnn.tensor import Tensor

rng = np.random.default_rng(1)
cfg = GlobalConfig(K=4, T=3, d=8, layers=2, fc_dims=(16, 16), init_stddev=0.3)
params = init_global(cfg, depth=6, rng=rng, dtype=np.float64)

# a cube with one bright corner; untrained weights need not find it
data = rng.normal(size=(16, 16, 6)) * 0.1
data[:4, :4] += 2.0
cube = FeatureCube(Tensor(data, dtype=np.float64), stride=8)

F_G, maps = global_feature(cube, cfg, params)
print("F_G shape", F_G.shape, " maps produced", len(maps))
for t, m in enumerate(maps):
    grid = m.data.reshape(cfg.K, cfg.K)
    print("step %d  sum %.6f  max cell %s" % (t, grid.sum(), tuple(int(v) for v in np.unravel_index(grid.argmax(), grid.shape))))
