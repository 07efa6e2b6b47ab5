"""Two contrasts between Jacobian rank and the intrinsic dimension of a map.

The x-cross map sends each point to the diagonal of its quadrant: its
Jacobian has rank 1 everywhere it exists, yet it is the identity on the
diagonals, so no width-1 bottleneck can represent it. A kernel ridge
predictor fit to rank-2 data, in the other direction, has a full-rank
Jacobian at generic points.
"""
import numpy as np

from rankscope import baselines as bl
from rankscope import datagen as dg
from rankscope import rank as rk

f = dg.xcross_fixture()
probes = np.random.default_rng(0).uniform(-2, 2, (2, 1000))
print("x-cross Jacobian rank over 1000 probes:", rk.jacobian_rank(f, probes)[0])
t = np.linspace(-1, 1, 5)
print("on the diagonal  :", f(np.vstack([t, t]))[1])
print("just off an axis :", f(np.array([[1.0, 1.0], [1e-9, -1e-9]])).T.tolist())

ds = dg.synth_lowrank(6, 4, 4, 2, 100, seed=0, noise=1e-3)
model = bl.krr_fit(ds.X, ds.Y)
probes = rk.default_probes((ds.X.min(axis=1), ds.X.max(axis=1)), ds.X, n=200)
print("KRR Jacobian rank on rank-2 data:", bl.krr_rank(model, probes), "(true rank 2)")
