"""
Randomizing a control with a marked point process
=================================================

A Poisson process on a two-point action space, reweighted to a new
intensity in two ways: by a likelihood ratio on the original paths, and
by re-timing the events themselves.
"""

import numpy as np

from randcontrol.point_process import (
    ActionSpace,
    IntensityField,
    girsanov_weights,
    sample_poisson_ensemble,
)
from randcontrol.randomized import simulate_randomized
from randcontrol.oracles import constant_spec
from randcontrol.rng import TimeGrid

space = ActionSpace.finite([-1.0, 1.0], [1.0, 1.0], -1.0)
grid = TimeGrid.uniform(1.0, 50)

# base measure: events at rate 2, marks chosen uniformly
base = sample_poisson_ensemble(space, 1.0, 50_000, seed=0)
print("mean number of events under the base measure:", base.counts().mean())

# an intensity that makes switching away from the current action likelier
nu = IntensityField.pointwise(lambda t, x, i, a: np.where(a == i, 0.5, 1.5), 2, 0.5, 1.5)

# 1) likelihood ratio: same paths, new weights with mean one
w = girsanov_weights(base, nu, grid)
print("mean weight:", w.mean(), " weighted mean count:", np.mean(w * base.counts()))

# 2) time change: the paths themselves follow the new intensity
spec = constant_spec(marks=(-1.0, 1.0), weights=(1.0, 1.0))
changed = simulate_randomized(spec, grid, 50_000, 1, nu, mode="direct", record_events=True).events
print("mean count of the time-changed paths:", changed.counts().mean())

# both routes describe the same law, e.g. the share of first marks that switch
_, marks = base.first_events(1)
switch = (marks[:, 0] == 1).astype(float)
_, marks2 = changed.first_events(1)
print("P(first event switches): weighted", np.mean(w * switch), " time-changed", np.mean(marks2[:, 0] == 1))
