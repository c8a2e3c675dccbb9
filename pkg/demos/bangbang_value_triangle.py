"""
Three routes to the value of a bang-bang problem
================================================

Steer ``dX = a dt`` with ``a = ±1`` to end close to the origin; the reward
is ``-|X_T|`` and the value is ``-(|x0| - T)^+``.  We compare a brute-force
search over step controls, the best randomized intensity and the
penalized backward equation.
"""

import numpy as np

from randcontrol.bsde import RegressionBasis, solve_constrained
from randcontrol.control import value_brute_force
from randcontrol.oracles import bangbang_closed_form, bangbang_family, bangbang_spec
from randcontrol.randomized import optimize_intensity

x0 = 0.5
spec = bangbang_spec(x0=x0)
print("closed form:", bangbang_closed_form(x0, 0.0, 1.0))

brute = value_brute_force(spec, 4, n_paths=1)  # deterministic dynamics: one path suffices
print("brute force over 4-piece controls:", brute.value.value, "policy", brute.policy.policy_id())

search = optimize_intensity(spec, bangbang_family(spec.space), budget=20, n_paths=10_000, estimator="direct")
print("randomized value:", search.value.value, "+-", search.value.se, "theta", search.theta)

# the penalized values increase towards the value as the penalty grows
sol, report = solve_constrained(spec, (1, 4, 16, 64), stop_tol=0, basis=RegressionBasis("hat"), n_paths=20_000)
for n, y, g in zip(report.n_values, report.Y0, report.G_n):
    print(f"n={n:4g}  Y0={y:+.4f}  constraint violation {g:.4f}")
