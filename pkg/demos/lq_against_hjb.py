"""
A linear-quadratic problem on an action grid
============================================

``dX = a dt + 0.5 dW`` with actions on a five-point grid, running cost
``x² + 0.5 a²`` and a quadratic terminal cost.  The finite-difference HJB
solution is the reference; the penalized backward equation approaches it
from below as the penalty grows.
"""

import numpy as np

from randcontrol.bsde import solve_constrained
from randcontrol.oracles import fd_value, hjb_fd_solve, FdGrid, lqgrid_spec

spec = lqgrid_spec()
v, grid_err = fd_value(spec, (-5.0, 5.0), 401)
print(f"HJB value {v:.5f} (grid error {grid_err:.1e})")

# the optimal feedback is a saturated linear rule on the action grid
surface = hjb_fd_solve(spec, FdGrid(-5.0, 5.0, 201))
x = np.array([-1.5, -0.5, 0.0, 0.5, 1.5])
idx = np.searchsorted(surface.x, x)
for xi, a in zip(x, spec.space.marks[surface.policy[0, idx]]):
    print(f"optimal action at t=0, x={xi:+.1f}: {a:+.1f}")

sol, report = solve_constrained(spec, (1, 4, 16, 64), stop_tol=0, n_paths=20_000)
for n, y, se in zip(report.n_values, report.Y0, report.se):
    print(f"n={n:4g}  Y0={y:+.4f} +- {se:.4f}")
