"""The original control problem: gains, the Krylov distance between
controls, and brute-force values over simple feedback controls."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .point_process import RHO_DISCRETE
from .rng import PathStreams, TimeGrid, brownian_increments
from .sde import _simulate, euler_step, running_reward, simulate_ensemble, terminal_reward
from .stats import Estimate, estimate

__all__ = [
    "SimpleControl",
    "ControlMetricReport",
    "BruteForceResult",
    "gain",
    "control_distance",
    "value_brute_force",
]


@dataclass
class SimpleControl:
    """Piecewise-constant feedback control.

    On ``[t_k, t_{k+1})`` the action is ``actions[table[k, b]]`` where ``b``
    is the bin of the first state coordinate among ``bin_edges`` (interior
    edges, so there are ``len(bin_edges) + 1`` bins).
    """

    subdivision: np.ndarray
    table: np.ndarray  # (N, n_bins) indices into ``actions``
    actions: np.ndarray
    bin_edges: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.subdivision = np.asarray(self.subdivision, dtype=float)
        self.actions = np.asarray(self.actions, dtype=float)
        self.bin_edges = np.asarray(self.bin_edges, dtype=float)
        self.table = np.atleast_2d(np.asarray(self.table, dtype=np.int64))
        N = self.subdivision.size - 1
        if N < 1 or np.any(np.diff(self.subdivision) <= 0) or self.subdivision[0] != 0.0:
            raise ValueError("subdivision must be 0 = t_0 < ... < t_N with N >= 1")
        if self.table.shape != (N, self.bin_edges.size + 1):
            raise ValueError(f"table must have shape ({N}, {self.bin_edges.size + 1})")
        if np.any(self.table < 0) or np.any(self.table >= self.actions.size):
            raise ValueError("table refers to an action outside the action grid")

    @classmethod
    def constant(cls, action, horizon, actions=None):
        actions = np.atleast_1d(action if actions is None else actions).astype(float)
        j = int(np.flatnonzero(actions == action)[0])
        return cls([0.0, horizon], [[j]], actions)

    @property
    def n_pieces(self):
        return self.subdivision.size - 1

    def __call__(self, t, x):
        k = int(np.clip(np.searchsorted(self.subdivision, t, side="right") - 1, 0, self.n_pieces - 1))
        b = np.searchsorted(self.bin_edges, np.atleast_2d(x)[:, 0], side="right")
        return self.actions[self.table[k, b]]

    def bind(self, spec, grid):
        missing = set(np.round(self.actions, 12)) - set(np.round(spec.space.marks, 12))
        if missing:
            raise ValueError(f"actions {sorted(missing)} are not in the action space")
        pts = grid.points
        return lambda i, t, x: self(pts[i], x)

    def policy_id(self):
        return "-".join("".join(str(v) for v in row) for row in self.table)


@dataclass(frozen=True)
class ControlMetricReport:
    rho_tilde: float
    standard_error: float

    def __iter__(self):
        return iter((self.rho_tilde, self.standard_error))


@dataclass
class BruteForceResult:
    value: Estimate
    policy: SimpleControl
    evaluated: list  # (policy_id, Estimate)
    mode: str

    def __iter__(self):
        return iter((self.value, self.policy))


def gain(spec, control, n_paths=100_000, seed=0, grid=None, n_steps=100, first_index=0):
    """Monte-Carlo ``J(α) = E[∫ f dt + g(X_T)]`` (left-endpoint quadrature)."""
    grid = grid or spec.grid(n_steps)
    ens = simulate_ensemble(spec, control, grid, n_paths, seed, first_index)
    return estimate(ens.payoff)


def _metric(a, b):
    return RHO_DISCRETE * (np.asarray(a) != np.asarray(b))


def control_distance(alpha1, alpha2, spec, n_paths=10_000, seed=0, grid=None, n_steps=100, metric=None):
    """``E ∫_0^T ρ(α¹_t, α²_t) dt`` along common Brownian paths.

    Each control drives its own state; both see the same increments, so the
    action processes are compared as functionals of one Brownian path.
    """
    grid = grid or spec.grid(n_steps)
    metric = metric or _metric
    if spec.deterministic:
        n_paths = 1 if n_paths else 0
    streams = PathStreams(seed, max(n_paths, 1))
    noise = (lambda i: None) if spec.deterministic else (lambda i: brownian_increments(grid, spec.dim_w, streams, step=i))
    P = max(n_paths, 1)
    e1 = _simulate(spec, alpha1, grid, P, noise, True)
    e2 = _simulate(spec, alpha2, grid, P, noise, True)
    d = np.sum(metric(e1.actions, e2.actions), axis=1) * grid.dt
    est = estimate(d)
    return ControlMetricReport(est.value, est.se)


def _enumerate(spec, grid, actions, subdivision, bin_edges, n_paths, seed, cap):
    N = subdivision.size - 1
    B = bin_edges.size + 1
    size = actions.size ** (N * B)
    if size > cap:
        raise ValueError(
            f"search space |actions|^(N*bins) = {size} exceeds the cap {cap}; enable backward mode"
        )
    evaluated = []
    best = None
    for combo in itertools.product(range(actions.size), repeat=N * B):
        pol = SimpleControl(subdivision, np.array(combo).reshape(N, B), actions, bin_edges)
        est = gain(spec, pol, n_paths, seed, grid)
        evaluated.append((pol.policy_id(), est))
        if best is None or est.value > best[0].value:
            best = (est, pol)
    return BruteForceResult(best[0], best[1], evaluated, "enumerate")


def _backward(spec, grid, actions, subdivision, bin_edges, n_paths, seed, n_start, state_range, final_paths):
    """Piece-by-piece dynamic programming over binned states.

    For piece ``k`` (last to first) and every bin, ``n_start`` states drawn
    uniformly in the bin are propagated with each candidate action on piece
    ``k`` and the already-chosen policy afterwards; the bin takes the action
    with the largest mean gain-to-go.  Piece 0 starts from ``x0``.
    """
    N = subdivision.size - 1
    B = bin_edges.size + 1
    lo, hi = state_range
    edges = np.concatenate([[lo], bin_edges, [hi]])
    table = np.zeros((N, B), dtype=np.int64)
    pts = grid.points
    kidx = [int(np.argmin(np.abs(pts - s))) for s in subdivision]
    if any(abs(pts[k] - s) > 1e-9 for k, s in zip(kidx, subdivision)):
        raise ValueError("backward mode needs subdivision points on the simulation grid")
    m = actions.size
    evaluated = []
    for k in range(N - 1, -1, -1):
        i0 = kidx[k]
        if k == 0:
            starts = np.tile(spec.x0, (n_start, 1))
            bins = np.zeros(n_start, dtype=np.int64)
            bins[:] = np.searchsorted(bin_edges, spec.x0[0], side="right")
            active = [int(bins[0])]
        else:
            u = (np.arange(n_start) + 0.5) / n_start
            starts = np.concatenate([edges[b] + (edges[b + 1] - edges[b]) * u for b in range(B)])[:, None]
            starts = np.repeat(starts, spec.dim_x, axis=1) if spec.dim_x > 1 else starts
            bins = np.repeat(np.arange(B), n_start)
            active = list(range(B))
        S = starts.shape[0]
        # every start state with every candidate action
        x_init = np.repeat(starts, m, axis=0)
        a_first = np.tile(np.arange(m), S)
        later = table.copy()

        def control(i, t, x, _k=k, _later=later, _a=a_first):
            if i < kidx[_k + 1]:
                return actions[_a]
            piece = int(np.searchsorted(subdivision, pts[i], side="right") - 1)
            piece = min(piece, N - 1)
            b = np.searchsorted(bin_edges, x[:, 0], side="right")
            return actions[_later[piece, b]]

        sub = TimeGrid(pts[i0], grid.t_end, grid.n_steps - i0)
        vals = _rollout(spec, sub, x_init, control, i0, seed + 7919 * (k + 1), repeat=m)
        vals = vals.reshape(S, m)
        for b in active:
            rows = bins == b
            means = vals[rows].mean(axis=0)
            table[k, b] = int(np.argmax(means))
    policy = SimpleControl(subdivision, table, actions, bin_edges)
    value = gain(spec, policy, final_paths, seed, grid)
    evaluated.append((policy.policy_id(), value))
    return BruteForceResult(value, policy, evaluated, "backward")


def _rollout(spec, sub, x_init, control, offset, seed, repeat=1):
    """Payoff-to-go from the states ``x_init`` at time ``sub.t_start``.

    Consecutive groups of ``repeat`` rows share their Brownian increments,
    so candidate actions from one start state are compared on common noise.
    """
    P = x_init.shape[0]
    streams = PathStreams(seed, P // repeat)
    pts, dt = sub.points, sub.dt
    x = x_init.astype(float).copy()
    running = np.zeros(P)
    for i in range(sub.n_steps):
        a = np.asarray(control(i + offset, pts[i], x), dtype=float)
        running += running_reward(spec, pts[i], x, a) * dt
        dw = None if spec.deterministic else np.repeat(brownian_increments(sub, spec.dim_w, streams, step=i), repeat, axis=0)
        x = euler_step(spec, pts[i], x, a, dw, dt)
    return running + terminal_reward(spec, x)


def value_brute_force(
    spec,
    subdivision_steps,
    action_grid=None,
    state_bins=None,
    n_paths=100_000,
    seed=0,
    grid=None,
    n_steps=100,
    cap=4096,
    backward=False,
    n_start=2_000,
    state_range=None,
):
    """Best gain over simple feedback controls.

    Parameters
    ----------
    subdivision_steps : int
        Number ``N`` of equal pieces of ``[0, T]``.
    action_grid : array, optional
        Candidate actions (default: the action space marks).
    state_bins : array, optional
        Interior bin edges for the first state coordinate (default: none).
    cap : int
        Largest search space enumerated exhaustively.
    backward : bool
        Use piecewise dynamic programming instead of enumeration; the
        returned value is the gain of the selected policy on ``n_paths``
        fresh paths.
    """
    grid = grid or spec.grid(n_steps)
    actions = spec.space.marks if action_grid is None else np.asarray(action_grid, dtype=float)
    bin_edges = np.zeros(0) if state_bins is None else np.asarray(state_bins, dtype=float)
    subdivision = np.linspace(0.0, spec.horizon, int(subdivision_steps) + 1)
    if backward:
        if state_range is None:
            if bin_edges.size > 1:
                w = float(np.min(np.diff(bin_edges)))
                state_range = (bin_edges[0] - w, bin_edges[-1] + w)
            else:
                x0 = float(spec.x0[0])
                state_range = (x0 - 1.0, x0 + 1.0)
        return _backward(spec, grid, actions, subdivision, bin_edges, n_paths, seed, n_start, state_range, n_paths)
    return _enumerate(spec, grid, actions, subdivision, bin_edges, n_paths, seed, cap)
