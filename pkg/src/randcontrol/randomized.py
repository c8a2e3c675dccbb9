"""The randomized control problem.

The control is replaced by the pure-jump process ``I`` of a marked point
process.  Under the base measure ``I`` jumps according to a Poisson process
with intensity ``λ(da)``; an intensity field ``ν`` changes the compensator to
``ν λ(da) dt``.  The randomized gain of ``ν`` is estimated either by
reweighting base paths with the Doléans-Dade density (``reweighted``) or by
simulating the ``ν``-driven process directly through clock inversion
(``direct``).

Both estimators are produced by one vectorized engine,
:func:`simulate_randomized`, which walks the time grid once.  On each step
``(t_i, t_{i+1}]`` the rates are frozen at ``ν(t_i, X_{t_i}, I_{t_i}, ·)``,
the SDE uses ``a_i = I_{t_i}``, and jumps inside the step take effect at
``t_{i+1}``.  Path ``p`` consumes exactly the numbers of stream
``first_index + p`` (gap ``k`` and mark ``k`` on the Poisson channels,
Brownian draws on their own channel), so base-mode event data coincide with
:func:`~randcontrol.point_process.sample_poisson_ensemble` and direct-mode
event data coincide with
:func:`~randcontrol.point_process.time_change_sequence` up to the clock
tolerance.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .point_process import IntensityField, JumpControlPath, MarkedPointPath, PointEnsemble
from .rng import Channel, PathStreams
from .sde import StatePath, euler_step, running_reward, terminal_reward
from .stats import Estimate, estimate

__all__ = [
    "RandomizedBundle",
    "RandomizedPathBundle",
    "IntensityFamily",
    "SearchResult",
    "simulate_randomized",
    "randomized_gain_reweighted",
    "randomized_gain_direct",
    "randomized_gain",
    "weight_cv",
    "coordinate_ascent",
    "optimize_intensity",
]

MODES = ("base", "reweighted", "direct")
CV_WARN = 5.0


@dataclass
class RandomizedPathBundle:
    """One path of the randomized problem."""

    mpp: MarkedPointPath
    jumps_control: JumpControlPath
    state: StatePath
    weight_trace: np.ndarray | None


@dataclass
class RandomizedBundle:
    """Ensemble output of :func:`simulate_randomized`.

    ``I`` holds mark indices of ``I_{t_i}`` on the grid (right-continuous
    value at each grid point); ``actions`` the indices used on each step.
    """

    grid: object
    space: object
    mode: str
    running: np.ndarray
    terminal: np.ndarray
    counts: np.ndarray
    log_kappa: np.ndarray | None = None
    X: np.ndarray | None = None  # (P, N+1, n)
    I: np.ndarray | None = None  # (P, N+1)
    dW: np.ndarray | None = None  # (P, N, d)
    kappa_trace: np.ndarray | None = None  # (P, N+1)
    events: PointEnsemble | None = None
    x_T: np.ndarray | None = None  # state at the last simulated grid time
    i_end: np.ndarray | None = None  # mark index of I at that time

    @property
    def n_paths(self):
        return self.running.size

    @property
    def payoff(self):
        return self.running + self.terminal

    @property
    def weights(self):
        if self.log_kappa is None:
            return np.ones(self.n_paths)
        return np.exp(self.log_kappa)

    def path(self, p):
        if self.events is None or self.X is None:
            raise ValueError("path extraction needs store=True and record_events=True")
        mpp = self.events.path(p)
        trace = None if self.kappa_trace is None else self.kappa_trace[p]
        acts = self.space.marks[self.I[p, :-1]]
        return RandomizedPathBundle(mpp, JumpControlPath(mpp), StatePath(self.grid, self.X[p], acts), trace)


def _check_mode(mode, nu):
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if mode != "base" and nu is None:
        raise ValueError(f"mode {mode!r} needs an intensity field")


def simulate_randomized(
    spec,
    grid,
    n_paths,
    seed,
    nu=None,
    mode="base",
    first_index=0,
    store=False,
    record_events=False,
    weight_trace=False,
    stop_index=None,
):
    """Simulate ``(X, I)`` and, when reweighting, ``log κ``.

    Parameters
    ----------
    spec : ProblemSpec
    grid : TimeGrid
    n_paths, seed : int
        Path ``p`` uses stream ``first_index + p`` of ``seed``.
    nu : IntensityField, optional
        Needed for ``reweighted`` and ``direct`` modes.
    mode : {"base", "reweighted", "direct"}
    store : bool
        Keep ``X``, ``I`` and the Brownian increments.
    record_events : bool
        Keep event times and marks as a :class:`PointEnsemble`.
    weight_trace : bool
        Keep ``κ`` on the grid (reweighted mode).
    stop_index : int, optional
        Stop after this many steps; ``terminal`` is then zero and the state
        at the stopping grid time is returned in ``x_T``.
    """
    _check_mode(mode, nu)
    space = spec.space
    lam = space.total_mass
    w = space.weights
    P = int(n_paths)
    if P <= 0:
        raise ValueError("n_paths must be positive")
    N = grid.n_steps if stop_index is None else int(stop_index)
    if not 0 <= N <= grid.n_steps:
        raise ValueError("stop_index outside the grid")
    pts, dt = grid.points, grid.dt
    streams = PathStreams(seed, P, first_index)
    sq = np.sqrt(dt)
    d = spec.dim_w

    x = np.tile(spec.x0, (P, 1))
    cur = np.full(P, space.a0_index, dtype=np.int64)
    k = np.zeros(P, dtype=np.int64)
    running = np.zeros(P)
    reweight = mode == "reweighted"
    direct = mode == "direct"
    log_k = np.zeros(P) if reweight else None

    X = np.empty((P, N + 1, spec.dim_x)) if store else None
    I = np.empty((P, N + 1), dtype=np.int64) if store else None
    dW = None if (not store or spec.deterministic) else np.empty((P, N, d))
    ktrace = np.zeros((P, N + 1)) if (weight_trace and reweight) else None
    if store:
        X[:, 0] = x
        I[:, 0] = cur
    ev_rows, ev_t, ev_m, ev_u, ev_k = [], [], [], [], []

    gap0 = -np.log(streams.uniform(Channel.POISSON_GAP, 0)) / lam
    # base time of the next event (base modes) or base-time gap still to run (direct)
    nxt = gap0

    for i in range(N):
        t0, t1 = pts[i], pts[i + 1]
        a_idx = cur.copy()
        a_val = space.marks[a_idx]
        r = nu.rates(t0, x, a_idx) if nu is not None else None
        running += running_reward(spec, t0, x, a_val) * dt

        if direct:
            speed = (r @ w) / lam
            s = np.full(P, t0)
            te = s + nxt / speed
            hit = te <= t1
            while hit.any():
                rows = np.flatnonzero(hit)
                u = streams.uniform(Channel.POISSON_MARK, k[rows], paths=rows)
                mk = space.mark_from_uniform(u, rates=r[rows])
                cur[rows] = mk
                s[rows] = te[rows]
                if record_events:
                    ev_rows.append(rows), ev_t.append(te[rows]), ev_m.append(mk), ev_u.append(u), ev_k.append(k[rows])
                k[rows] += 1
                nxt[rows] = -np.log(streams.uniform(Channel.POISSON_GAP, k[rows], paths=rows)) / lam
                te[rows] = s[rows] + nxt[rows] / speed[rows]
                hit = te <= t1
            nxt = nxt - speed * (t1 - s)
            np.maximum(nxt, 0.0, out=nxt)
        else:
            if reweight:
                log_k += dt * ((1.0 - r) @ w)
            hit = nxt <= t1
            while hit.any():
                rows = np.flatnonzero(hit)
                u = streams.uniform(Channel.POISSON_MARK, k[rows], paths=rows)
                mk = space.mark_from_uniform(u)
                cur[rows] = mk
                if reweight:
                    log_k[rows] += np.log(r[rows, mk])
                if record_events:
                    ev_rows.append(rows), ev_t.append(nxt[rows]), ev_m.append(mk), ev_u.append(u), ev_k.append(k[rows])
                k[rows] += 1
                nxt[rows] = nxt[rows] + (-np.log(streams.uniform(Channel.POISSON_GAP, k[rows], paths=rows)) / lam)
                hit = nxt <= t1

        if spec.deterministic:
            dw = None
        else:
            dw = streams.normal_block(Channel.BROWNIAN, i * d, d) * sq
            if dW is not None:
                dW[:, i] = dw
        x = euler_step(spec, t0, x, a_val, dw, dt)
        if store:
            X[:, i + 1] = x
            I[:, i + 1] = cur
        if ktrace is not None:
            ktrace[:, i + 1] = log_k

    terminal = terminal_reward(spec, x) if N == grid.n_steps else np.zeros(P)
    events = None
    if record_events:
        events = _assemble_events(space, pts[N], P, k, ev_rows, ev_t, ev_m, ev_u, ev_k)
    return RandomizedBundle(
        grid,
        space,
        mode,
        running,
        terminal,
        k.copy(),
        log_k,
        X,
        I,
        dW,
        None if ktrace is None else np.exp(ktrace),
        events,
        x,
        cur,
    )


def _assemble_events(space, horizon, P, k, rows, times, marks, us, idx):
    K = int(k.max()) if P else 0
    T = np.full((P, K), np.inf)
    M = np.full((P, K), -1, dtype=np.int64)
    U = np.full((P, K), np.nan)
    for r, t, m, u, j in zip(rows, times, marks, us, idx):
        T[r, j] = t
        M[r, j] = m
        U[r, j] = u
    return PointEnsemble(space, float(horizon), T, M, U)


# ----------------------------------------------------------------------
# Gain estimators


def _grid_for(spec, grid, n_steps):
    return grid if grid is not None else spec.grid(n_steps)


def weight_cv(weights):
    """Coefficient of variation of importance weights."""
    m = float(np.mean(weights))
    return float(np.std(weights) / m) if m > 0 else np.inf


def randomized_gain_reweighted(spec, nu, n_paths, seed, grid=None, n_steps=100, first_index=0, return_bundle=False):
    """Estimate ``J^R(ν) = E[κ_T^ν (∫f dt + g(X_T))]`` on base paths."""
    g = _grid_for(spec, grid, n_steps)
    b = simulate_randomized(spec, g, n_paths, seed, nu, "reweighted", first_index)
    est = estimate(b.weights * b.payoff)
    return (est, b) if return_bundle else est


def randomized_gain_direct(spec, nu, n_paths, seed, grid=None, n_steps=100, first_index=0, return_bundle=False):
    """Estimate ``J^R(ν)`` from paths whose jump process has intensity ``ν``."""
    g = _grid_for(spec, grid, n_steps)
    b = simulate_randomized(spec, g, n_paths, seed, nu, "direct", first_index)
    est = estimate(b.payoff)
    return (est, b) if return_bundle else est


def randomized_gain(spec, nu, n_paths, seed, estimator="reweighted", **kw):
    if estimator == "reweighted":
        return randomized_gain_reweighted(spec, nu, n_paths, seed, **kw)
    if estimator == "direct":
        return randomized_gain_direct(spec, nu, n_paths, seed, **kw)
    raise ValueError(f"estimator must be 'reweighted' or 'direct', got {estimator!r}")


# ----------------------------------------------------------------------
# Intensity families and search


@dataclass
class IntensityFamily:
    """Parametric set of intensity fields searched by coordinate ascent.

    ``builder(theta)`` returns an :class:`IntensityField`; ``candidates[j]``
    lists the values tried for coordinate ``j``.  Every built field must lie
    inside ``[nu_min, nu_max]``.
    """

    name: str
    builder: Callable
    theta0: np.ndarray
    candidates: list
    nu_min: float
    nu_max: float

    def __post_init__(self):
        self.theta0 = np.asarray(self.theta0, dtype=float)
        self.candidates = [np.asarray(c, dtype=float) for c in self.candidates]
        if len(self.candidates) != self.theta0.size:
            raise ValueError("one candidate list per parameter is required")
        if not 0 < self.nu_min <= self.nu_max < np.inf:
            raise ValueError(f"family bounds must satisfy 0 < nu_min <= nu_max < inf, got ({self.nu_min}, {self.nu_max})")

    def build(self, theta):
        fld = self.builder(np.asarray(theta, dtype=float))
        tol = 1e-12 * self.nu_max
        if fld.nu_min < self.nu_min - tol or fld.nu_max > self.nu_max + tol:
            raise ValueError(
                f"family {self.name}: member bounds ({fld.nu_min}, {fld.nu_max}] leave ({self.nu_min}, {self.nu_max}]"
            )
        return fld

    @property
    def size(self):
        return int(np.prod([c.size for c in self.candidates]))

    def members(self):
        for theta in itertools.product(*self.candidates):
            yield np.array(theta)

    @classmethod
    def singleton(cls, fld, name=None):
        return cls(name or fld.name, lambda theta: fld, np.zeros(1), [np.zeros(1)], fld.nu_min, fld.nu_max)


@dataclass
class SearchResult:
    theta: np.ndarray
    value: Estimate
    trace: list = field(default_factory=list)  # (theta, Estimate) in evaluation order
    budget_exhausted: bool = False
    estimator: str = "reweighted"
    weight_cv: float | None = None

    def __iter__(self):
        return iter((self.theta, self.value))


def coordinate_ascent(family, evaluate, budget=64, sweeps=3):
    """Maximize ``evaluate(theta) -> Estimate`` over the family's candidate grid.

    Coordinates are swept in order; a candidate replaces the incumbent only
    if its estimate is strictly larger.  Returns ``(theta, best, trace,
    budget_exhausted)``.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    cache = {}
    trace = []
    exhausted = False

    def value(theta):
        nonlocal exhausted
        key = tuple(np.round(theta, 12))
        if key in cache:
            return cache[key]
        if len(trace) >= budget:
            exhausted = True
            return None
        est = evaluate(theta)
        cache[key] = est
        trace.append((np.array(theta), est))
        return est

    theta = family.theta0.copy()
    best = value(theta)
    for _ in range(sweeps):
        moved = False
        for j, cands in enumerate(family.candidates):
            for c in cands:
                trial = theta.copy()
                trial[j] = c
                est = value(trial)
                if est is None:
                    break
                if est.value > best.value:
                    theta, best, moved = trial, est, True
            if exhausted:
                break
        if exhausted or not moved:
            break
    return theta, best, trace, exhausted


def optimize_intensity(
    spec,
    family,
    budget=64,
    n_paths=20_000,
    seed=0,
    estimator="reweighted",
    grid=None,
    n_steps=100,
    sweeps=3,
    final_paths=None,
    final_first_index=None,
):
    """Coordinate-ascent grid search for ``sup_θ J^R(ν_θ)``.

    Every candidate is evaluated on the same paths (common random numbers).
    At most ``budget`` evaluations are made; if the search is cut short the
    best point so far is returned with ``budget_exhausted`` set.  When
    ``final_paths`` is given, the selected ``θ`` is re-evaluated on that many
    fresh paths (streams starting at ``final_first_index``, default just after
    the search paths) so the reported value carries no selection bias.
    """
    g = _grid_for(spec, grid, n_steps)

    def evaluate(theta):
        return randomized_gain(spec, family.build(theta), n_paths, seed, estimator, grid=g)

    theta, best, trace, exhausted = coordinate_ascent(family, evaluate, budget, sweeps)

    cv = None
    if estimator == "reweighted":
        b = simulate_randomized(spec, g, n_paths, seed, family.build(theta), "reweighted")
        cv = weight_cv(b.weights)
        if cv > CV_WARN:
            warnings.warn(
                f"importance weights have coefficient of variation {cv:.1f} > {CV_WARN}; "
                "the reweighted estimate is unreliable (try estimator='direct' or a smaller nu_max)",
                RuntimeWarning,
                stacklevel=2,
            )
    if final_paths:
        first = n_paths if final_first_index is None else final_first_index
        best = randomized_gain(spec, family.build(theta), final_paths, seed, estimator, grid=g, first_index=first)
    return SearchResult(theta, best, trace, exhausted, estimator, cv)
