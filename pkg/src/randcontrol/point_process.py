"""Marked point processes on a finite action space.

Poisson sampling, the Doléans-Dade reweighting density, smoothing-formula
(compensator) residuals, the clock-inversion construction of point processes
with a prescribed intensity, and the approximation of piecewise-constant
controls by point processes with bounded compensator density.

Intensity fields are evaluated in *grid-frozen* form: on a step
``(t_i, t_{i+1}]`` the rate of jumping to mark ``a`` is
``nu(t_i, X_{t_i}, I_{t_i}, a)``.  The field is then predictable, the
reweighting exponent is exactly the left-endpoint quadrature on the grid,
and the clocks of the time change are piecewise linear.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .rng import Channel, PathStreams, RngStream, TimeGrid
from .stats import estimate

__all__ = [
    "ActionSpace",
    "LiftedMeasure",
    "MarkedPointPath",
    "JumpControlPath",
    "PointEnsemble",
    "IntensityField",
    "IntensityBoundsError",
    "History",
    "StepControl",
    "ApproximationResult",
    "discrete_metric",
    "lift_measure",
    "sample_poisson_mpp",
    "sample_poisson_ensemble",
    "girsanov_weight",
    "girsanov_weights",
    "compensator_residual",
    "time_change_sequence",
    "approximate_control",
    "approximation_distance",
]

RHO_DISCRETE = 0.5


class IntensityBoundsError(ValueError):
    """An intensity value fell outside its declared bounds."""


def discrete_metric(a, b):
    """Bounded metric on a finite action space: 1/2 off the diagonal."""
    return RHO_DISCRETE * (np.asarray(a) != np.asarray(b))


@dataclass(frozen=True)
class ActionSpace:
    """Finite action space with a strictly positive intensity measure.

    An ``interval`` space keeps its continuous description (used for
    lifting) and is simulated through a uniform discretization into cells.
    """

    marks: np.ndarray
    weights: np.ndarray
    a0: float
    kind: str = "finite"
    bounds: tuple | None = None
    density: float | None = None

    def __post_init__(self):
        marks = np.asarray(self.marks, dtype=float).ravel()
        weights = np.asarray(self.weights, dtype=float).ravel()
        object.__setattr__(self, "marks", marks)
        object.__setattr__(self, "weights", weights)
        if marks.size == 0 or marks.size != weights.size:
            raise ValueError("marks and weights must be non-empty and of equal length")
        if not np.all(weights > 0) or not np.all(np.isfinite(weights)):
            raise ValueError("all weights must be strictly positive and finite (full support)")
        if np.unique(marks).size != marks.size:
            raise ValueError("marks must be distinct")
        if not np.any(marks == self.a0):
            raise ValueError(f"anchor action a0={self.a0} is not a member of the space")

    @classmethod
    def finite(cls, marks, weights, a0):
        return cls(np.asarray(marks, float), np.asarray(weights, float), float(a0))

    @classmethod
    def interval(cls, lo, hi, density, a0, n_cells=16):
        if not hi > lo or density <= 0:
            raise ValueError("interval space needs hi > lo and density > 0")
        if not lo <= a0 <= hi:
            raise ValueError(f"anchor action a0={a0} is not in [{lo}, {hi}]")
        h = (hi - lo) / n_cells
        mids = lo + h * (np.arange(n_cells) + 0.5)
        j = min(int((a0 - lo) / h), n_cells - 1)
        return cls(mids, np.full(n_cells, density * h), float(mids[j]), "interval", (float(lo), float(hi)), float(density))

    @property
    def size(self):
        return self.marks.size

    @property
    def total_mass(self):
        return float(np.sum(self.weights))

    @property
    def a0_index(self):
        return int(np.flatnonzero(self.marks == self.a0)[0])

    @property
    def cdf(self):
        c = np.cumsum(self.weights) / self.total_mass
        c[-1] = 1.0
        return c

    def index_of(self, a):
        a = np.asarray(a, dtype=float)
        idx = np.searchsorted(self.marks_sorted, a)
        idx = np.clip(idx, 0, self.size - 1)
        found = self.marks_sorted[idx] == a
        if not np.all(found):
            raise ValueError("action is not a member of the space")
        return self._order[idx]

    @property
    def _order(self):
        return np.argsort(self.marks, kind="stable")

    @property
    def marks_sorted(self):
        return self.marks[self._order]

    def mark_from_uniform(self, u, rates=None):
        """Inverse CDF of ``rates * weights`` (default: the weights)."""
        mass = self.weights if rates is None else rates * self.weights
        if mass.ndim == 1:
            c = np.cumsum(mass)
            j = np.searchsorted(c, np.asarray(u) * c[-1], side="left")
        else:
            c = np.cumsum(mass, axis=1)
            j = np.sum(c < (np.asarray(u) * c[:, -1])[:, None], axis=1)
        return np.minimum(j, self.size - 1)


class LiftedMeasure:
    """Nonatomic measure on the real line whose image under ``project`` is λ.

    Atom ``j`` of a finite space (in mark-index order) is spread uniformly
    over the unit interval ``(j - m, j - m + 1]``; the leftmost interval is
    extended to ``-inf`` with zero mass, so the intervals partition
    ``(-inf, 0]``.  An interval space ``[lo, hi]`` with density ``c`` is
    carried to ``(0, hi - lo]`` by the shift ``r -> lo + r``.
    """

    def __init__(self, space):
        self.source = space
        self.continuous = space.kind == "interval"
        m = space.size
        if self.continuous:
            self.atoms = np.zeros(0)
            self.edges = np.zeros(1)
            self.length = space.bounds[1] - space.bounds[0]
            self.density = space.density
        else:
            self.atoms = space.weights.copy()
            self.edges = np.arange(-m, 1, dtype=float)  # m + 1 edges
            self.length = 0.0
            self.density = 0.0

    @property
    def intervals(self):
        out = [(self.edges[j], self.edges[j + 1]) for j in range(self.atoms.size)]
        if out:
            out[0] = (-np.inf, out[0][1])
        return out

    @property
    def total_mass(self):
        return float(np.sum(self.atoms)) + self.length * self.density

    def mass(self, lo, hi):
        """Mass of ``(lo, hi]``."""
        total = 0.0
        for j, w in enumerate(self.atoms):
            a, b = self.edges[j], self.edges[j + 1]
            overlap = max(0.0, min(hi, b) - max(lo, a))
            total += w * overlap / (b - a)
        if self.continuous:
            total += self.density * max(0.0, min(hi, self.length) - max(lo, 0.0))
        return total

    def singleton_mass(self, r):
        return 0.0

    def project(self, r):
        """The map π from the real line to the action space (mark indices
        for finite spaces, action values for interval spaces)."""
        r = np.asarray(r, dtype=float)
        if self.continuous:
            return self.source.bounds[0] + r
        j = np.ceil(r).astype(int) + self.atoms.size - 1
        return np.clip(j, 0, self.atoms.size - 1)

    def pushforward(self):
        """λ' ∘ π⁻¹ on the atoms, interval by interval."""
        return np.array([self.mass(self.edges[j], self.edges[j + 1]) for j in range(self.atoms.size)])

    def cdf(self, r, rates=None):
        """Normalized distribution function of ``rates(π(r)) λ'(dr)``."""
        r = np.asarray(r, dtype=float)
        w = self.atoms if rates is None else self.atoms * rates
        cum = np.concatenate([[0.0], np.cumsum(w)])
        j = np.clip(np.ceil(r).astype(int) + self.atoms.size - 1, 0, self.atoms.size - 1)
        frac = np.clip(r - self.edges[j], 0.0, 1.0)
        return (cum[j] + w[j] * frac) / cum[-1]

    def quantile(self, u, rates=None):
        """Smallest ``b`` with ``cdf(b) >= u``."""
        w = self.atoms if rates is None else self.atoms * rates
        cum = np.cumsum(w)
        target = np.asarray(u, dtype=float) * cum[-1]
        j = np.minimum(np.searchsorted(cum, target, side="left"), w.size - 1)
        below = cum[j] - w[j]
        return self.edges[j] + (target - below) / w[j]


def lift_measure(space):
    return LiftedMeasure(space)


@dataclass
class MarkedPointPath:
    """Events ``(T_n, A_n)`` on ``(0, horizon]``; ``marks`` are indices."""

    horizon: float
    times: np.ndarray
    marks: np.ndarray
    space: ActionSpace
    lifted_marks: np.ndarray | None = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.marks = np.asarray(self.marks, dtype=int)
        if self.times.shape != self.marks.shape:
            raise ValueError("times and marks must have the same length")
        if self.times.size and (np.any(np.diff(self.times) <= 0) or self.times[0] <= 0):
            raise ValueError("event times must be positive and strictly increasing")
        if self.times.size and self.times[-1] > self.horizon:
            raise ValueError("event after horizon")
        if np.any((self.marks < 0) | (self.marks >= self.space.size)):
            raise ValueError("mark outside the action space")

    def __len__(self):
        return self.times.size

    @property
    def actions(self):
        return self.space.marks[self.marks]

    def action_index_at(self, t):
        """Index of ``I_t`` (right-continuous, ``I_0 = a0``)."""
        n = int(np.searchsorted(self.times, t, side="right"))
        return self.space.a0_index if n == 0 else int(self.marks[n - 1])

    def count(self, t=None):
        t = self.horizon if t is None else t
        return int(np.searchsorted(self.times, t, side="right"))


@dataclass
class JumpControlPath:
    """The piecewise-constant control ``I`` attached to a point process."""

    base: MarkedPointPath

    def value(self, t):
        return float(self.base.space.marks[self.base.action_index_at(t)])

    def indices_on_grid(self, grid):
        n = np.searchsorted(self.base.times, grid.points, side="right")
        marks = np.concatenate([[self.base.space.a0_index], self.base.marks])
        return marks[n]

    def values_on_grid(self, grid):
        return self.base.space.marks[self.indices_on_grid(grid)]


class History(NamedTuple):
    """What a predictable field may see just before time ``t``."""

    count: np.ndarray
    action: np.ndarray
    last_time: np.ndarray


@dataclass
class PointEnsemble:
    """``P`` marked point paths stored as padded ``(P, K)`` arrays."""

    space: ActionSpace
    horizon: float
    times: np.ndarray  # inf-padded
    marks: np.ndarray  # -1 padded
    uniforms: np.ndarray | None = None  # F(R_n), the lifted-mark quantiles

    @property
    def n_paths(self):
        return self.times.shape[0]

    def path(self, p):
        k = int(np.sum(np.isfinite(self.times[p])))
        lifted = None
        if self.uniforms is not None:
            lifted = lift_measure(self.space).quantile(self.uniforms[p, :k])
        return MarkedPointPath(self.horizon, self.times[p, :k], self.marks[p, :k], self.space, lifted)

    def counts(self, t=None):
        t = self.horizon if t is None else t
        return np.sum(self.times <= t, axis=1)

    def action_at(self, t):
        """Mark indices of ``I_t`` for all paths."""
        n = self.counts(t)
        return self._mark_before(n)

    def action_before(self, t):
        n = np.sum(self.times < t, axis=1)
        return self._mark_before(n)

    def _mark_before(self, n):
        out = np.full(self.n_paths, self.space.a0_index)
        has = n > 0
        out[has] = self.marks[has, n[has] - 1]
        return out

    def first_events(self, k):
        """Times and marks of the first ``k`` events (inf / -1 if absent)."""
        K = self.times.shape[1]
        times = np.full((self.n_paths, k), np.inf)
        marks = np.full((self.n_paths, k), -1)
        times[:, : min(k, K)] = self.times[:, :k]
        marks[:, : min(k, K)] = self.marks[:, :k]
        return times, marks


class IntensityField:
    """Bounded positive intensity ``nu(t, x, i, a)``.

    ``func(t, x, i)`` receives a scalar time, states ``(P, n)`` and current
    mark indices ``(P,)`` and returns rates broadcastable to ``(P, m)``.
    """

    def __init__(self, func, nu_min, nu_max, n_marks, parameters=(), name="custom"):
        if not (0 < nu_min <= nu_max < np.inf):
            raise ValueError(f"intensity bounds must satisfy 0 < nu_min <= nu_max < inf, got ({nu_min}, {nu_max})")
        self.func = func
        self.nu_min = float(nu_min)
        self.nu_max = float(nu_max)
        self.n_marks = int(n_marks)
        self.parameters = np.asarray(parameters, dtype=float)
        self.name = name

    def __repr__(self):
        return f"IntensityField({self.name}, params={self.parameters.tolist()}, bounds=({self.nu_min}, {self.nu_max}])"

    @classmethod
    def constant(cls, c, n_marks, nu_min=None, nu_max=None):
        c = float(c)
        return cls(
            lambda t, x, i: np.full((np.size(i), n_marks), c),
            c if nu_min is None else nu_min,
            c if nu_max is None else nu_max,
            n_marks,
            (c,),
            f"constant({c:g})",
        )

    @classmethod
    def pointwise(cls, fn, n_marks, nu_min, nu_max, parameters=(), name="pointwise"):
        """Wrap ``fn(t, x, i, a)`` written with numpy broadcasting;
        ``i`` arrives as ``(P, 1)`` and ``a`` as ``(1, m)``."""
        a = np.arange(n_marks)[None, :]

        def func(t, x, i):
            i = np.asarray(i)
            return np.broadcast_to(fn(t, x, i[:, None], a), (i.size, n_marks))

        return cls(func, nu_min, nu_max, n_marks, parameters, name)

    def rates(self, t, x, i, check=True):
        i = np.atleast_1d(np.asarray(i))
        r = np.broadcast_to(np.asarray(self.func(t, x, i), dtype=float), (i.size, self.n_marks))
        if check:
            self.check(r, t)
        return r

    def evaluate(self, t, x, i, a):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return float(self.rates(t, x, [i])[0, a])

    def check(self, r, t=None):
        tol = 1e-12 * max(1.0, self.nu_max)
        bad = ~np.isfinite(r) | (r < self.nu_min - tol) | (r > self.nu_max + tol)
        if np.any(bad):
            v = r[bad].ravel()[0]
            raise IntensityBoundsError(
                f"intensity {self.name} = {v} at t={t} violates declared bounds [{self.nu_min}, {self.nu_max}]"
            )

    def probe(self, horizon, dim_x, n_probe=256, seed=0, x_scale=3.0):
        """Evaluate at random ``(t, x, i)``; raises on a bound violation."""
        s = RngStream(seed, 0)
        u = s.uniform(n_probe * (2 + dim_x)).reshape(n_probe, 2 + dim_x)
        i = np.minimum((u[:, 1] * self.n_marks).astype(int), self.n_marks - 1)
        x = x_scale * (2 * u[:, 2:] - 1)
        for k in range(n_probe):
            self.rates(horizon * u[k, 0], x[k : k + 1], i[k : k + 1])

    def floored(self, eps):
        """The field ``nu ∨ eps``."""
        base = self.func
        return IntensityField(
            lambda t, x, i: np.maximum(base(t, x, i), eps),
            max(self.nu_min, eps),
            max(self.nu_max, eps),
            self.n_marks,
            self.parameters,
            f"{self.name}∨{eps:g}",
        )


# ----------------------------------------------------------------------
# Poisson sampling


def _poisson_draws(space, horizon, gap_u, mark_u):
    lam = space.total_mass
    times = np.cumsum(-np.log(gap_u) / lam)
    n = int(np.searchsorted(times, horizon, side="right"))
    return times[:n], space.mark_from_uniform(mark_u[:n]), mark_u[:n]


def sample_poisson_mpp(space, horizon, stream, lifted=True):
    """Poisson process with intensity ``λ(da) dt`` on ``(0, horizon]``.

    Interarrival ``k`` and mark ``k`` are draws ``k`` of the gap and mark
    channels of ``stream``; marks are obtained through the lifted measure
    so the real pre-images are available to the time change.
    """
    if not horizon > 0:
        raise ValueError("horizon must be positive")
    lam = space.total_mass
    times, marks, us = np.zeros(0), np.zeros(0, int), np.zeros(0)
    n_draw = max(8, int(lam * horizon + 6 * np.sqrt(lam * horizon) + 8))
    while True:
        gu = stream.uniform(n_draw, channel=Channel.POISSON_GAP)
        mu = stream.uniform(n_draw, channel=Channel.POISSON_MARK)
        times, marks, us = _poisson_draws(space, horizon, gu, mu)
        if times.size < n_draw:
            break
        n_draw *= 2
    lifted_marks = lift_measure(space).quantile(us) if lifted else None
    return MarkedPointPath(float(horizon), times, marks, space, lifted_marks)


def sample_poisson_ensemble(space, horizon, n_paths, seed, first_index=0):
    """Vectorized :func:`sample_poisson_mpp` over consecutive path streams."""
    if not horizon > 0:
        raise ValueError("horizon must be positive")
    streams = PathStreams(seed, n_paths, first_index)
    lam = space.total_mass
    t = np.zeros(n_paths)
    cols_t, cols_m, cols_u = [], [], []
    k = 0
    while True:
        alive = t <= horizon
        if not alive.any():
            break
        t = t + (-np.log(streams.uniform(Channel.POISSON_GAP, k)) / lam)
        inside = alive & (t <= horizon)
        if not inside.any():
            break
        u = streams.uniform(Channel.POISSON_MARK, k)
        cols_t.append(np.where(inside, t, np.inf))
        cols_m.append(np.where(inside, space.mark_from_uniform(u), -1))
        cols_u.append(np.where(inside, u, np.nan))
        t = np.where(inside, t, np.inf)
        k += 1
    if not cols_t:
        z = np.zeros((n_paths, 0))
        return PointEnsemble(space, float(horizon), z, z.astype(int), z)
    return PointEnsemble(space, float(horizon), np.stack(cols_t, 1), np.stack(cols_m, 1), np.stack(cols_u, 1))


# ----------------------------------------------------------------------
# Reweighting


def _zero_state(P):
    return np.zeros((P, 1))


def girsanov_weight(path, nu, grid, t, state_path=None):
    """Doléans-Dade density ``κ_t`` of the grid-frozen field along one path.

    ``state_path(t)`` returns the state vector at a grid time; the default
    is a dummy zero state for fields that ignore it.
    """
    if not 0 <= t <= path.horizon + 1e-12:
        raise ValueError(f"t={t} outside [0, {path.horizon}]")
    w = path.space.weights
    pts = grid.points

    def frozen(i):
        x = np.zeros((1, 1)) if state_path is None else np.atleast_2d(state_path(pts[i]))
        return nu.rates(pts[i], x, [path.action_index_at(pts[i])])[0]

    log_k = 0.0
    for i in range(grid.n_steps):
        if pts[i] >= t:
            break
        h = min(pts[i + 1], t) - pts[i]
        log_k += h * float(np.sum((1.0 - frozen(i)) * w))
    for tn, an in zip(path.times, path.marks):
        if tn > t:
            break
        log_k += np.log(frozen(grid.step_containing(tn))[an])
    return float(np.exp(log_k))


def girsanov_weights(ens, nu, grid, states=None, trace=False):
    """Vectorized density ``κ_T`` (or the grid trace ``(P, N+1)``)."""
    P = ens.n_paths
    w = ens.space.weights
    pts = grid.points
    log_k = np.zeros(P)
    out = np.zeros((P, grid.n_steps + 1)) if trace else None
    for i in range(grid.n_steps):
        x = _zero_state(P) if states is None else states[:, i]
        r = nu.rates(pts[i], x, ens.action_at(pts[i]))
        log_k += grid.dt * ((1.0 - r) @ w)
        inside = (ens.times > pts[i]) & (ens.times <= pts[i + 1])
        if inside.any():
            rows, cols = np.nonzero(inside)
            np.add.at(log_k, rows, np.log(r[rows, ens.marks[rows, cols]]))
        if trace:
            out[:, i + 1] = log_k
    return np.exp(out) if trace else np.exp(log_k)


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(3)


def compensator_residual(ens, nu, H, grid, weights=None, states=None):
    """Monte-Carlo residual of the smoothing formula.

    Estimates ``E[w (∫H dμ - ∫∫ H ν λ(da) dt)]`` where ``w`` are optional
    reweighting densities (``κ_T``) and ``ν`` is grid-frozen.  ``H(t, hist,
    a)`` must be predictable: it sees only :class:`History` before ``t``.
    The compensator integral is computed exactly between jump times with
    three-point Gauss-Legendre quadrature.

    Returns
    -------
    (residual, standard_error)
    """
    P = ens.n_paths
    if P == 0:
        raise ValueError("empty ensemble")
    a0 = ens.space.a0_index
    w = ens.space.weights
    T, M = ens.times, ens.marks
    K = T.shape[1]
    pts = grid.points

    def hist(count, rows):
        prev = count - 1
        has = prev >= 0
        action = np.full(rows.size, a0)
        last = np.zeros(rows.size)
        action[has] = M[rows[has], prev[has]]
        last[has] = T[rows[has], prev[has]]
        return History(count, action, last)

    lhs = np.zeros(P)
    for k in range(K):
        rows = np.flatnonzero(np.isfinite(T[:, k]))
        if rows.size:
            h = hist(np.full(rows.size, k), rows)
            lhs[rows] += H(T[rows, k], h, M[rows, k])

    rhs = np.zeros(P)
    for i in range(grid.n_steps):
        x = _zero_state(P) if states is None else states[:, i]
        count_i = np.sum(T <= pts[i], axis=1)
        r = nu.rates(pts[i], x, ens.action_at(pts[i]))
        n_in = np.sum((T > pts[i]) & (T <= pts[i + 1]), axis=1)
        for j in range(int(n_in.max()) + 1):
            rows = np.flatnonzero(n_in >= j)
            c = count_i[rows] + j
            s0 = pts[i] if j == 0 else T[rows, c - 1]
            s0 = np.broadcast_to(s0, rows.shape)
            s1 = np.where(j < n_in[rows], T[rows, np.minimum(c, K - 1)], pts[i + 1])
            half = 0.5 * (s1 - s0)
            mid = 0.5 * (s1 + s0)
            h = hist(c, rows)
            for node, gw in zip(_GL_NODES, _GL_WEIGHTS):
                s = mid + half * node
                for a in range(ens.space.size):
                    rhs[rows] += gw * half * H(s, h, a) * r[rows, a] * w[a]
    d = lhs - rhs
    if weights is not None:
        d = d * weights
    e = estimate(d)
    return e.value, e.se


# ----------------------------------------------------------------------
# Time change


def _bisect(fun, target, lo, hi, tol):
    # fun continuous nondecreasing, fun(lo) <= target <= fun(hi)
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if fun(mid) >= target:
            hi = mid
        else:
            lo = mid
    return hi


def time_change_sequence(base, lifted, nu, grid, state_path=None, tol=None):
    """Build ``(T_n^ν, A_n^ν)`` from a base Poisson path by clock inversion.

    ``T_{n+1}^ν`` is the first time the normalized integrated intensity
    since ``T_n^ν`` reaches the base gap ``T_{n+1} - T_n``; the mark is the
    quantile, under the ν-tilted lifted measure, of the base mark's level
    ``F(R_{n+1})``.  Clocks are inverted by bisection to ``tol`` (default
    ``1e-10 * horizon``).  The base path must extend to base time
    ``nu_max * horizon`` so that every event on ``[0, horizon]`` is built.
    """
    if base.lifted_marks is None:
        raise ValueError("time change needs the lifted real marks of the base path")
    space = base.space
    lam = space.total_mass
    w = space.weights
    horizon = grid.t_end
    tol = 1e-10 * horizon if tol is None else tol
    pts = grid.points
    if base.horizon < nu.nu_max * horizon * (1 - 1e-12):
        raise ValueError("base path too short: needs horizon >= nu_max * T")

    ev_t, ev_m = [], []

    def cur_index(t):
        n = int(np.searchsorted(ev_t, t, side="right"))
        return space.a0_index if n == 0 else ev_m[n - 1]

    cache = {}

    def frozen(i):
        key = (i, cur_index(pts[i]))
        if key not in cache:
            x = np.zeros((1, 1)) if state_path is None else np.atleast_2d(state_path(pts[i]))
            cache[key] = nu.rates(pts[i], x, [key[1]])[0]
        return cache[key]

    def total_rate(i):
        return float(np.sum(frozen(i) * w)) / lam

    def clock(start, t):
        # (1/λ(A)) ∫_start^t Σ_a ν̃_s(a) λ(da) ds
        acc = 0.0
        i = grid.step_containing(start) if start > pts[0] else 0
        s = start
        while s < t and i < grid.n_steps:
            e = min(t, pts[i + 1])
            acc += (e - s) * total_rate(i)
            s = e
            i += 1
        if s < t:  # beyond the grid: extrapolate with the last step's rate
            acc += (t - s) * total_rate(grid.n_steps - 1)
        return acc

    prev_base = 0.0
    t_prev = 0.0
    levels = lifted.cdf(base.lifted_marks)
    for tn, level in zip(base.times, levels):
        gap = tn - prev_base
        prev_base = tn
        if clock(t_prev, horizon) < gap:
            break
        t_new = _bisect(lambda t: clock(t_prev, t), gap, t_prev, min(horizon, t_prev + gap / nu.nu_min), tol)
        i = grid.step_containing(t_new)
        b = lifted.quantile(level, rates=frozen(i))
        ev_t.append(t_new)
        ev_m.append(int(lifted.project(b)))
        assert t_new * nu.nu_max >= tn * (1 - 1e-9)
        t_prev = t_new
    return MarkedPointPath(horizon, np.array(ev_t), np.array(ev_m, dtype=int), space)


# ----------------------------------------------------------------------
# Approximation of a piecewise-constant control


@dataclass
class StepControl:
    """Deterministic-grid step control: ``values[n]`` on ``[t_n, t_{n+1})``."""

    breakpoints: np.ndarray
    values: np.ndarray  # mark indices

    def __post_init__(self):
        self.breakpoints = np.asarray(self.breakpoints, dtype=float)
        self.values = np.asarray(self.values, dtype=int)
        if self.breakpoints.size != self.values.size + 1 or np.any(np.diff(self.breakpoints) <= 0):
            raise ValueError("need increasing breakpoints t_0 < ... < t_N and N values")
        if self.breakpoints[0] != 0.0:
            raise ValueError("t_0 must be 0")

    @property
    def horizon(self):
        return float(self.breakpoints[-1])

    def index_at(self, t):
        n = np.searchsorted(self.breakpoints, t, side="right") - 1
        return self.values[np.clip(n, 0, self.values.size - 1)]


@dataclass
class ApproximationResult:
    path: MarkedPointPath
    nu_hat: Callable
    distance: float
    lag_distance: float
    no_extra_event: bool = field(default=False)


def _ball(space, b, m):
    d = discrete_metric(space.marks, space.marks[b])
    return np.flatnonzero(d < 1.0 / m)


def _step_distance(breaks_a, vals_a, breaks_b, vals_b, horizon):
    """∫_0^T ρ(a_t, b_t) dt for two right-continuous step functions."""
    cuts = np.unique(np.concatenate([breaks_a, breaks_b, [0.0, horizon]]))
    cuts = cuts[(cuts >= 0) & (cuts <= horizon)]
    left = cuts[:-1]
    ia = np.searchsorted(breaks_a, left, side="right") - 1
    ib = np.searchsorted(breaks_b, left, side="right") - 1
    return float(np.sum(np.diff(cuts) * discrete_metric(vals_a[ia], vals_b[ib])))


def approximate_control(alpha, space, m, k, stream):
    """One replication of the point-process approximation of ``alpha``.

    Jumps ``R_n = t_n + V_1 + ... + V_n`` with ``V_j ~ Exp(m 2^j)`` carry
    marks drawn from λ restricted to the ``1/m``-ball around ``alpha_n``; an
    independent Poisson process with intensity ``λ(da)/k`` is superposed.

    Returns an :class:`ApproximationResult` with the merged path, the
    compensator density ``nu_hat(t, a)`` (bounded below by ``1/k``), the
    pathwise distance ``∫ρ(Î_t, alpha_t) dt`` and the same distance without
    the superposed process.
    """
    if m < 1 or k < 1:
        raise ValueError("m and k must be >= 1")
    a0 = space.a0_index
    if alpha.values[0] != a0:
        raise ValueError("the control must start at the anchor action a0")
    T = alpha.horizon
    N = alpha.values.size
    tb = alpha.breakpoints
    # pieces n = 1..N-1 start inside (0, T); later ones fall beyond T
    n_idx = np.arange(1, N)
    rates = m * 2.0 ** n_idx
    V = -np.log(stream.uniform(N - 1, channel=Channel.APPROX_GAP)) / rates
    U = stream.uniform(N - 1, channel=Channel.APPROX_KERNEL)
    R = tb[1:N] + np.cumsum(V)
    S = R - V
    beta = np.empty(N - 1, dtype=int)
    for j, n in enumerate(n_idx):
        ball = _ball(space, alpha.values[n], m)
        if space.weights[ball].sum() <= 0:
            raise ValueError("ball around the control value has no mass")
        c = np.cumsum(space.weights[ball])
        beta[j] = ball[min(np.searchsorted(c, U[j] * c[-1]), ball.size - 1)]
    keep = R <= T

    # superposed Poisson process with intensity λ(da)/k
    lam_k = space.total_mass / k
    extra_t, extra_m = [], []
    t, j = 0.0, 0
    while True:
        t += -np.log(stream.uniform(1, start=j, channel=Channel.EXTRA_GAP)[0]) / lam_k
        if t > T:
            break
        extra_t.append(t)
        extra_m.append(int(space.mark_from_uniform(stream.uniform(1, start=j, channel=Channel.EXTRA_MARK)[0])))
        j += 1

    times = np.concatenate([R[keep], extra_t])
    marks = np.concatenate([beta[keep], np.array(extra_m, dtype=int)])
    order = np.argsort(times, kind="stable")
    path = MarkedPointPath(T, times[order], marks[order], space)

    ib = np.concatenate([[0.0], path.times])
    iv = np.concatenate([[a0], path.marks])
    dist = _step_distance(ib, iv, tb, alpha.values, T)
    lag = _step_distance(np.concatenate([[0.0], R[keep]]), np.concatenate([[a0], beta[keep]]), tb, alpha.values, T)

    ball_mass = np.array([space.weights[_ball(space, alpha.values[n], m)].sum() for n in n_idx])
    in_ball = np.array([np.isin(np.arange(space.size), _ball(space, alpha.values[n], m)) for n in n_idx]).reshape(-1, space.size)

    def nu_hat(t, a):
        on = (S < t) & (t <= R)
        return float(np.sum(on * in_ball[:, a] * rates / ball_mass)) + 1.0 / k

    return ApproximationResult(path, nu_hat, dist, lag, len(extra_t) == 0)


def approximation_distance(alpha, space, m, k, n_reps, seed):
    """Monte-Carlo estimates of the Krylov distance and its lag part."""
    d = np.empty(n_reps)
    lag = np.empty(n_reps)
    for r in range(n_reps):
        res = approximate_control(alpha, space, m, k, RngStream(seed, r))
        d[r], lag[r] = res.distance, res.lag_distance
    return estimate(d), estimate(lag)
