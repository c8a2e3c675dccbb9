"""Least-squares Monte Carlo for the penalized BSDE with jumps.

The penalized equation is driven by the uncompensated jump measure of the
auxiliary process ``I``.  Taking the conditional expectation of one grid
step, the jump contributions cancel and the scheme reads

    U_i(x, j, a) = C_i(x, j, a) - C_i(x, j, j),
    y_i(x, j)    = C_i(x, j, j) + f(t_i, x, j) Δ + n Δ Σ_a λ_a U_i(x, j, a)^+,

where ``C_i(x, j, a) = E[y_{i+1}(X_{i+1}^j, a) | X_i = x]`` and ``X_{i+1}^j``
is the Euler step from ``x`` under action ``j``.  ``C`` is obtained by ridge
regression on all base paths, recomputing the one-step transition under each
action ``j`` with the path's own Brownian increment.  Since ``X_{i+1}`` does
not depend on a jump of ``I`` inside the step, ``U`` is exactly the
jump-versus-no-jump difference of conditional expectations.

The scheme is monotone when ``n λ(A) Δ <= 1``; larger penalties are rejected.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field
from itertools import combinations_with_replacement

import numpy as np
from scipy import linalg

from .point_process import IntensityField
from .randomized import coordinate_ascent, simulate_randomized
from .sde import running_reward, terminal_reward
from .stats import Estimate, combined_se, estimate

__all__ = [
    "RegressionBasis",
    "BsdeGridSolution",
    "ConstraintReport",
    "RegressionError",
    "solve_penalized",
    "solve_constrained",
    "representation_residual",
    "extract_epsilon_optimal_intensity",
    "epsilon_gap",
    "dpp_residual",
    "mark_invariance_diagnostic",
    "DEFAULT_SCHEDULE",
]

DEFAULT_SCHEDULE = (1, 2, 4, 8, 16, 32, 64)
RIDGE = 1e-8


class RegressionError(np.linalg.LinAlgError):
    """Ridge-regularized normal equations could not be solved."""


# ----------------------------------------------------------------------
# Regression bases


class _Features:
    """Feature map frozen at one grid time."""

    def __init__(self, kind, center, scale, knots, combos):
        self.kind = kind
        self.center = center
        self.scale = scale
        self.knots = knots
        self.combos = combos

    @property
    def size(self):
        if self.kind == "hat":
            return 1 if self.knots is None else self.knots.size
        return len(self.combos)

    def _hat_locate(self, x):
        k = self.knots
        z = np.clip(x[:, 0], k[0], k[-1])
        pos = (z - k[0]) / (k[1] - k[0])
        j = np.minimum(pos.astype(np.int64), k.size - 2)
        return j, pos - j

    def __call__(self, x):
        x = np.atleast_2d(x)
        if self.kind == "hat":
            if self.knots is None:
                return np.ones((x.shape[0], 1))
            j, frac = self._hat_locate(x)
            out = np.zeros((x.shape[0], self.knots.size))
            rows = np.arange(x.shape[0])
            out[rows, j] = 1.0 - frac
            out[rows, j + 1] += frac
            return out
        z = (x - self.center) / self.scale
        cols = [np.ones(x.shape[0])]
        for combo in self.combos[1:]:
            c = np.ones(x.shape[0])
            for v in combo:
                c = c * z[:, v]
            cols.append(c)
        return np.stack(cols, axis=1)

    def apply(self, x, coefs, j):
        """``φ(x) @ coefs[j]`` for ``coefs`` of shape ``(m, p, r)`` and a
        scalar or per-point action index ``j``."""
        x = np.atleast_2d(x)
        if self.kind == "hat" and self.knots is not None:
            k, frac = self._hat_locate(x)
            if np.ndim(j) == 0:
                c = coefs[j]
                lo = np.take(c, k, axis=0)
                lo += frac[:, None] * np.take(c[1:] - c[:-1], k, axis=0)
                return lo
            flat = coefs.reshape(-1, coefs.shape[2])
            idx = np.asarray(j) * coefs.shape[1] + k
            lo = np.take(flat, idx, axis=0)
            lo += frac[:, None] * (np.take(flat, idx + 1, axis=0) - lo)
            return lo
        phi = self(x)
        if np.ndim(j) == 0:
            return phi @ coefs[j]
        # one BLAS product for every action, then pick each point's row
        m, p, r = coefs.shape
        full = (phi @ coefs.transpose(1, 0, 2).reshape(p, m * r)).reshape(-1, m, r)
        return full[np.arange(phi.shape[0]), np.asarray(j)]

    def apply_all(self, x, coefs):
        """``φ(x) @ coefs[j]`` for every ``j``: shape ``(m, P, r)``."""
        x = np.atleast_2d(x)
        if self.kind == "hat" and self.knots is not None:
            k, frac = self._hat_locate(x)
            lo = np.take(coefs, k, axis=1)
            lo += frac[None, :, None] * np.take(coefs[:, 1:] - coefs[:, :-1], k, axis=1)
            return lo
        return np.matmul(self(x)[None], coefs)


@dataclass(frozen=True)
class RegressionBasis:
    """Basis for the conditional expectations.

    ``polynomial``: all monomials of total degree ``<= degree`` in the
    standardized state.  ``hat``: ``n_knots`` piecewise-linear hat functions
    on the ``[q, 1-q]`` quantile range of a one-dimensional state (constant
    extrapolation outside).  The dependence on the current action is carried
    by fitting separate coefficients per action, which is the tensor product
    with action indicators.
    """

    kind: str = "polynomial"
    degree: int = 3
    n_knots: int = 24
    quantile: float = 1e-3

    def __post_init__(self):
        if self.kind not in ("polynomial", "hat"):
            raise ValueError(f"unknown basis kind {self.kind!r}")
        if self.degree < 0 or self.n_knots < 2:
            raise ValueError("degree must be >= 0 and n_knots >= 2")

    def fit(self, x):
        """Feature map adapted to the sample ``x`` of states ``(P, n)``."""
        x = np.atleast_2d(x)
        n = x.shape[1]
        if self.kind == "hat":
            if n != 1:
                raise ValueError("the hat basis handles one-dimensional states only")
            lo, hi = np.quantile(x[:, 0], [self.quantile, 1 - self.quantile])
            if hi - lo < 1e-12 * (1 + abs(lo)):
                return _Features("hat", None, None, None, None)
            return _Features("hat", None, None, np.linspace(lo, hi, self.n_knots), None)
        center = x.mean(axis=0)
        scale = x.std(axis=0)
        degenerate = scale < 1e-12 * (1 + np.abs(center))
        scale = np.where(degenerate, 1.0, scale)
        combos = [()]
        for deg in range(1, self.degree + 1):
            for combo in combinations_with_replacement(range(n), deg):
                if not any(degenerate[v] for v in combo):
                    combos.append(combo)
        return _Features("polynomial", center, scale, None, combos)


class _Design:
    """Feature map and factored ridge normal matrix at one grid time."""

    def __init__(self, features, x, where):
        self.features = features
        A = features(x)
        P, p = A.shape
        G = A.T @ A / P
        ridge = np.full(p, RIDGE * np.trace(G) / p)
        if features.kind == "polynomial" or features.knots is None:
            ridge[0] = 0.0  # leave the intercept unshrunk so constants are fitted exactly
        M = G + np.diag(ridge)
        try:
            self.chol = linalg.cho_factor(M, check_finite=True)
        except (linalg.LinAlgError, ValueError) as exc:
            cond = np.linalg.cond(M) if np.all(np.isfinite(M)) else np.inf
            raise RegressionError(f"regression at {where} failed (condition number {cond:.3g})") from exc
        self.P = P
        if features.kind == "hat" and features.knots is not None:
            self.sparse = features._hat_locate(x)
            self.A = None
        else:
            self.sparse = None
            self.A = A

    def solve(self, Y):
        """Ridge coefficients for every column of ``Y``."""
        if self.sparse is None:
            rhs = self.A.T @ Y
        else:
            k, frac = self.sparse
            p = self.features.size
            rhs = np.empty((p, Y.shape[1]))
            for c in range(Y.shape[1]):
                y = Y[:, c]
                rhs[:, c] = np.bincount(k, (1.0 - frac) * y, p) + np.bincount(k + 1, frac * y, p)
        return linalg.cho_solve(self.chol, rhs / self.P)


def _designs(bundle, basis):
    """Per-step designs, cached on the bundle so penalties share them."""
    cache = bundle.__dict__.setdefault("_designs", {})
    if basis not in cache:
        pts = bundle.grid.points
        cache[basis] = [
            _Design(basis.fit(bundle.X[:, i]), bundle.X[:, i], f"t={pts[i]:g}") for i in range(bundle.grid.n_steps)
        ]
    return cache[basis]


# ----------------------------------------------------------------------
# Solution container


@dataclass
class BsdeGridSolution:
    """Regression representation of ``(Y^n, Z^n, U^n, K^n)`` on a grid.

    ``coef_C[i]`` has shape ``(m, p_i, m)``: for current action ``j`` the
    coefficients of ``C_i(·, j, a)`` for every ``a``.  ``coef_Z[i]`` has shape
    ``(m, p_i, d)``.  ``K`` is the per-path penalty integral on the grid.
    """

    spec: object
    n_penalty: float
    grid: object
    basis: RegressionBasis
    features: list
    coef_C: list
    coef_Z: list
    K: np.ndarray  # (P, N+1)
    Y0: float
    se: float
    G_n: float
    bundle: object = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def Y(self):
        return self.coef_C

    @property
    def estimate(self):
        return Estimate(self.Y0, self.se, self.K.shape[0])

    def continuation(self, i, x, j):
        """``C_i(x, j, ·)`` as ``(P, m)``; ``j`` scalar or per-point."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if np.ndim(j) and np.size(j) != x.shape[0]:
            j = np.broadcast_to(j, (x.shape[0],))
        return self.features[i].apply(x, self.coef_C[i], j)

    def U(self, i, x, j):
        """Jump sizes ``U_i(x, j, a)`` for all ``a`` as ``(P, m)``."""
        c = self.continuation(i, x, j)
        own = c[:, j] if np.ndim(j) == 0 else c[np.arange(c.shape[0]), np.broadcast_to(j, (c.shape[0],))]
        return c - own[:, None]

    def y(self, i, x, j):
        """``y_i(x, j)``; at ``i = N`` this is ``g(x)``."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        spec = self.spec
        if i == self.grid.n_steps:
            return terminal_reward(spec, x)
        c = self.continuation(i, x, j)
        if np.ndim(j) == 0:
            own = c[:, j]
            acts = np.full(x.shape[0], spec.space.marks[j])
        else:
            j = np.broadcast_to(np.asarray(j), (x.shape[0],))
            own = c[np.arange(c.shape[0]), j]
            acts = spec.space.marks[j]
        u = c - own[:, None]
        lam = spec.space.weights
        f = running_reward(spec, self.grid.points[i], x, acts)
        return own + self.grid.dt * (f + self.n_penalty * (np.maximum(u, 0.0) @ lam))

    def y_all(self, i, x):
        """``y_i(x, a)`` for every action ``a``: shape ``(P, m)``."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        spec = self.spec
        m = spec.space.size
        if i == self.grid.n_steps:
            return np.repeat(terminal_reward(spec, x)[:, None], m, axis=1)
        c = self.features[i].apply_all(x, self.coef_C[i])  # (m, P, m)
        own = np.stack([c[a, :, a] for a in range(m)], axis=1)  # (P, m)
        jump = c - own.T[:, :, None]
        pen = (np.maximum(jump, 0.0, out=jump) @ spec.space.weights).T
        t = self.grid.points[i]
        f = np.stack([running_reward(spec, t, x, np.full(x.shape[0], a)) for a in spec.space.marks], axis=1)
        return own + self.grid.dt * (f + self.n_penalty * pen)

    def z(self, i, x, j):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return self.features[i].apply(x, self.coef_Z[i], j)

    def Y_path(self, i):
        """Regressed ``Y_{t_i}`` along the stored base paths."""
        b = self.bundle
        return self.y(i, b.X[:, i], b.I[:, i])


@dataclass
class ConstraintReport:
    n_values: list
    Y0: list
    se: list
    G_n: list
    converged: bool = False
    warnings: list = field(default_factory=list)
    runtime_s: list = field(default_factory=list)

    @property
    def monotone(self):
        return not any("non-monotone" in w for w in self.warnings)


# ----------------------------------------------------------------------
# Solvers


def _base_bundle(spec, grid, n_paths, seed):
    return simulate_randomized(spec, grid, n_paths, seed, mode="base", store=True)


def _next_states(spec, t, x, dw, dt):
    """One Euler step from ``x`` under every action: ``(m, P, n)``."""
    P = x.shape[0]
    out = np.empty((spec.space.size, P, spec.dim_x))
    for j, a in enumerate(spec.space.marks):
        av = np.full(P, a)
        drift = np.asarray(spec.b(t, x, av), dtype=float).reshape(x.shape)
        nx = x + drift * dt
        if dw is not None:
            sig = np.asarray(spec.sigma(t, x, av), dtype=float).reshape(P, spec.dim_x, spec.dim_w)
            nx = nx + np.einsum("pnd,pd->pn", sig, dw)
        out[j] = nx
    return out


def solve_penalized(spec, n_penalty, grid=None, basis=None, n_paths=100_000, seed=0, bundle=None, n_steps=100):
    """Backward LSMC recursion for the penalized BSDE.

    Parameters
    ----------
    spec : ProblemSpec
    n_penalty : float
        Penalty ``n >= 0``.
    grid : TimeGrid, optional
        Defaults to ``spec.grid(n_steps)``; must match ``bundle.grid``.
    basis : RegressionBasis, optional
    n_paths, seed : int
        Size and seed of the base bundle when ``bundle`` is not given.
    bundle : RandomizedBundle, optional
        Base-measure paths with ``X``, ``I`` (and ``dW``) stored; reuse it to
        get common paths across penalties.

    Returns
    -------
    BsdeGridSolution
    """
    if n_penalty < 0:
        raise ValueError("n_penalty must be >= 0")
    basis = basis or RegressionBasis()
    if bundle is None:
        grid = grid or spec.grid(n_steps)
        bundle = _base_bundle(spec, grid, n_paths, seed)
    grid = bundle.grid
    space = spec.space
    lam = space.weights
    lam_tot = space.total_mass
    m = space.size
    N, dt = grid.n_steps, grid.dt
    if n_penalty * lam_tot * dt > 1 + 1e-12:
        need = int(np.ceil(n_penalty * lam_tot * grid.t_end))
        raise ValueError(
            f"penalty n={n_penalty:g} too large for the grid: n λ(A) Δ = {n_penalty * lam_tot * dt:.3g} > 1; "
            f"use at least {need} steps"
        )
    X, I = bundle.X, bundle.I
    P = X.shape[0]
    pts = grid.points

    feats = [None] * N
    coef_C = [None] * N
    coef_Z = [None] * N
    pen = np.zeros((P, N))  # n Δ Σ λ U^+ along paths
    drift_corr = np.zeros((P, N))  # q Σ λ U along paths
    run = np.zeros((P, N))
    G_steps = np.zeros(P)
    q = (-np.expm1(-lam_tot * dt)) / lam_tot

    designs = _designs(bundle, basis)
    sol = BsdeGridSolution(spec, float(n_penalty), grid, basis, feats, coef_C, coef_Z, None, 0.0, 0.0, 0.0, bundle)
    for i in range(N - 1, -1, -1):
        x = X[:, i]
        dw = None if bundle.dW is None else bundle.dW[:, i]
        nxt = _next_states(spec, pts[i], x, dw, dt)  # (m, P, n)
        # targets y_{i+1}(X^j_{i+1}, a) for every j, a
        targets = np.empty((P, m, m))
        for j in range(m):
            targets[:, j, :] = sol.y_all(i + 1, nxt[j])
        design = designs[i]
        cols = [targets.reshape(P, m * m)]
        if dw is not None:
            for j in range(m):
                cols.append(targets[:, j, j][:, None] * dw / dt)
        beta = design.solve(np.concatenate(cols, axis=1))
        feats[i] = design.features
        coef_C[i] = beta[:, : m * m].reshape(-1, m, m).transpose(1, 0, 2).copy()
        if dw is not None:
            d = dw.shape[1]
            coef_Z[i] = beta[:, m * m :].reshape(-1, m, d).transpose(1, 0, 2).copy()
        else:
            coef_Z[i] = np.zeros((m, beta.shape[0], spec.dim_w))

        u = sol.U(i, x, I[:, i])
        up = np.maximum(u, 0.0) @ lam
        pen[:, i] = n_penalty * dt * up
        drift_corr[:, i] = q * (u @ lam)
        G_steps += dt * up
        run[:, i] = running_reward(spec, pts[i], x, space.marks[I[:, i]]) * dt

    K = np.zeros((P, N + 1))
    np.cumsum(pen, axis=1, out=K[:, 1:])
    # martingale-corrected pathwise estimator of Y_0 (its SE is reported)
    pathwise = terminal_reward(spec, X[:, N]) + run.sum(axis=1) + pen.sum(axis=1) - drift_corr.sum(axis=1)
    pe = estimate(pathwise)
    sol.K = K
    sol.Y0 = float(sol.y(0, spec.x0[None, :], space.a0_index)[0])
    sol.se = pe.se
    sol.G_n = float(np.mean(G_steps))
    sol.diagnostics.update(
        Y0_pathwise=pe.value,
        G_se=estimate(G_steps).se,
        nG_n=float(n_penalty * np.mean(G_steps)),
    )
    return sol


def solve_constrained(
    spec,
    n_schedule=DEFAULT_SCHEDULE,
    stop_tol=None,
    grid=None,
    basis=None,
    n_paths=100_000,
    seed=0,
    n_steps=100,
    bundle=None,
):
    """Run :func:`solve_penalized` along an increasing penalty schedule.

    All penalties share one base bundle.  Stops when two consecutive
    ``Y0`` differ by less than ``stop_tol`` (default ``1e-3 (1 + |Y0|)``);
    pass ``stop_tol=0`` to run the full schedule.  A decrease of ``Y0`` by
    more than 2 SE is reported as a warning.

    Returns
    -------
    (BsdeGridSolution, ConstraintReport)
    """
    sched = [float(n) for n in n_schedule]
    if not sched or any(b <= a for a, b in zip(sched, sched[1:])):
        raise ValueError("n_schedule must be non-empty and strictly increasing")
    if bundle is None:
        grid = grid or spec.grid(n_steps)
        bundle = _base_bundle(spec, grid, n_paths, seed)
    rep = ConstraintReport([], [], [], [])
    sol = None
    for n in sched:
        t0 = time.perf_counter()
        sol = solve_penalized(spec, n, basis=basis, bundle=bundle)
        rep.runtime_s.append(time.perf_counter() - t0)
        if rep.Y0:
            drop = rep.Y0[-1] - sol.Y0
            if drop > 2 * max(sol.se, rep.se[-1]) and drop > 1e-12:
                msg = f"non-monotone Y0: n={rep.n_values[-1]:g} -> {n:g} decreased by {drop:.3g} (discretization artifact)"
                rep.warnings.append(msg)
                warnings.warn(msg, RuntimeWarning, stacklevel=2)
        rep.n_values.append(n)
        rep.Y0.append(sol.Y0)
        rep.se.append(sol.se)
        rep.G_n.append(sol.G_n)
        if len(rep.Y0) > 1:
            tol = 1e-3 * (1 + abs(sol.Y0)) if stop_tol is None else stop_tol
            if abs(rep.Y0[-1] - rep.Y0[-2]) < tol:
                rep.converged = True
                break
    return sol, rep


# ----------------------------------------------------------------------
# Representation, ε-optimal intensity, DPP


def epsilon_gap(u, n, nu):
    """``n u^+ - ν u``, which the ε-optimal intensity keeps below ``ε``."""
    u = np.asarray(u, dtype=float)
    return n * np.maximum(u, 0.0) - nu * u


def _epsilon_rates(u, n, eps):
    return np.where(u >= 0, float(n), np.where(u > -1, eps, -eps / np.minimum(u, -1.0)))


def extract_epsilon_optimal_intensity(solution, epsilon):
    """Intensity ``n 1{U>=0} + ε 1{-1<U<0} - ε U^{-1} 1{U<=-1}`` from ``U``.

    The field reads ``U`` through the regression at the grid step containing
    ``t``.  Its lower bound is ``1e-9 ε``; values below it (only for
    ``|U| > 1e9``) are lifted to it.
    """
    if not 0 < epsilon < 1:
        raise ValueError("epsilon must lie in (0, 1)")
    n = solution.n_penalty
    if n < epsilon:
        raise ValueError("the penalty must be at least epsilon for the field to be bounded by n")
    grid = solution.grid
    pts = grid.points
    floor = 1e-9 * epsilon

    def func(t, x, i):
        k = int(np.searchsorted(pts, t, side="right")) - 1
        k = min(max(k, 0), grid.n_steps - 1)
        u = solution.U(k, x, np.asarray(i))
        return np.maximum(_epsilon_rates(u, n, epsilon), floor)

    return IntensityField(func, floor, max(n, epsilon), solution.spec.space.size, (n, epsilon), f"eps-optimal(n={n:g},eps={epsilon:g})")


def _check_family(solution, family):
    if family.nu_max > solution.n_penalty * (1 + 1e-12):
        raise ValueError(
            f"family bound nu_max={family.nu_max:g} exceeds the penalty n={solution.n_penalty:g}"
        )


def representation_residual(spec, solution, family, budget=32, seed=1, n_paths=20_000, estimator="direct", final_paths=None):
    """``Y0 - sup_θ J^R(ν_θ)`` over a family bounded by the penalty.

    Returns an :class:`Estimate` of the residual (SE combines the BSDE and
    the gain estimate) with the maximizing ``θ`` attached in ``.theta`` of
    the returned search result, available as the second tuple element.
    """
    return dpp_residual(spec, solution, family, solution.grid.n_steps, budget, seed, n_paths, estimator, final_paths)


def _dpp_gain(spec, solution, nu, tau_index, n_paths, seed, estimator, first_index=0):
    mode = "direct" if estimator == "direct" else "reweighted"
    b = simulate_randomized(spec, solution.grid, n_paths, seed, nu, mode, first_index, stop_index=tau_index)
    cont = solution.y(tau_index, b.x_T, b.i_end) if tau_index < solution.grid.n_steps else b.terminal
    return estimate(b.weights * (b.running + cont))


def dpp_residual(spec, solution, family, tau_index, budget=32, seed=1, n_paths=20_000, estimator="direct", final_paths=None):
    """``Y0 - sup_θ E^ν[∫_0^τ f dt + Y_τ]`` at the grid time ``t_{tau_index}``.

    ``Y_τ`` is read from the solution's regression.  ``τ = 0`` gives zero
    exactly; ``τ = T`` is the representation residual.

    Returns
    -------
    (Estimate, SearchResult-like tuple ``(theta, best, trace)``)
    """
    _check_family(solution, family)
    N = solution.grid.n_steps
    if not 0 <= tau_index <= N:
        raise ValueError("tau_index outside the grid")
    if tau_index == 0:
        return Estimate(0.0, 0.0, 1), (family.theta0, Estimate(solution.Y0, 0.0, 1), [])

    def evaluate(theta):
        return _dpp_gain(spec, solution, family.build(theta), tau_index, n_paths, seed, estimator)

    theta, best, trace, _ = coordinate_ascent(family, evaluate, budget)
    if final_paths:
        best = _dpp_gain(spec, solution, family.build(theta), tau_index, final_paths, seed, estimator, first_index=n_paths)
    res = Estimate(solution.Y0 - best.value, combined_se(best, solution.estimate), best.n)
    return res, (theta, best, trace)


def mark_invariance_diagnostic(solution, n_probe=41, quantiles=(0.05, 0.95), skip_last=0):
    """Largest spread ``max_j y_i(x, j) - min_j y_i(x, j)`` over grid times
    ``i < N - skip_last`` and probe states spanning the bundle's central
    quantile range at each time."""
    b = solution.bundle
    m = solution.spec.space.size
    N = solution.grid.n_steps
    worst = 0.0
    for i in range(N - skip_last):
        xi = b.X[:, i, 0]
        lo, hi = np.quantile(xi, quantiles)
        probe = np.linspace(lo, hi, n_probe)[:, None]
        vals = np.stack([solution.y(i, probe, j) for j in range(m)], axis=1)
        worst = max(worst, float(np.max(vals.max(axis=1) - vals.min(axis=1))))
    return worst
