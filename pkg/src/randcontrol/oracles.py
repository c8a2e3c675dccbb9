"""Reference solutions and the benchmark registry.

Three benchmarks are registered:

``bangbang``
    ``dX = a dt``, ``f = 0``, ``g(x) = -|x|``, ``A = {-1, +1}``.  The value is
    ``-(|x| - (T - t))^+``.
``lqgrid``
    ``dX = a dt + σ dW``, ``f = -(x^2 + ρ a^2)``, ``g(x) = -√ρ x^2`` on a
    five-point action grid in ``[-1, 1]``.  The terminal weight makes the
    unconstrained Riccati solution stationary; the action constraint is
    handled by the finite-difference HJB solver.
``gbm_terminal``
    ``dX = μ X dt + s X dW``, ``g(x) = x``, no control dependence;
    ``E[X_T] = x0 e^{μ T}``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .point_process import ActionSpace, IntensityField
from .randomized import IntensityFamily
from .rng import TimeGrid
from .sde import ProblemSpec, simulate_ensemble
from .stats import estimate

__all__ = [
    "BenchmarkSpec",
    "FdGrid",
    "ValueSurface",
    "BENCHMARKS",
    "get_benchmark",
    "bangbang_spec",
    "lqgrid_spec",
    "gbm_terminal_spec",
    "constant_spec",
    "bangbang_family",
    "lqgrid_family",
    "bangbang_closed_form",
    "hjb_fd_solve",
    "fd_value",
    "linear_expectation_oracle",
]


# ----------------------------------------------------------------------
# Benchmark problems


def bangbang_spec(x0=0.5, horizon=1.0, weight=0.75, a0=-1.0):
    space = ActionSpace.finite([-1.0, 1.0], [weight, weight], a0)
    return ProblemSpec(
        dim_x=1,
        dim_w=1,
        b=lambda t, x, a: np.asarray(a, dtype=float).reshape(-1, 1) + 0.0 * x,
        sigma=lambda t, x, a: np.zeros((x.shape[0], 1, 1)),
        f=lambda t, x, a: np.zeros(x.shape[0]),
        g=lambda x: -np.abs(x[:, 0]),
        space=space,
        horizon=horizon,
        x0=[x0],
        lipschitz_L=1.0,
        growth_r=1.0,
        name="bangbang",
        deterministic=True,
    )


def lqgrid_spec(x0=1.0, horizon=1.0, sigma=0.5, rho=0.5, n_actions=5, a0=-1.0, weight=0.3):
    marks = np.linspace(-1.0, 1.0, n_actions)
    weight = 1.0 / n_actions if weight is None else weight
    space = ActionSpace.finite(marks, np.full(n_actions, float(weight)), a0)
    p = np.sqrt(rho)
    return ProblemSpec(
        dim_x=1,
        dim_w=1,
        b=lambda t, x, a: np.asarray(a, dtype=float).reshape(-1, 1) + 0.0 * x,
        sigma=lambda t, x, a: np.full((x.shape[0], 1, 1), sigma),
        f=lambda t, x, a: -(x[:, 0] ** 2 + rho * np.asarray(a, dtype=float) ** 2),
        g=lambda x: -p * x[:, 0] ** 2,
        space=space,
        horizon=horizon,
        x0=[x0],
        lipschitz_L=2.0,
        growth_r=2.0,
        name="lqgrid",
    )


def gbm_terminal_spec(x0=1.0, horizon=1.0, mu=0.5, vol=0.2):
    space = ActionSpace.finite([0.0], [1.0], 0.0)
    return ProblemSpec(
        dim_x=1,
        dim_w=1,
        b=lambda t, x, a: mu * x,
        sigma=lambda t, x, a: vol * x[:, :, None],
        f=lambda t, x, a: np.zeros(x.shape[0]),
        g=lambda x: x[:, 0].copy(),
        space=space,
        horizon=horizon,
        x0=[x0],
        lipschitz_L=max(mu, vol, 1.0),
        growth_r=1.0,
        name="gbm_terminal",
    )


def constant_spec(c=1.0, running=0.0, horizon=1.0, marks=(-1.0, 1.0), weights=(1.0, 1.0), sigma=0.0):
    """``b = 0``, constant ``σ``, ``f ≡ running``, ``g ≡ c``: control plays no role."""
    space = ActionSpace.finite(marks, weights, marks[0])
    return ProblemSpec(
        dim_x=1,
        dim_w=1,
        b=lambda t, x, a: np.zeros_like(x),
        sigma=lambda t, x, a: np.full((x.shape[0], 1, 1), sigma),
        f=lambda t, x, a: np.full(x.shape[0], float(running)),
        g=lambda x: np.full(x.shape[0], float(c)),
        space=space,
        horizon=horizon,
        x0=[0.0],
        lipschitz_L=max(1.0, abs(c) + abs(running)),
        name="constant",
        deterministic=sigma == 0.0,
    )


# ----------------------------------------------------------------------
# Intensity families adapted to each benchmark


def bangbang_family(space, nu_max=20.0, nu_min=1e-3):
    """Rate ``r_correct`` toward the action pushing ``x`` to 0, ``r_wrong``
    toward the other one.  ``θ = (r_correct, r_wrong)``.

    A jump to the current action changes nothing, so it gets ``r_wrong``.
    """
    neg = int(np.flatnonzero(space.marks < 0)[0])
    pos = int(np.flatnonzero(space.marks > 0)[0])
    m = space.size

    def builder(theta):
        hi, lo = float(theta[0]), float(theta[1])

        def func(t, x, i):
            correct = np.where(x[:, 0] > 0, neg, pos)
            out = np.full((x.shape[0], m), lo)
            move = correct != i
            out[np.flatnonzero(move), correct[move]] = hi
            return out

        return IntensityField(func, min(hi, lo), max(hi, lo), m, (hi, lo), f"bangbang({hi:g},{lo:g})")

    grid = [v for v in (1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0) if v <= nu_max]
    if nu_max not in grid:
        grid.append(float(nu_max))
    lows = [v for v in (nu_min, 0.01, 0.1, 0.5, 1.0) if nu_min <= v <= nu_max]
    return IntensityFamily("bangbang", builder, [1.0, 1.0], [grid, lows], nu_min, nu_max)


def lqgrid_family(space, nu_max=1000.0, nu_min=1e-3):
    """Rate ``r_on`` toward the grid action nearest to ``clip(-k x)`` (unless
    it is already the current action), ``r_off`` toward all others.
    ``θ = (k, r_on, r_off)``."""
    marks = space.marks
    m = space.size
    lo_a, hi_a = marks.min(), marks.max()

    def builder(theta):
        gain, on, off = float(theta[0]), float(theta[1]), float(theta[2])

        def func(t, x, i):
            target = np.clip(-gain * x[:, 0], lo_a, hi_a)
            j = np.argmin(np.abs(target[:, None] - marks[None, :]), axis=1)
            out = np.full((x.shape[0], m), off)
            move = j != i
            out[np.flatnonzero(move), j[move]] = on
            return out

        return IntensityField(func, min(on, off), max(on, off), m, (gain, on, off), f"lqgrid({gain:g},{on:g},{off:g})")

    gains = [0.0, 0.5, 1.0, 1.4, 2.0, 3.0]
    ons = [v for v in (1.0, 5.0, 20.0, 100.0, 300.0, 1000.0) if v <= nu_max]
    offs = [v for v in (nu_min, 0.01, 0.1, 1.0) if nu_min <= v <= nu_max]
    return IntensityFamily("lqgrid", builder, [1.0, 1.0, 1.0], [gains, ons, offs], nu_min, nu_max)


# ----------------------------------------------------------------------
# Registry


@dataclass
class BenchmarkSpec:
    name: str
    parameters: dict
    oracle_kind: str
    build: Callable
    family: Callable | None = None
    fd_range: tuple = (-4.0, 4.0)
    defaults: dict = field(default_factory=dict)

    def problem(self, **overrides):
        return self.build(**{**self.parameters, **overrides})


BENCHMARKS = {
    "bangbang": BenchmarkSpec(
        "bangbang",
        {"x0": 0.5, "horizon": 1.0, "weight": 0.75, "a0": -1.0},
        "closed_form",
        bangbang_spec,
        bangbang_family,
        (-4.0, 4.0),
        {"nu_max": 20.0, "basis": "hat", "degree": 3},
    ),
    "lqgrid": BenchmarkSpec(
        "lqgrid",
        {"x0": 1.0, "horizon": 1.0, "sigma": 0.5, "rho": 0.5, "n_actions": 5, "a0": -1.0, "weight": 0.3},
        "fd_pde",
        lqgrid_spec,
        lqgrid_family,
        (-5.0, 5.0),
        {"nu_max": 1000.0, "basis": "polynomial", "degree": 3},
    ),
    "gbm_terminal": BenchmarkSpec(
        "gbm_terminal",
        {"x0": 1.0, "horizon": 1.0, "mu": 0.5, "vol": 0.2},
        "linear_expectation",
        gbm_terminal_spec,
        None,
        (0.0, 8.0),
        {"nu_max": 20.0, "basis": "polynomial", "degree": 3},
    ),
}


def get_benchmark(name):
    try:
        return BENCHMARKS[name]
    except KeyError:
        raise KeyError(f"unknown benchmark {name!r}; registered: {sorted(BENCHMARKS)}") from None


# ----------------------------------------------------------------------
# Closed form


def bangbang_closed_form(x0, t, T):
    """Value ``-(|x0| - (T - t))^+`` of the bang-bang benchmark."""
    return 0.0 - np.maximum(np.abs(x0) - (T - t), 0.0)


# ----------------------------------------------------------------------
# Finite-difference HJB


@dataclass
class FdGrid:
    """Space-time grid of the explicit scheme.  ``nt=None`` picks the
    smallest stable number of time steps."""

    x_lo: float
    x_hi: float
    nx: int
    nt: int | None = None

    def __post_init__(self):
        if not self.x_hi > self.x_lo or self.nx < 3:
            raise ValueError("FdGrid needs x_hi > x_lo and nx >= 3")

    @property
    def x(self):
        return np.linspace(self.x_lo, self.x_hi, self.nx)

    @property
    def dx(self):
        return (self.x_hi - self.x_lo) / (self.nx - 1)


@dataclass
class ValueSurface:
    t: np.ndarray
    x: np.ndarray
    v: np.ndarray  # (nt+1, nx)
    policy: np.ndarray | None = None  # (nt, nx) maximizing action index

    def at(self, t, x):
        """Linear interpolation in ``x`` at the nearest time level."""
        k = int(np.argmin(np.abs(self.t - t)))
        return float(np.interp(x, self.x, self.v[k]))


MAX_FD_STEPS = 2_000_000


def _coefficients(spec, t, x, actions):
    xs = x[:, None]
    out_b, out_s, out_f = [], [], []
    for a in actions:
        av = np.full(x.size, a)
        out_b.append(np.asarray(spec.b(t, xs, av), dtype=float).reshape(x.size))
        out_s.append(np.asarray(spec.sigma(t, xs, av), dtype=float).reshape(x.size))
        out_f.append(np.asarray(spec.f(t, xs, av), dtype=float).reshape(x.size))
    return np.array(out_b), np.array(out_s), np.array(out_f)


def _generator(b, s, f, fwd, bwd, lap, dx):
    # central drift differences where they keep the scheme monotone, upwind elsewhere
    central = np.abs(b) * dx <= s**2
    drift = np.where(central, b * 0.5 * (fwd + bwd), np.maximum(b, 0) * fwd - np.maximum(-b, 0) * bwd)
    return drift + 0.5 * s**2 * lap + f


def hjb_fd_solve(spec, grid: FdGrid, action_grid=None, policy=None):
    """Explicit monotone scheme for ``-v_t = sup_a [b v_x + σ²/2 v_xx + f]``.

    Drift terms use central differences where ``|b| Δx <= σ²`` (still
    monotone there) and upwind differences elsewhere.

    ``v(T, ·) = g``; at the two spatial boundary nodes ``v`` is clamped to
    ``g``.  With ``policy(t, x) -> action values`` the sup is replaced by
    evaluation of that feedback (policy evaluation).

    Raises
    ------
    ValueError
        If ``nt`` violates ``Δt (max|b|/Δx + max σ²/Δx²) <= 1``; the message
        gives the required ``nt``.  Also raised when the stable ``nt`` exceeds
        ``MAX_FD_STEPS``.
    """
    if spec.dim_x != 1:
        raise ValueError("the finite-difference oracle handles one-dimensional states only")
    actions = spec.space.marks if action_grid is None else np.asarray(action_grid, dtype=float)
    x = grid.x
    dx = grid.dx
    T = spec.horizon
    # stability from coefficient bounds over the grid and horizon
    bmax, smax = 0.0, 0.0
    for t in np.linspace(0.0, T, 5):
        b, s, _ = _coefficients(spec, t, x, actions)
        bmax = max(bmax, float(np.max(np.abs(b))))
        smax = max(smax, float(np.max(s**2)))
    rate = bmax / dx + smax / dx**2
    nt_min = max(1, int(np.ceil(T * rate - 1e-9)))
    if nt_min > MAX_FD_STEPS:
        raise ValueError(f"explicit scheme needs nt={nt_min} time steps, above the limit {MAX_FD_STEPS}")
    nt = nt_min if grid.nt is None else int(grid.nt)
    if nt < nt_min:
        raise ValueError(f"explicit scheme unstable: nt={nt} but at least nt={nt_min} is required")
    dt = T / nt
    ts = np.linspace(0.0, T, nt + 1)
    g = np.asarray(spec.g(x[:, None]), dtype=float)
    V = np.empty((nt + 1, x.size))
    pol = np.zeros((nt, x.size), dtype=np.int64)
    V[-1] = g
    v = g.copy()
    for k in range(nt - 1, -1, -1):
        t = ts[k]
        fwd = np.zeros_like(v)
        bwd = np.zeros_like(v)
        lap = np.zeros_like(v)
        fwd[1:-1] = (v[2:] - v[1:-1]) / dx
        bwd[1:-1] = (v[1:-1] - v[:-2]) / dx
        lap[1:-1] = (v[2:] - 2 * v[1:-1] + v[:-2]) / dx**2
        if policy is None:
            b, s, f = _coefficients(spec, t, x, actions)
            ham = _generator(b, s, f, fwd, bwd, lap, dx)
            j = np.argmax(ham, axis=0)
            h = ham[j, np.arange(x.size)]
            pol[k] = j
        else:
            a = np.asarray(policy(t, x[:, None]), dtype=float).reshape(x.size)
            xs = x[:, None]
            b = np.asarray(spec.b(t, xs, a), dtype=float).reshape(x.size)
            s = np.asarray(spec.sigma(t, xs, a), dtype=float).reshape(x.size)
            f = np.asarray(spec.f(t, xs, a), dtype=float).reshape(x.size)
            h = _generator(b, s, f, fwd, bwd, lap, dx)
        v = v + dt * h
        v[0], v[-1] = g[0], g[-1]
        V[k] = v
    return ValueSurface(ts, x, V, pol if policy is None else None)


def fd_value(spec, x_range=(-4.0, 4.0), nx=161, action_grid=None, policy=None, x=None):
    """``v(0, x0)`` and its grid error ``|v_nx - v_{nx/2}|``."""
    x = float(spec.x0[0]) if x is None else x
    fine = hjb_fd_solve(spec, FdGrid(x_range[0], x_range[1], nx), action_grid, policy)
    coarse = hjb_fd_solve(spec, FdGrid(x_range[0], x_range[1], (nx - 1) // 2 + 1), action_grid, policy)
    v = fine.at(0.0, x)
    return v, abs(v - coarse.at(0.0, x))


# ----------------------------------------------------------------------
# Linear expectation


def linear_expectation_oracle(spec, n_paths=100_000, seed=0, n_steps=100, check=True):
    """Plain Monte-Carlo ``E[g(X_T) + ∫ f dt]`` for a control-free problem.

    ``check`` probes that ``b``, ``σ`` and ``f`` do not depend on the action.
    """
    if check:
        _assert_control_free(spec)
    grid = TimeGrid.uniform(spec.horizon, n_steps)
    a0 = spec.space.a0
    ens = simulate_ensemble(spec, lambda t, x: np.full(x.shape[0], a0), grid, n_paths, seed)
    return estimate(ens.payoff)


def _assert_control_free(spec, n_probe=16):
    x = np.linspace(-2, 2, n_probe)[:, None] + spec.x0[None, :]
    t = 0.5 * spec.horizon
    ref = None
    for a in spec.space.marks:
        av = np.full(n_probe, a)
        vals = (spec.b(t, x, av), spec.sigma(t, x, av), spec.f(t, x, av))
        vals = [np.asarray(v, dtype=float) for v in vals]
        if ref is None:
            ref = vals
        elif any(not np.allclose(u, v) for u, v in zip(ref, vals)):
            raise ValueError("linear-expectation oracle needs b, sigma and f independent of the action")
