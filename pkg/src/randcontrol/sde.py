"""Euler-Maruyama simulation of controlled state equations.

Coefficients are vectorized over paths: ``b(t, x, a)`` maps states ``(P, n)``
and action values ``(P,)`` to ``(P, n)``; ``sigma`` returns ``(P, n, d)``;
``f(t, x, a)`` and ``g(x)`` return ``(P,)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .point_process import ActionSpace, JumpControlPath
from .rng import BrownianPath, PathStreams, RngStream, TimeGrid, brownian_increments
from .stats import estimate

__all__ = [
    "ProblemSpec",
    "StatePath",
    "StateEnsemble",
    "SimulationError",
    "euler_step",
    "simulate_controlled",
    "simulate_ensemble",
    "gain_samples",
    "moment_check",
    "check_assumptions",
]


class SimulationError(ArithmeticError):
    """Non-finite coefficient or state during simulation."""


@dataclass
class ProblemSpec:
    dim_x: int
    dim_w: int
    b: Callable
    sigma: Callable
    f: Callable
    g: Callable
    space: ActionSpace
    horizon: float
    x0: np.ndarray
    lipschitz_L: float = 1.0
    growth_r: float = 2.0
    name: str = "custom"
    deterministic: bool = False  # sigma identically zero: skip noise draws

    def __post_init__(self):
        self.x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))
        if self.x0.shape != (self.dim_x,):
            raise ValueError(f"x0 must have shape ({self.dim_x},)")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")

    def grid(self, n_steps):
        return TimeGrid.uniform(self.horizon, n_steps)


@dataclass
class StatePath:
    grid: TimeGrid
    states: np.ndarray  # (N+1, n)
    control_trace: np.ndarray  # (N,) action values used on each step


@dataclass
class StateEnsemble:
    grid: TimeGrid
    X: np.ndarray | None  # (P, N+1, n) when stored
    actions: np.ndarray | None  # (P, N) when stored
    running: np.ndarray  # ∫ f dt, left-endpoint quadrature
    terminal: np.ndarray  # g(X_T)
    x_T: np.ndarray
    sup_norm: np.ndarray = field(default=None)  # max_t |X_t|

    @property
    def payoff(self):
        return self.running + self.terminal


def _first_bad(t, x, a, values):
    bad = ~np.all(np.isfinite(values.reshape(values.shape[0], -1)), axis=1)
    p = int(np.flatnonzero(bad)[0])
    return f"t={t:g}, x={x[p].tolist()}, a={float(np.ravel(a)[p]) if np.size(a) else a}"


def euler_step(spec, t, x, a, dW, dt):
    """One explicit Euler step for all paths."""
    drift = np.asarray(spec.b(t, x, a), dtype=float).reshape(x.shape)
    if not np.all(np.isfinite(drift)):
        raise SimulationError("non-finite drift at " + _first_bad(t, x, a, drift))
    x_new = x + drift * dt
    if dW is not None:
        sig = np.asarray(spec.sigma(t, x, a), dtype=float).reshape(x.shape[0], spec.dim_x, spec.dim_w)
        if not np.all(np.isfinite(sig)):
            raise SimulationError("non-finite diffusion at " + _first_bad(t, x, a, sig))
        x_new = x_new + np.einsum("pnd,pd->pn", sig, dW)
    if not np.all(np.isfinite(x_new)):
        raise SimulationError("non-finite state after step at " + _first_bad(t, x, a, x_new))
    return x_new


def running_reward(spec, t, x, a):
    r = np.asarray(spec.f(t, x, a), dtype=float).reshape(x.shape[0])
    if not np.all(np.isfinite(r)):
        raise SimulationError("non-finite running reward at " + _first_bad(t, x, a, r))
    return r


def terminal_reward(spec, x):
    r = np.asarray(spec.g(x), dtype=float).reshape(x.shape[0])
    if not np.all(np.isfinite(r)):
        raise SimulationError("non-finite terminal reward")
    return r


def _bind(control, spec, grid, P):
    """Turn any supported control into ``fn(i, t, x) -> action values``."""
    if hasattr(control, "bind"):
        return control.bind(spec, grid)
    if isinstance(control, JumpControlPath):
        vals = control.values_on_grid(grid)
        return lambda i, t, x: np.full(x.shape[0], vals[i])
    if isinstance(control, np.ndarray):
        vals = control if control.ndim == 2 else np.broadcast_to(control, (P, control.size))
        return lambda i, t, x: vals[:, i]
    if callable(control):
        return lambda i, t, x: np.broadcast_to(np.asarray(control(t, x), dtype=float), (x.shape[0],))
    raise TypeError(f"unsupported control {type(control)!r}")


def _simulate(spec, control, grid, P, noise, store):
    """Core loop; ``noise(i)`` returns the ``(P, d)`` increments of step i."""
    fn = _bind(control, spec, grid, P)
    pts, dt = grid.points, grid.dt
    x = np.tile(spec.x0, (P, 1))
    X = np.empty((P, grid.n_steps + 1, spec.dim_x)) if store else None
    acts = np.empty((P, grid.n_steps)) if store else None
    if store:
        X[:, 0] = x
    running = np.zeros(P)
    sup = np.linalg.norm(x, axis=1)
    for i in range(grid.n_steps):
        a = np.asarray(fn(i, pts[i], x), dtype=float)
        running += running_reward(spec, pts[i], x, a) * dt
        x = euler_step(spec, pts[i], x, a, noise(i), dt)
        np.maximum(sup, np.linalg.norm(x, axis=1), out=sup)
        if store:
            X[:, i + 1] = x
            acts[:, i] = a
    return StateEnsemble(grid, X, acts, running, terminal_reward(spec, x), x, sup)


def simulate_controlled(spec, control, w: BrownianPath):
    """Single-path Euler scheme driven by the increments of ``w``.

    ``control`` is a feedback ``(t, x) -> action``, a
    :class:`JumpControlPath` (read at the left endpoint of each step) or a
    simple control exposing ``bind``.
    """
    grid = w.grid
    noise = None if spec.deterministic else (lambda i: w.increments[i][None, :])
    ens = _simulate(spec, control, grid, 1, noise or (lambda i: None), True)
    return StatePath(grid, ens.X[0], ens.actions[0])


def simulate_ensemble(spec, control, grid, n_paths, seed, first_index=0, store=False):
    """Vectorized Euler scheme; path ``p`` uses stream ``first_index + p``."""
    streams = PathStreams(seed, n_paths, first_index)
    if spec.deterministic:
        noise = lambda i: None  # noqa: E731
    else:
        noise = lambda i: brownian_increments(grid, spec.dim_w, streams, step=i)  # noqa: E731
    return _simulate(spec, control, grid, n_paths, noise, store)


def gain_samples(spec, control, grid, n_paths, seed):
    return simulate_ensemble(spec, control, grid, n_paths, seed).payoff


def moment_check(ensemble, p):
    """Monte-Carlo estimate of ``E[sup_t |X_t|^p]``."""
    if p < 2:
        raise ValueError("moment order p must be >= 2")
    if isinstance(ensemble, StateEnsemble):
        sup = ensemble.sup_norm if ensemble.X is None else np.max(np.linalg.norm(ensemble.X, axis=2), axis=1)
    else:
        arr = np.asarray(ensemble, dtype=float)
        if arr.size == 0:
            raise ValueError("empty ensemble")
        if arr.ndim == 2:
            arr = arr[:, :, None]
        sup = np.max(np.linalg.norm(arr, axis=2), axis=1)
    if sup.size == 0:
        raise ValueError("empty ensemble")
    return float(np.mean(sup**p))


def check_assumptions(spec, n_probe=200, seed=0, x_scale=3.0):
    """Probe the Lipschitz and growth constants declared on ``spec``.

    Returns the largest observed Lipschitz quotient and growth ratio;
    raises ``ValueError`` if either exceeds ``lipschitz_L``.
    """
    s = RngStream(seed, 0)
    n = spec.dim_x
    u = s.uniform(n_probe * (2 + 2 * n)).reshape(n_probe, 2 + 2 * n)
    t = spec.horizon * u[:, 0]
    a = spec.space.marks[np.minimum((u[:, 1] * spec.space.size).astype(int), spec.space.size - 1)]
    x = x_scale * (2 * u[:, 2 : 2 + n] - 1)
    y = x_scale * (2 * u[:, 2 + n :] - 1)
    lip, growth = 0.0, 0.0
    for k in range(n_probe):
        xk, yk, ak = x[k : k + 1], y[k : k + 1], a[k : k + 1]
        dx = np.linalg.norm(xk - yk)
        if dx > 0:
            db = np.linalg.norm(spec.b(t[k], xk, ak) - spec.b(t[k], yk, ak))
            ds = np.linalg.norm(np.asarray(spec.sigma(t[k], xk, ak)) - np.asarray(spec.sigma(t[k], yk, ak)))
            lip = max(lip, db / dx, ds / dx)
        bound = 1.0 + np.linalg.norm(xk) ** spec.growth_r
        fk = abs(float(np.ravel(spec.f(t[k], xk, ak))[0])) + abs(float(np.ravel(spec.g(xk))[0]))
        growth = max(growth, fk / bound)
    if lip > spec.lipschitz_L * (1 + 1e-9) or growth > spec.lipschitz_L * (1 + 1e-9):
        raise ValueError(
            f"{spec.name}: probed Lipschitz quotient {lip:.3g} / growth ratio {growth:.3g} exceed L={spec.lipschitz_L}"
        )
    return lip, growth
