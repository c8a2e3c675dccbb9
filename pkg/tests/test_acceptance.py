"""Acceptance criteria at their stated scale and tolerances.

Each test records a PASS/FAIL line through the ``verdict`` fixture; the
lines are printed together at the end of the session.
"""

import json
import time

import numpy as np
import pytest
from scipy import stats

from randcontrol.bsde import RegressionBasis, dpp_residual, extract_epsilon_optimal_intensity, solve_constrained, solve_penalized
from randcontrol.cli import main, run_campaign
from randcontrol.config import validate_config
from randcontrol.control import value_brute_force
from randcontrol.oracles import (
    bangbang_closed_form,
    bangbang_family,
    bangbang_spec,
    constant_spec,
    gbm_terminal_spec,
    linear_expectation_oracle,
    lqgrid_family,
    lqgrid_spec,
)
from randcontrol.point_process import (
    ActionSpace,
    IntensityField,
    StepControl,
    approximation_distance,
    compensator_residual,
    girsanov_weights,
    lift_measure,
    sample_poisson_ensemble,
    sample_poisson_mpp,
    time_change_sequence,
)
from randcontrol.randomized import optimize_intensity, randomized_gain_reweighted, simulate_randomized
from randcontrol.rng import RngStream, TimeGrid
from randcontrol.sde import terminal_reward
from randcontrol.stats import estimate

TWO = ActionSpace.finite([-1.0, 1.0], [1.0, 1.0], -1.0)  # λ(A) = 2
GRID = TimeGrid.uniform(1.0, 50)
HAT = RegressionBasis("hat", n_knots=24)
PATHS = 100_000


def sine_field():
    return IntensityField(
        lambda t, x, i: np.column_stack([np.full(np.size(i), 1 + 0.5 * np.sin(t)), np.ones(np.size(i))]),
        0.5,
        1.5,
        2,
        name="sine",
    )


def battery():
    return [
        IntensityField.constant(0.3, 2),
        IntensityField.constant(1.7, 2),
        sine_field(),
        IntensityField.pointwise(lambda t, x, i, a: np.where(a == i, 0.4, 2.5), 2, 0.4, 2.5, name="switchy"),
        IntensityField.pointwise(lambda t, x, i, a: np.where(a == 1, 0.5 + t, 1.2), 2, 0.5, 1.5, name="ramp"),
    ]


def two_action_spec():
    return constant_spec(marks=(-1.0, 1.0), weights=(1.0, 1.0))


# ----------------------------------------------------------------------


def test_c01_girsanov_martingale(verdict):
    ens = sample_poisson_ensemble(TWO, 1.0, PATHS, 101)
    worst = []
    for nu in battery():
        w = girsanov_weights(ens, nu, GRID)
        e = estimate(w)
        worst.append(abs(e.value - 1.0) / e.se)
    verdict(1, max(worst) <= 3.0, f"max |mean κ_T - 1| / SE over 5 fields = {max(worst):.2f} (<= 3)")


def _functionals(times, marks, T=1.0):
    t = np.where(np.isfinite(times), times, T)
    has = np.isfinite(times)
    one = (marks == 1) & has
    out = []
    for k in range(3):
        out += [has[:, k], t[:, k], one[:, k], np.cos(2 * np.pi * t[:, k]) * has[:, k]]
    out += [
        t[:, 0] <= 0.5,
        has[:, 1] & (t[:, 1] - t[:, 0] <= 0.3),
        has[:, 1] & (marks[:, 0] == marks[:, 1]),
        has[:, 2] & (marks[:, 1] == marks[:, 2]),
        t[:, 0] * one[:, 0],
        (t[:, 1] - t[:, 0]) * has[:, 1],
        np.sin(t[:, 2]) * one[:, 2],
        has[:, 0] & (marks[:, 0] == 0),
    ]
    return np.array(out, dtype=float)


def test_c02_time_change_law_equivalence(verdict):
    nu = battery()[4]
    spec = two_action_spec()
    base = sample_poisson_ensemble(TWO, 1.0, PATHS, 201)
    w = girsanov_weights(base, nu, GRID)
    fa = _functionals(*base.first_events(3)) * w
    changed = simulate_randomized(spec, GRID, PATHS, 202, nu, "direct", record_events=True).events
    fb = _functionals(*changed.first_events(3))
    # the vectorized direct mode is the clock-inversion construction; confirm on a subsample
    lifted = lift_measure(TWO)
    same = True
    for p in range(50):
        ref = time_change_sequence(sample_poisson_mpp(TWO, nu.nu_max, RngStream(202, p)), lifted, nu, GRID)
        got = changed.path(p)
        same &= len(ref) == len(got) and np.allclose(ref.times, got.times, atol=1e-8) and np.array_equal(ref.marks, got.marks)
    z = np.abs(fa.mean(axis=1) - fb.mean(axis=1)) / np.hypot(fa.std(axis=1), fb.std(axis=1)) * np.sqrt(PATHS)
    verdict(2, bool(same) and z.max() <= 3.0, f"20 functionals: max z = {z.max():.2f} (<= 3); clock inversion reproduced on 50 paths: {bool(same)}")


def test_c03_poisson_and_watanabe(verdict):
    path = sample_poisson_mpp(TWO, 6000.0, RngStream(301, 0))
    gaps = np.diff(np.concatenate([[0.0], path.times]))[:10_000]
    p = stats.kstest(gaps, "expon", args=(0, 1 / TWO.total_mass)).pvalue
    c = 3.0
    counts = simulate_randomized(two_action_spec(), GRID, PATHS, 302, IntensityField.constant(c, 2), "direct").counts
    e = estimate(counts.astype(float))
    z = abs(e.value - c * TWO.total_mass) / e.se
    verdict(3, gaps.size == 10_000 and p > 0.01 and z <= 3.0, f"KS p = {p:.3f} (> 0.01); count z under ν≡{c:g} = {z:.2f} (<= 3)")


def _predictable_fields():
    return [
        lambda t, h, a: np.ones(np.shape(h.count)),
        lambda t, h, a: np.broadcast_to(np.asarray(t, float) * (np.asarray(a) == 0), np.shape(h.count)).astype(float),
        lambda t, h, a: np.broadcast_to(np.asarray(a) == 1, np.shape(h.count)).astype(float),
        lambda t, h, a: 1.0 / (1.0 + h.count),
        lambda t, h, a: (h.action == a).astype(float),
        lambda t, h, a: np.exp(-(t - h.last_time)),
        lambda t, h, a: np.sin(3 * np.asarray(t)) * np.where(np.asarray(a) == 1, 1.0, -1.0) + 0 * h.count,
        lambda t, h, a: (h.count < 2).astype(float),
        lambda t, h, a: np.asarray(t, float) ** 2 + 0 * h.count,
        lambda t, h, a: (h.action != a) * (1.0 + np.asarray(t)),
    ]


def test_c04_smoothing_formula(verdict):
    n = 50_000
    ens = sample_poisson_ensemble(TWO, 1.0, n, 401)
    nu = sine_field()
    w = girsanov_weights(ens, nu, GRID)
    unit = IntensityField.constant(1.0, 2)
    z = []
    for H in _predictable_fields():
        r, se = compensator_residual(ens, unit, H, GRID)
        z.append(abs(r) / se)
        r, se = compensator_residual(ens, nu, H, GRID, weights=w)
        z.append(abs(r) / se)
    verdict(4, max(z) <= 3.0, f"10 fields, base and reweighted: max |residual| / SE = {max(z):.2f} (<= 3)")


def test_c05_approximation(verdict):
    three = ActionSpace.finite([0.0, 1.0, 2.0], [1.0, 1.0, 1.0], 0.0)
    alpha = StepControl([0.0, 0.3, 0.6, 1.0], [0, 2, 1])
    d = [approximation_distance(alpha, three, m, m, 4000, 501)[0] for m in (3, 6, 12)]
    decreasing = d[1].value < d[0].value and d[2].value < d[1].value
    m = 4
    _, lag = approximation_distance(alpha, three, m, 1000, 10_000, 502)
    bound = 1 / m + alpha.horizon / m
    verdict(
        5,
        decreasing and lag.value <= bound + 3 * lag.se,
        f"distance {d[0].value:.4f} > {d[1].value:.4f} > {d[2].value:.4f}; lag {lag.value:.4f} <= {bound:.3f} + 3 SE",
    )


# ----------------------------------------------------------------------
# Value-equivalence on the bang-bang benchmark; the x0 = 0.5 run also
# provides the penalty schedule for the structural criteria.


@pytest.fixture(scope="module")
def bangbang_runs():
    t0 = time.perf_counter()
    runs = {}
    for x0 in (0.0, 0.5, 2.0):
        spec = bangbang_spec(x0=x0)
        brute = value_brute_force(spec, 4, n_paths=PATHS, n_steps=100).value
        rand = optimize_intensity(spec, bangbang_family(spec.space), budget=40, n_paths=20_000, seed=1, estimator="direct", final_paths=PATHS).value
        bundle = simulate_randomized(spec, spec.grid(100), PATHS, 2, mode="base", store=True)
        if x0 == 0.5:
            sol, rep = solve_constrained(spec, (1, 2, 4, 8, 16, 32, 64), stop_tol=0, basis=HAT, bundle=bundle)
        else:
            sol, rep = solve_penalized(spec, 64, basis=HAT, bundle=bundle), None
        runs[x0] = dict(spec=spec, brute=brute, rand=rand, sol=sol, rep=rep, bundle=bundle)
    runs["runtime"] = time.perf_counter() - t0
    return runs


def test_c06_bangbang_triangle(verdict, bangbang_runs):
    ok = bangbang_runs["runtime"] <= 600
    parts = []
    for x0 in (0.0, 0.5, 2.0):
        r = bangbang_runs[x0]
        v = bangbang_closed_form(x0, 0.0, 1.0)
        e = (abs(r["brute"].value - v), abs(r["rand"].value - v), abs(r["sol"].Y0 - v))
        ok &= e[0] <= 0.05 and e[1] <= 0.1 and e[2] <= 0.1
        parts.append(f"x0={x0:g}: errors {e[0]:.3f}/{e[1]:.3f}/{e[2]:.3f}")
    verdict(6, ok, "; ".join(parts) + f" (<= 0.05/0.1/0.1); {bangbang_runs['runtime']:.0f}s (<= 600)")


def test_c07_lq_triangle(verdict):
    report = run_campaign(validate_config('{"benchmark": "lqgrid"}'))
    parts = [f"{r.estimate} {r.value:.4f} (err {r.error:.4f}, tol {r.tolerance:.4f})" for r in report.rows]
    verdict(7, report.passed, f"oracle {report.rows[0].oracle:.4f}: " + ", ".join(parts))


def test_c08_penalized_structure(verdict, bangbang_runs):
    r = bangbang_runs[0.5]
    rep, sol, spec = r["rep"], r["sol"], r["spec"]
    y, se, g = rep.Y0, rep.se, rep.G_n
    mono = all(b >= a - 2 * max(s0, s1) for a, b, s0, s1 in zip(y, y[1:], se, se[1:]))
    g_mono = all(b <= a * (1 + 1e-9) for a, b in zip(g, g[1:]))
    x = r["bundle"].X[:, -1]
    term = all(np.array_equal(sol.y(sol.grid.n_steps, x, j), terminal_reward(spec, x)) for j in range(spec.space.size))
    k_mono = bool(np.all(np.diff(sol.K, axis=1) >= 0))
    ok = mono and g_mono and g[-1] <= g[0] / 4 and term and k_mono
    verdict(8, ok, f"Y0 {y[0]:.4f} -> {y[-1]:.4f} monotone={mono}; G {g[0]:.4f} -> {g[-1]:.4f} nonincreasing={g_mono}; terminal={term}; K monotone={k_mono}")


def test_c09_linear_sanity(verdict):
    spec = gbm_terminal_spec()
    sol = solve_penalized(spec, 0, n_paths=PATHS, seed=901)
    ref = linear_expectation_oracle(spec, n_paths=PATHS, seed=902)
    z = abs(sol.Y0 - ref.value) / np.hypot(sol.se, ref.se)
    const = solve_penalized(constant_spec(c=2.5), 50, n_paths=1000, n_steps=100)
    exact = const.Y0 == pytest.approx(2.5, abs=1e-12) and np.all(np.abs(const.K) <= 1e-12)
    verdict(9, z <= 3 and exact, f"n=0: Y0 {sol.Y0:.4f} vs linear {ref.value:.4f}, z = {z:.2f}; constant g: Y0 {const.Y0!r}, max K {np.abs(const.K).max():.1g}")


def test_c10_epsilon_optimal_extraction(verdict, bangbang_runs):
    eps = 1e-2
    parts = []
    ok = True
    lq = lqgrid_spec()
    lq_bundle = simulate_randomized(lq, lq.grid(100), PATHS, 3, mode="base", store=True)
    cases = [("bangbang", bangbang_runs[0.5]["spec"], bangbang_runs[0.5]["bundle"], HAT), ("lqgrid", lq, lq_bundle, RegressionBasis())]
    for name, spec, bundle, basis in cases:
        for n in (1, 2):
            sol = solve_penalized(spec, n, basis=basis, bundle=bundle)
            g = randomized_gain_reweighted(spec, extract_epsilon_optimal_intensity(sol, eps), PATHS, 1001)
            bound = sol.Y0 - eps * spec.horizon * spec.space.total_mass - 3 * np.hypot(g.se, sol.se)
            ok &= g.value >= bound
            parts.append(f"{name} n={n}: gain {g.value:.4f} >= {bound:.4f}")
    verdict(10, ok, "; ".join(parts))


def test_c11_dpp_residuals(verdict, bangbang_runs):
    r = bangbang_runs[0.5]
    sol, spec = r["sol"], r["spec"]
    fam = bangbang_family(spec.space, nu_max=20.0)
    N = sol.grid.n_steps
    ok, parts = True, []
    for tau in (0, N // 2, N):
        res, _ = dpp_residual(spec, sol, fam, tau, budget=30, n_paths=20_000, seed=1101, final_paths=PATHS)
        ok &= res.value >= -3 * res.se and abs(res.value) <= 0.1
        parts.append(f"τ={tau / N:g}T: {res.value:.4f} ± {res.se:.1g}")
    lq = lqgrid_spec()
    lq_sol = solve_penalized(lq, 64, n_paths=30_000, seed=1102)
    lq_fam = lqgrid_family(lq.space, nu_max=64.0)
    for tau in (N // 2, N):
        res, _ = dpp_residual(lq, lq_sol, lq_fam, tau, budget=20, n_paths=10_000, seed=1103, final_paths=30_000)
        ok &= res.value >= -3 * res.se
        parts.append(f"lqgrid τ={tau / N:g}T: {res.value:.4f} ± {res.se:.1g}")
    verdict(11, ok, "bangbang " + "; ".join(parts))


def test_c12_reproducibility(verdict, tmp_path):
    cfg = {"benchmark": "bangbang", "n_paths": 20_000, "bsde": {"schedule": [1, 4, 16]}, "randomized": {"budget": 10, "search_paths": 5000}}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    outs = [tmp_path / "a", tmp_path / "b"]
    codes = [main(["campaign", "--config", str(path), "--seed", "12", "--out", str(o)]) for o in outs]
    csvs = sorted(p.name for p in outs[0].glob("*.csv") if p.name != "bsde_timing.csv")
    same = all((outs[0] / n).read_bytes() == (outs[1] / n).read_bytes() for n in csvs)
    verdict(12, same and len(csvs) == 5 and codes[0] == codes[1], f"{len(csvs)} CSV files byte-identical across two runs: {same}")
