import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from randcontrol.control import value_brute_force
from randcontrol.oracles import (
    BENCHMARKS,
    FdGrid,
    bangbang_closed_form,
    bangbang_spec,
    constant_spec,
    fd_value,
    gbm_terminal_spec,
    get_benchmark,
    hjb_fd_solve,
    linear_expectation_oracle,
    lqgrid_spec,
)


def _all_sign_policies_best(x0, n_steps=20, T=1.0):
    # every open-loop sign sequence on the grid; x_T depends only on the number of +1 moves
    codes = np.arange(2**n_steps, dtype=np.uint32)
    ups = np.zeros(codes.size, dtype=np.int64)
    for k in range(n_steps):
        ups += (codes >> k) & 1
    x_T = x0 + (2 * ups - n_steps) * (T / n_steps)
    return float(np.max(-np.abs(x_T)))


@pytest.mark.parametrize("x0,frozen", [(0.5, 0.0), (2.0, -1.0)])
def test_closed_form_certified_by_exhaustive_search(x0, frozen):
    best = _all_sign_policies_best(x0)
    assert best == pytest.approx(frozen, abs=1e-12)
    assert bangbang_closed_form(x0, 0.0, 1.0) == frozen


@given(st.floats(-3, 3), st.floats(0, 1))
def test_closed_form_properties(x0, t):
    v = bangbang_closed_form(x0, t, 1.0)
    assert v <= 0.0
    assert v == bangbang_closed_form(-x0, t, 1.0)
    assert (v == 0.0) == (abs(x0) <= 1.0 - t)


@pytest.mark.parametrize("x0", [0.5, 2.0])
def test_closed_form_matches_simulated_enumeration(x0):
    # four pieces reach x0 + {-1, -0.5, 0, 0.5, 1}, which contains the optimum for these x0
    spec = bangbang_spec(x0=x0)
    res = value_brute_force(spec, 4, n_paths=1, n_steps=20)
    assert res.value.value == pytest.approx(bangbang_closed_form(x0, 0.0, 1.0), abs=1e-12)


def test_fd_bangbang_within_two_cells():
    spec = bangbang_spec()
    grid = FdGrid(-4.0, 4.0, 161)
    surf = hjb_fd_solve(spec, grid)
    exact = bangbang_closed_form(grid.x, 0.0, 1.0)
    inner = np.abs(grid.x) <= 3.0
    assert np.max(np.abs(surf.v[0] - exact)[inner]) <= 2 * grid.dx


def test_fd_terminal_condition_exact():
    spec = lqgrid_spec()
    surf = hjb_fd_solve(spec, FdGrid(-5.0, 5.0, 101))
    assert np.array_equal(surf.v[-1], -np.sqrt(0.5) * surf.x**2)
    assert surf.policy.shape == (surf.t.size - 1, surf.x.size)


@settings(max_examples=10, deadline=None)
@given(st.floats(-2.0, 2.0))
def test_fd_running_shift(c):
    base = constant_spec(c=0.0, running=0.0, sigma=0.0)
    shifted = constant_spec(c=0.0, running=c, sigma=0.0)
    g = FdGrid(-2.0, 2.0, 41)
    v0 = hjb_fd_solve(base, g).v
    v1 = hjb_fd_solve(shifted, g).v
    tau = (1.0 - hjb_fd_solve(base, g).t)[:, None]
    assert np.allclose((v1 - v0)[:, 1:-1], c * tau, atol=1e-12)


def test_fd_lq_self_convergence():
    spec = lqgrid_spec()
    vals = [fd_value(spec, (-5.0, 5.0), nx)[0] for nx in (101, 201, 401)]
    d1, d2 = abs(vals[1] - vals[0]), abs(vals[2] - vals[1])
    assert d2 < d1
    # independent policy-iteration check frozen from a nx=801 run
    assert vals[2] == pytest.approx(-0.9195, abs=2e-3)


def test_fd_policy_evaluation_below_value():
    spec = lqgrid_spec()
    v_opt, _ = fd_value(spec, (-5.0, 5.0), 201)
    v_zero, _ = fd_value(spec, (-5.0, 5.0), 201, policy=lambda t, x: np.zeros(x.shape[0]))
    assert v_zero <= v_opt


def test_fd_stability_message():
    with pytest.raises(ValueError, match=r"at least nt=\d+"):
        hjb_fd_solve(lqgrid_spec(), FdGrid(-5.0, 5.0, 201, nt=10))
    with pytest.raises(ValueError):
        FdGrid(1.0, 0.0, 11)


def test_linear_oracle_constants():
    assert linear_expectation_oracle(constant_spec(c=1.0), n_paths=100).value == 1.0
    assert linear_expectation_oracle(constant_spec(c=0.0, running=1.0), n_paths=100).value == pytest.approx(1.0, abs=1e-12)


def test_linear_oracle_gbm():
    est = linear_expectation_oracle(gbm_terminal_spec(), n_paths=100_000)
    # Euler mean is (1 + 0.5/100)^100, within 0.0033 of e^0.5
    assert abs(est.value - np.exp(0.5)) <= 3 * est.se + 0.004


def test_linear_oracle_rejects_controlled_problem():
    with pytest.raises(ValueError, match="independent of the action"):
        linear_expectation_oracle(bangbang_spec(), n_paths=10)


def test_registry():
    assert set(BENCHMARKS) == {"bangbang", "lqgrid", "gbm_terminal"}
    assert get_benchmark("lqgrid").problem().space.size == 5
    with pytest.raises(KeyError, match="unknown benchmark"):
        get_benchmark("nope")
