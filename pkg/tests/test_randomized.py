import warnings

import numpy as np
import pytest

from randcontrol.oracles import bangbang_closed_form, bangbang_family, bangbang_spec, constant_spec, lqgrid_family, lqgrid_spec
from randcontrol.point_process import IntensityBoundsError, IntensityField, lift_measure, sample_poisson_ensemble, sample_poisson_mpp, time_change_sequence
from randcontrol.randomized import (
    IntensityFamily,
    optimize_intensity,
    randomized_gain,
    randomized_gain_direct,
    randomized_gain_reweighted,
    simulate_randomized,
)
from randcontrol.rng import RngStream
from randcontrol.stats import combined_se


def battery(m):
    """Bounded fields of three kinds: constant, state dependent, mark dependent."""
    return [
        IntensityField.constant(0.6, m),
        IntensityField(lambda t, x, i: np.broadcast_to((1.0 + 0.4 * np.tanh(x[:, :1])), (x.shape[0], m)), 0.6, 1.4, m, name="state"),
        IntensityField.pointwise(lambda t, x, i, a: np.where(a == i, 0.7, 1.3), m, 0.7, 1.3, name="mark"),
    ]


def test_unit_intensity_constant_payoff():
    spec = constant_spec(c=1.0)
    assert randomized_gain_reweighted(spec, IntensityField.constant(1.0, 2), 1000, 0).value == 1.0


def test_unit_intensity_is_base_measure_on_same_paths():
    spec = lqgrid_spec()
    est = randomized_gain_reweighted(spec, IntensityField.constant(1.0, 5), 20_000, 2)
    base = simulate_randomized(spec, spec.grid(100), 20_000, 2)
    assert est.value == base.payoff.mean() or est.value == pytest.approx(base.payoff.mean(), rel=1e-15)


def test_base_mode_events_match_poisson_sampler():
    spec = lqgrid_spec()
    b = simulate_randomized(spec, spec.grid(100), 500, 7, record_events=True)
    ref = sample_poisson_ensemble(spec.space, spec.horizon, 500, 7)
    assert np.array_equal(b.events.times, ref.times) and np.array_equal(b.events.marks, ref.marks)


def test_reweighted_bangbang_far_from_target():
    # far from the origin the switching rates stay moderate and the weights behave
    spec = bangbang_spec(x0=2.0)
    nu = bangbang_family(spec.space, nu_max=20.0).build([20.0, 1e-3])
    est = randomized_gain_reweighted(spec, nu, 100_000, 3)
    assert abs(est.value - bangbang_closed_form(2.0, 0.0, 1.0)) <= 0.1


def test_direct_unit_intensity_matches_reweighted():
    spec = lqgrid_spec()
    nu = IntensityField.constant(1.0, 5)
    a = randomized_gain_direct(spec, nu, 5000, 4)
    b = randomized_gain_reweighted(spec, nu, 5000, 4)
    assert a.value == pytest.approx(b.value, abs=1e-9)


@pytest.mark.parametrize("c", [0.3, 2.0, 7.0])
def test_direct_constant_intensity_event_count(c):
    spec = bangbang_spec()
    b = simulate_randomized(spec, spec.grid(100), 50_000, 5, IntensityField.constant(c, 2), "direct")
    n = b.counts
    assert abs(n.mean() - c * spec.space.total_mass * spec.horizon) <= 3 * n.std() / np.sqrt(n.size)


def test_direct_events_match_time_change():
    spec = bangbang_spec()
    nu = IntensityField.pointwise(lambda t, x, i, a: np.where(a == i, 0.5, 1.0 + t), 2, 0.5, 2.0)
    b = simulate_randomized(spec, spec.grid(100), 20, 6, nu, "direct", record_events=True)
    lifted = lift_measure(spec.space)
    for p in range(20):
        base = sample_poisson_mpp(spec.space, nu.nu_max * spec.horizon, RngStream(6, p))
        ref = time_change_sequence(base, lifted, nu, spec.grid(100))
        got = b.events.path(p)
        assert np.allclose(got.times, ref.times, atol=1e-8)
        assert np.array_equal(got.marks, ref.marks)


@pytest.mark.parametrize("which", [0, 1, 2])
def test_estimators_agree_on_battery(which):
    spec = lqgrid_spec()
    nu = battery(5)[which]
    a = randomized_gain_direct(spec, nu, 50_000, 8)
    b = randomized_gain_reweighted(spec, nu, 50_000, 9)
    assert abs(a.value - b.value) <= 3 * combined_se(a, b)


@pytest.mark.parametrize("which", [0, 1, 2])
def test_floor_continuity(which):
    spec = lqgrid_spec()
    nu = battery(5)[which]
    a = randomized_gain_reweighted(spec, nu, 20_000, 10)
    b = randomized_gain_reweighted(spec, nu.floored(1e-3), 20_000, 10)
    assert abs(a.value - b.value) <= a.se


def test_bound_violation_raises():
    spec = bangbang_spec()
    bad = IntensityField(lambda t, x, i: np.full((x.shape[0], 2), 30.0), 0.1, 20.0, 2)
    with pytest.raises(IntensityBoundsError):
        randomized_gain_reweighted(spec, bad, 10, 0)


def test_unknown_estimator():
    with pytest.raises(ValueError):
        randomized_gain(bangbang_spec(), IntensityField.constant(1.0, 2), 10, 0, estimator="magic")


def test_singleton_family_returns_unit_gain():
    spec = lqgrid_spec()
    fam = IntensityFamily.singleton(IntensityField.constant(1.0, 5))
    res = optimize_intensity(spec, fam, budget=5, n_paths=5000, seed=1)
    assert res.value.value == randomized_gain_reweighted(spec, IntensityField.constant(1.0, 5), 5000, 1).value
    assert len(res.trace) == 1 and not res.budget_exhausted


def test_budget_exhaustion_flagged():
    spec = bangbang_spec()
    res = optimize_intensity(spec, bangbang_family(spec.space), budget=3, n_paths=2000, estimator="direct")
    assert res.budget_exhausted and len(res.trace) == 3


def test_family_members_respect_bounds():
    spec = lqgrid_spec()
    fam = lqgrid_family(spec.space, nu_max=100.0)
    for theta in fam.members():
        fld = fam.build(theta)
        assert fam.nu_min <= fld.nu_min and fld.nu_max <= fam.nu_max
    with pytest.raises(ValueError):
        IntensityFamily("bad", lambda th: IntensityField.constant(50.0, 2), [0.0], [[0.0]], 0.1, 20.0).build([0.0])


@pytest.mark.parametrize("x0", [0.5, 2.0])
def test_bangbang_search_reaches_oracle(x0):
    spec = bangbang_spec(x0=x0)
    res = optimize_intensity(spec, bangbang_family(spec.space), budget=30, n_paths=20_000, estimator="direct", final_paths=50_000)
    assert abs(res.value.value - bangbang_closed_form(x0, 0.0, 1.0)) <= 0.1


def test_bangbang_reweighted_search_far_from_target():
    spec = bangbang_spec(x0=2.0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        res = optimize_intensity(spec, bangbang_family(spec.space), budget=30, n_paths=20_000, estimator="reweighted")
    assert abs(res.value.value - (-1.0)) <= 0.1


def test_weight_degeneracy_warning():
    spec = bangbang_spec(x0=0.0)
    fam = IntensityFamily.singleton(bangbang_family(spec.space).build([20.0, 1e-3]))
    with pytest.warns(RuntimeWarning, match="coefficient of variation"):
        optimize_intensity(spec, fam, budget=1, n_paths=5000, estimator="reweighted")


def test_enlarging_intensity_bound_does_not_lower_value():
    spec = bangbang_spec(x0=0.5)
    kw = dict(budget=30, n_paths=20_000, seed=2, estimator="direct")
    small = optimize_intensity(spec, bangbang_family(spec.space, nu_max=5.0), **kw)
    big = optimize_intensity(spec, bangbang_family(spec.space, nu_max=20.0), **kw)
    assert big.value.value >= small.value.value - small.value.se


def test_weight_trace_starts_at_one():
    spec = lqgrid_spec()
    b = simulate_randomized(spec, spec.grid(10), 100, 0, battery(5)[2], "reweighted", weight_trace=True, store=True, record_events=True)
    assert np.all(b.kappa_trace[:, 0] == 1.0)
    assert np.allclose(b.kappa_trace[:, -1], b.weights)
    one = b.path(3)
    assert one.state.states.shape == (11, 1) and one.weight_trace[0] == 1.0
