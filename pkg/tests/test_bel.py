import math

import numpy as np
import pytest
from scipy import integrate

from mfsde.bel import (
    HypothesisError,
    WeightFunction,
    bel_reports,
    bel_weight,
    build_observable,
    build_weight,
    check_phi_integrability,
    estimate_gradient,
    girsanov_estimate,
    prepare,
    stochastic_exponential,
    stream_weights,
)
from mfsde.drift import mean_field_ou, sign_attractor, tanh_mean_field, zero_drift
from mfsde.oracle import OUParams, clipped_ou
from mfsde.sde_solver import TimeGrid, make_noise, picard_law_iteration, simulate_particles
from mfsde.sensitivity import first_variation


def test_weight_normalization(grid100):
    for w in (WeightFunction.uniform(grid100), WeightFunction.indicator_front(grid100),
              WeightFunction.piecewise_constant(grid100, [0.3, 0.6], [1.0, 5.0, 0.0])):
        assert w.values.sum() * w.dt == pytest.approx(1.0, abs=1e-12)
    front = WeightFunction.indicator_front(grid100)
    assert np.all(front.values[:50] == 2.0) and np.all(front.values[50:] == 0.0)
    assert front.cumulative[0] == 0.0 and front.cumulative[-1] == pytest.approx(1.0)
    with pytest.raises(ValueError):
        WeightFunction("bad", np.zeros(100), 0.01)
    with pytest.raises(ValueError):
        build_weight({"kind": "triangle"}, grid100)
    assert build_weight({"kind": "indicator_front", "tau": 0.25}, grid100).values[24] == 4.0


def test_zero_drift_weight_is_scaled_brownian_endpoint():
    grid = TimeGrid(2.0, 40)
    setup = prepare(zero_drift(2), [0.1, 0.2], grid, 100, seed=3)
    w = stream_weights(setup, [WeightFunction.uniform(grid)])[0]
    bt = setup.solution.bundle.brownian()[-1]
    np.testing.assert_allclose(w, bt / 2.0, atol=1e-12)


def test_stored_and_streamed_weights_agree():
    grid = TimeGrid(1.0, 30)
    setup = prepare(sign_attractor(2), [0.5, 0.5], grid, 60, seed=1, mollify_n=16)
    bundle = setup.solution.bundle
    fv = first_variation(setup.drift, bundle, setup.solution.flow, setup.gxb)
    a = WeightFunction.indicator_front(grid)
    stored = bel_weight(a, fv, setup.gxb.along(bundle), bundle.increments, grid)
    np.testing.assert_allclose(stream_weights(setup, [a])[0], stored, atol=1e-12)
    with pytest.raises(ValueError):
        bel_weight(WeightFunction.uniform(TimeGrid(1.0, 10)), fv, setup.gxb.along(bundle), bundle.increments, grid)


def test_ou_weight_variance_matches_ito_isometry():
    alpha, beta = 1.0, 0.5
    grid = TimeGrid(1.0, 100)
    drift = clipped_ou(OUParams(alpha, beta, 1.0))
    setup = prepare(drift, [1.0], grid, 100_000, seed=5)
    w = stream_weights(setup, [WeightFunction.uniform(grid)])[0][:, 0]
    integrand = lambda s: (math.exp((beta - alpha) * s) * (1 + beta * s)) ** 2
    var = integrate.quad(integrand, 0, 1)[0]
    assert abs(w.mean()) < 3 * w.std(ddof=1) / math.sqrt(w.size)
    assert w.var(ddof=1) == pytest.approx(var, rel=0.05)


def test_constant_phi_gives_zero_gradient():
    grid = TimeGrid(1.0, 50)
    r = estimate_gradient(sign_attractor(2), [0.5, 0.5], grid, 5000, phi=build_observable("constant"),
                          seed=2, mollify_n=16)
    assert np.all(r.within(0.0))
    assert r.extra["mollified"] == 16


def test_hypotheses_are_checked():
    with pytest.raises(HypothesisError, match="not declared bounded"):
        estimate_gradient(mean_field_ou(1), [1.0], TimeGrid(1.0, 10), 10)
    with pytest.raises(HypothesisError):
        girsanov_estimate(mean_field_ou(1), [1.0], TimeGrid(1.0, 10), 10, build_observable("coordinate"))


def test_weight_reports_share_setup():
    grid = TimeGrid(1.0, 50)
    setup = prepare(tanh_mean_field(1, 1.0, 0.5), [0.3], grid, 20_000, seed=4)
    uni, front = bel_reports(setup, [WeightFunction.uniform(grid), WeightFunction.indicator_front(grid)],
                             build_observable("coordinate"))
    assert abs(uni.estimate[0] - front.estimate[0]) <= 3 * (uni.std_error[0] + front.std_error[0])
    assert front.std_error[0] > uni.std_error[0]
    for r in (uni, front):
        assert abs(r.extra["weight_mean"][0]) <= 3 * r.extra["weight_std_error"][0]


def test_second_moment_stable_under_doubling():
    grid = TimeGrid(1.0, 50)
    drift = tanh_mean_field(1, 1.0, 0.5)
    phi = build_observable("coordinate")
    moments = [bel_reports(prepare(drift, [0.3], grid, n, seed=n), [WeightFunction.uniform(grid)], phi)[0]
               .extra["second_moment"] for n in (20_000, 40_000)]
    assert abs(moments[1] / moments[0] - 1) < 0.1


def test_girsanov_zero_drift():
    grid = TimeGrid(1.0, 20)
    phi = build_observable("square_norm")
    r = girsanov_estimate(zero_drift(2), [1.0, 0.0], grid, 1000, phi, seed=1)
    noise = make_noise(1, 1000, grid, 2)
    plain = phi(np.array([1.0, 0.0]) + noise.sum(axis=0)).mean()
    assert r.estimate[0] == pytest.approx(plain, rel=1e-12)
    assert r.extra["exponential_mean"] == 1.0


def test_stochastic_exponential_is_mean_one():
    grid = TimeGrid(1.0, 100)
    drift = sign_attractor(2)
    res = picard_law_iteration(drift, [0.5, 0.5], grid, 5000, seed=2)
    noise = make_noise(77, 50_000, grid, 2)
    _, e = stochastic_exponential(drift, np.array([0.5, 0.5]), grid, res.flow, noise)
    assert np.all(e > 0)
    assert abs(e.mean() - 1) < 3 * e.std(ddof=1) / math.sqrt(e.size)


def test_phi_integrability_examples():
    one = check_phi_integrability(build_observable("constant"), 1, 1.0)
    assert one.passed and one.value == pytest.approx(math.sqrt(4 * math.pi), abs=1e-3)
    two = check_phi_integrability(build_observable("constant"), 2, 1.0)
    assert two.value == pytest.approx(4 * math.pi, rel=1e-3)
    assert check_phi_integrability(build_observable("coordinate"), 2, 1.0).passed
    bad = check_phi_integrability(build_observable({"name": "exp_square", "scale": 0.5}), 1, 1.0)
    assert not bad.passed
    nan_phi = build_observable("constant")
    nan_phi = type(nan_phi)("log", lambda y: np.log(y[:, 0]))
    res = check_phi_integrability(nan_phi, 1, 1.0)
    assert not res.passed and "not finite" in res.message
    with pytest.raises(ValueError):
        check_phi_integrability(build_observable("constant"), 4, 1.0)


def test_observables():
    y = np.array([[1.0, -2.0], [-0.5, 3.0]])
    np.testing.assert_array_equal(build_observable({"name": "coordinate", "index": 1})(y), [-2.0, 3.0])
    np.testing.assert_array_equal(build_observable("indicator_positive")(y), [1.0, 0.0])
    np.testing.assert_array_equal(build_observable("square_norm")(y), [5.0, 9.25])
    with pytest.raises(ValueError):
        build_observable("cosine")
