import math

import numpy as np
import pytest

from mfsde.drift import DriftMetadata, DriftSpec, constant_drift, mean_field_ou, sign_attractor, tanh_mean_field, zero_drift
from mfsde.measure_flow import MeasureFlow, flow_distance
from mfsde.oracle import OUParams, ou_closed_form, ou_mean_flow
from mfsde.sde_solver import (
    NumericalBlowUp,
    PathBundle,
    PicardNonConvergence,
    TimeGrid,
    bounded_drift_excess,
    driftless_flow,
    make_noise,
    picard_law_iteration,
    simulate_particles,
    solve_frozen_law,
    sup_moment,
)


def test_time_grid():
    g = TimeGrid(1.0, 3)
    assert g.times[-1] == 1.0 and g.times[0] == 0.0
    assert g.index(2 / 3) == 2
    with pytest.raises(ValueError):
        g.index(0.5)
    with pytest.raises(ValueError):
        TimeGrid(1.0, 0)
    with pytest.raises(ValueError):
        TimeGrid(-1.0, 5)


def test_zero_drift_particles(grid100):
    x0 = np.array([0.5, -1.0])
    bundle, flow = simulate_particles(zero_drift(2), x0, grid100, 4000, seed=1)
    np.testing.assert_array_equal(bundle.states[0], np.broadcast_to(x0, (4000, 2)))
    assert np.all(np.abs(flow.means()[-1] - x0) < 3 / math.sqrt(4000))
    np.testing.assert_allclose(bundle.states, x0 + bundle.brownian(), atol=1e-12)


def test_constant_drift_mean(grid100):
    c = np.array([0.7, -0.2])
    bundle, _ = simulate_particles(constant_drift(2, c), [0.0, 0.0], grid100, 4000, seed=2)
    end = bundle.states[-1]
    se = end.std(axis=0, ddof=1) / math.sqrt(4000)
    assert np.all(np.abs(end.mean(axis=0) - c) < 3 * se)


def test_ou_particles_match_closed_form():
    grid = TimeGrid(1.0, 100)
    bundle, _ = simulate_particles(mean_field_ou(1, 1.0, 0.5), [1.0], grid, 100_000, seed=3)
    ref = ou_closed_form(OUParams(1.0, 0.5, 1.0, 1.0))
    end = bundle.states[-1, :, 0]
    se = end.std(ddof=1) / math.sqrt(end.size)
    # Euler bias at dt = 0.01 is about 0.5% of the mean; allow it on top of the sampling error
    assert abs(end.mean() - ref.mean[0]) < 3 * se + 0.006
    var_se = end.var(ddof=1) * math.sqrt(2 / (end.size - 1))
    assert abs(end.var(ddof=1) - ref.variance) < 3 * var_se + 0.005


def test_frozen_law_zero_drift_is_brownian(grid100):
    noise = make_noise(4, 50, grid100, 2)
    flow = MeasureFlow.constant(grid100.times, [0, 0])
    bundle = solve_frozen_law(zero_drift(2), flow, [1.0, 2.0], grid100, noise)
    np.testing.assert_allclose(bundle.states, np.array([1.0, 2.0]) + bundle.brownian(), atol=1e-12)


def test_frozen_law_matches_particles_for_law_free_drift(grid100):
    drift = tanh_mean_field(2, 1.0, 0.0)
    noise = make_noise(5, 300, grid100, 2)
    bundle, _ = simulate_particles(drift, [0.3, 0.1], grid100, 300, noise=noise)
    frozen = solve_frozen_law(drift, MeasureFlow.constant(grid100.times, [0.3, 0.1]), [0.3, 0.1], grid100, noise)
    np.testing.assert_array_equal(frozen.states, bundle.states)


def test_frozen_law_with_exact_mean_flow():
    grid = TimeGrid(1.0, 200)
    p = OUParams(1.0, 0.5, 1.0, 1.0)
    means = ou_mean_flow(p, grid.times)
    flow = MeasureFlow(grid.times, means[:, None, :])
    noise = make_noise(6, 50_000, grid, 1)
    end = solve_frozen_law(mean_field_ou(1, 1.0, 0.5), flow, [1.0], grid, noise).states[-1, :, 0]
    se = end.std(ddof=1) / math.sqrt(end.size)
    assert abs(end.mean() - ou_closed_form(p).mean[0]) < 3 * se + 0.003


def test_frozen_law_shape_errors(grid100):
    flow = MeasureFlow.constant(grid100.times, [0.0])
    with pytest.raises(ValueError):
        solve_frozen_law(zero_drift(1), flow, [0.0], grid100, np.zeros((99, 4, 1)))
    with pytest.raises(ValueError):
        solve_frozen_law(zero_drift(1), MeasureFlow.constant([0, 1], [0.0]), [0.0], grid100, np.zeros((100, 4, 1)))


def test_picard_law_free_drift_stops_after_one_update(grid100):
    res = picard_law_iteration(tanh_mean_field(1, 1.0, 0.0), [0.5], grid100, 500, seed=1)
    assert len(res.trace) == 2
    assert res.trace[0] > 0 and res.trace[1] == 0.0


def test_picard_ou_converges_to_closed_form_mean():
    grid = TimeGrid(1.0, 100)
    res = picard_law_iteration(mean_field_ou(1, 1.0, 0.5), [1.0], grid, 10_000, tol=1e-3, seed=2)
    assert res.trace[-1] < 1e-3
    assert all(b < a for a, b in zip(res.trace[1:], res.trace[2:]))
    p = OUParams(1.0, 0.5, 1.0, 1.0)
    means = res.flow.means()[:, 0]
    se = res.flow.atoms[:, :, 0].std(axis=1, ddof=1) / math.sqrt(10_000)
    exact = ou_mean_flow(p, grid.times)[:, 0]
    assert np.all(np.abs(means - exact) <= 3 * se + 0.006)


def test_picard_limit_independent_of_start():
    grid = TimeGrid(1.0, 50)
    drift = sign_attractor(1)
    noise = make_noise(3, 400, grid, 1)
    tol = 1e-3
    a = picard_law_iteration(drift, [0.5], grid, 400, tol=tol, noise=noise)
    b = picard_law_iteration(drift, [0.5], grid, 400, tol=tol, noise=noise,
                             initial_flow=MeasureFlow.constant(grid.times, [0.5], 400))
    assert flow_distance(a.flow, b.flow) <= 2 * tol


def test_picard_non_convergence_carries_trace(grid100):
    with pytest.raises(PicardNonConvergence) as info:
        picard_law_iteration(mean_field_ou(1, 1.0, 0.5), [1.0], grid100, 200, tol=1e-12, max_iter=2)
    assert len(info.value.trace) == 2
    assert info.value.result.flow is not None


def test_blow_up_reports_step():
    drift = DriftSpec("explode", 1, lambda t, y, s: 1e200 * y * y, DriftMetadata())
    with np.errstate(over="ignore", invalid="ignore"), pytest.raises(NumericalBlowUp) as info:
        simulate_particles(drift, [1.0], TimeGrid(1.0, 10), 4)
    assert 1 <= info.value.step <= 10


@pytest.mark.parametrize("workers", [2, 3, 8])
def test_determinism_across_workers(workers):
    grid = TimeGrid(1.0, 40)
    drift = sign_attractor(2)
    ref = picard_law_iteration(drift, [0.5, 0.5], grid, 1001, seed=9)
    got = picard_law_iteration(drift, [0.5, 0.5], grid, 1001, seed=9, workers=workers)
    np.testing.assert_array_equal(got.bundle.states, ref.bundle.states)
    assert got.trace == ref.trace
    p1, _ = simulate_particles(drift, [0.5, 0.5], grid, 1001, seed=9)
    p2, _ = simulate_particles(drift, [0.5, 0.5], grid, 1001, seed=9, workers=workers)
    np.testing.assert_array_equal(p1.states, p2.states)


def test_bounded_drift_path_bound():
    drift = sign_attractor(2)
    bundle, _ = simulate_particles(drift, [0.5, 0.0], TimeGrid(1.0, 50), 500, seed=4)
    assert bounded_drift_excess(bundle, drift.metadata.bound) <= 1e-12


def test_particles_approach_picard_limit():
    grid = TimeGrid(1.0, 20)
    drift = mean_field_ou(1, 1.0, 0.5)
    limit = picard_law_iteration(drift, [1.0], grid, 8000, tol=1e-6, seed=7, distance="coupling").flow
    ref_mean = limit.means()[:, 0]
    errs = []
    for n in (1000, 8000):
        # independent noise for the particle systems, so the law error is the propagation-of-chaos gap
        _, flow = simulate_particles(drift, [1.0], grid, n, seed=100 + n)
        errs.append(np.abs(flow.means()[:, 0] - ref_mean).max())
    assert errs[1] < errs[0]


def test_sup_moment_stable_under_doubling():
    grid = TimeGrid(1.0, 50)
    drift = mean_field_ou(1, 1.0, 0.5)
    a = sup_moment(simulate_particles(drift, [1.0], grid, 10_000, seed=1)[0])
    b = sup_moment(simulate_particles(drift, [1.0], grid, 20_000, seed=2)[0])
    assert abs(a - b) / b < 0.1


def test_bundle_round_trip(tmp_path, grid100):
    bundle, _ = simulate_particles(sign_attractor(1), [0.2], grid100, 30, seed=8)
    files = bundle.save(tmp_path / "b")
    assert sorted(files) == ["increments.npy", "manifest.json", "states.npy"]
    back = PathBundle.load(tmp_path / "b")
    np.testing.assert_array_equal(back.states, bundle.states)
    np.testing.assert_array_equal(back.increments, bundle.increments)
    assert back.seed == 8 and back.meta["drift"]["name"] == "sign_attractor"


def test_driftless_flow_matches_zero_drift(grid100):
    noise = make_noise(2, 20, grid100, 1)
    flow = driftless_flow(np.array([0.3]), grid100, noise)
    bundle, _ = simulate_particles(zero_drift(1), [0.3], grid100, 20, noise=noise)
    np.testing.assert_allclose(flow.atoms, bundle.states, atol=1e-13)
