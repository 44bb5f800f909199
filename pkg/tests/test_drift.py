import dataclasses

import numpy as np
import pytest

from mfsde.drift import (
    REGISTRY,
    DriftError,
    MollifiedDrift,
    build_drift,
    constant_drift,
    eval_drift,
    gauss_hermite_offsets,
    linear_drift,
    matrix_tanh,
    mean_field_ou,
    mollify,
    probe_metadata,
    sign_attractor,
    spatial_jacobian,
    tanh_mean_field,
    zero_drift,
)
from mfsde.measure_flow import EmpiricalMeasure


def measure_with_mean(m, d=1):
    return EmpiricalMeasure(np.full((4, d), m, dtype=float))


def test_zero_drift_is_zero(rng):
    y = rng.normal(size=(5, 3))
    assert np.all(eval_drift(zero_drift(3), 0.3, y, EmpiricalMeasure(y)) == 0)


def test_mean_field_ou_arithmetic():
    b = mean_field_ou(1, alpha=1.0, beta=0.5)
    assert eval_drift(b, 0.0, [2.0], measure_with_mean(4.0)) == pytest.approx([0.0])


def test_sign_attractor_arithmetic():
    b = sign_attractor(3)
    mu = EmpiricalMeasure([[0.25, 0, 0], [-0.25, 0, 0]])
    np.testing.assert_allclose(eval_drift(b, 0.0, [-3.0, 1.0, 2.0], mu), [1.25, 0, 0])


def test_sign_attractor_law_cap():
    b = sign_attractor(1)
    assert eval_drift(b, 0.0, [1.0], measure_with_mean(5.0))[0] == pytest.approx(0.0)


def test_non_finite_output_is_reported():
    bad = dataclasses.replace(zero_drift(1), field=lambda t, y, s: np.full_like(y, np.inf), name="broken")
    with pytest.raises(DriftError, match="broken"):
        eval_drift(bad, 0.0, [1.0], measure_with_mean(0.0))


def test_dimension_mismatch():
    with pytest.raises(DriftError):
        eval_drift(zero_drift(2), 0.0, [1.0], measure_with_mean(0.0))


def test_mollified_linear_is_exact(rng):
    a = np.array([[-1.0, 0.3], [0.2, -0.5]])
    # the linear drift is unbounded, so mollify a clipped-free stand-in with the same symmetric rule
    offsets, weights = gauss_hermite_offsets(2)
    assert weights.sum() == pytest.approx(1.0, abs=1e-14)
    np.testing.assert_allclose(weights @ offsets, 0.0, atol=1e-14)
    y = rng.normal(size=(6, 2))
    avg = sum(w * ((y + z / 4.0) @ a.T) for z, w in zip(offsets, weights))
    np.testing.assert_allclose(avg, y @ a.T, atol=1e-13)


def test_mollified_constant(rng):
    b = mollify(constant_drift(2, [0.5, -1.0]), 9)
    y = rng.normal(size=(5, 2))
    np.testing.assert_allclose(eval_drift(b, 0.0, y, EmpiricalMeasure(y)), np.tile([0.5, -1.0], (5, 1)), atol=1e-14)


@pytest.mark.parametrize("exact", [True, False])
def test_mollified_sign_vanishes_at_origin(exact):
    base = sign_attractor(1, cap=0.0)
    if not exact:
        base = dataclasses.replace(base, smoothed=None)
    b = mollify(base, 16)
    assert eval_drift(b, 0.0, [0.0], measure_with_mean(0.0))[0] == pytest.approx(0.0, abs=1e-14)


def test_mollify_rejects_unbounded_and_double():
    with pytest.raises(DriftError, match="unbounded"):
        mollify(mean_field_ou(1), 4)
    with pytest.raises(DriftError):
        mollify(mollify(tanh_mean_field(1), 4), 4)


def test_mollified_bound_preserved(rng):
    base = tanh_mean_field(2, kappa=1.0, beta=0.5)
    b = mollify(base, 4)
    y = rng.normal(scale=3, size=(200, 2))
    out = b.field(0.0, y, np.array([0.3, -0.2]))
    assert np.linalg.norm(out, axis=1).max() <= base.metadata.bound
    assert b.metadata.spatially_smooth and b.metadata.law_lipschitz == base.metadata.law_lipschitz


def test_exact_convolution_for_sign():
    from scipy import integrate, stats

    n = 4
    b = mollify(sign_attractor(1, cap=0.0), n)
    sd = 1 / np.sqrt(n)
    for y in (-1.3, -0.2, 0.05, 0.7):
        ref = integrate.quad(lambda z: -np.sign(y + z) * stats.norm.pdf(z, scale=sd), -10 * sd, 10 * sd,
                             points=[-y])[0]
        got = b.field(0.0, np.array([[y]]), np.array([0.0]))[0, 0]
        assert got == pytest.approx(ref, abs=1e-10)
        # derivative of -E sign(y + Z/sqrt(n)) is -2 times the kernel density at -y
        assert b.jacobian(0.0, np.array([[y]]), np.array([0.0]))[0, 0, 0] == pytest.approx(
            -2 * stats.norm.pdf(y, scale=sd), rel=1e-12)


def test_quadrature_is_coarse_for_steps():
    # a node rule smooths a jump only up to its node spacing, hence the closed form
    base = sign_attractor(1, cap=0.0)
    rule = mollify(dataclasses.replace(base, smoothed=None), 4)
    exact = mollify(base, 4)
    y = np.linspace(-2, 2, 41)[:, None]
    err = np.abs(rule.field(0, y, np.zeros(1)) - exact.field(0, y, np.zeros(1))).max()
    assert 1e-3 < err < 0.2


def test_mollifier_consistency_decreasing(rng):
    base = tanh_mean_field(1, kappa=2.0, beta=0.0)
    y = rng.normal(scale=2, size=(100, 1))
    s = np.array([0.0])
    errors = [np.abs(mollify(base, n).field(0, y, s) - base.field(0, y, s)).max() for n in (1, 4, 16, 64)]
    assert all(e2 < e1 for e1, e2 in zip(errors, errors[1:]))
    # Lipschitz base: error <= Lip * E|Z| / sqrt(n) within a factor 2
    lip = 2.0
    for n, err in zip((1, 4, 16, 64), errors):
        assert err <= 2 * lip * np.sqrt(2 / np.pi) / np.sqrt(n)


def test_spatial_jacobian_examples(rng):
    a = np.array([[1.0, 2.0], [-0.5, 0.0]])
    y = rng.normal(size=2)
    mu = EmpiricalMeasure(rng.normal(size=(3, 2)))
    np.testing.assert_array_equal(spatial_jacobian(linear_drift(2, a), 0, y, mu), a)
    np.testing.assert_array_equal(spatial_jacobian(zero_drift(2), 0, y, mu), np.zeros((2, 2)))
    tanh = dataclasses.replace(tanh_mean_field(1, kappa=-1.0, beta=0.0), jacobian=None)
    assert spatial_jacobian(tanh, 0, [0.0], measure_with_mean(0.0))[0, 0] == pytest.approx(1.0, abs=1e-8)


@pytest.mark.parametrize("drift", [
    tanh_mean_field(2, 1.3, 0.4),
    matrix_tanh(2, [[-1.0, 2.0], [0.0, -0.5]]),
    mollify(sign_attractor(2), 16),
    mollify(tanh_mean_field(2), 4),
    mean_field_ou(2, 1.0, 0.5),
])
def test_analytic_jacobian_matches_finite_differences(drift, rng):
    y = rng.normal(size=(20, 2))
    s = drift.statistics(EmpiricalMeasure(rng.normal(size=(5, 2))))
    fd = np.empty((20, 2, 2))
    h = 1e-5
    for j in range(2):
        e = np.zeros(2)
        e[j] = h
        fd[..., j] = (drift.field(0, y + e, s) - drift.field(0, y - e, s)) / (2 * h)
    jac = drift.jacobian(0, y, s)
    np.testing.assert_allclose(jac, fd, rtol=1e-5, atol=1e-6)


def test_clipped_ou_jacobian_zero_on_clipped_rows():
    b = mean_field_ou(1, 1.0, 0.0, clip=1.0)
    jac = b.jacobian(0, np.array([[5.0], [0.5]]), np.array([0.0]))
    assert jac[0, 0, 0] == 0.0 and jac[1, 0, 0] == -1.0


@pytest.mark.parametrize("name", sorted(REGISTRY))
def test_metadata_probes_on_builtins(name):
    params = {"constant": {"c": [0.5, -1.0]}, "linear": {"matrix": [[-1, 0.2], [0, -0.5]]},
              "matrix_tanh": {"matrix": [[-1, 2], [0, -0.5]]}}.get(name, {})
    drift = REGISTRY[name](2, **params)
    assert probe_metadata(drift, n_probes=300) == []
    if drift.metadata.bounded:
        assert probe_metadata(mollify(drift, 4), n_probes=100) == []


def test_probe_catches_false_bound():
    liar = dataclasses.replace(tanh_mean_field(1), metadata=dataclasses.replace(tanh_mean_field(1).metadata, bound=0.1))
    assert any("exceeds bound" in p for p in probe_metadata(liar, n_probes=50))


def test_build_drift_from_config():
    b = build_drift({"name": "mean_field_ou", "alpha": 1.0, "beta": 0.5}, 1)
    assert b.params["alpha"] == 1.0
    m = build_drift({"name": "sign_attractor", "mollify": 16}, 2)
    assert isinstance(m, MollifiedDrift) and m.n == 16
    with pytest.raises(DriftError, match="unknown drift"):
        build_drift({"name": "nope"}, 1)
    with pytest.raises(DriftError, match="bad parameters"):
        build_drift({"name": "zero", "gamma": 2}, 1)
    with pytest.raises(DriftError):
        build_drift({}, 1)
