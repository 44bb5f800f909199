"""Bismut-Elworthy-Li gradient estimator for mean-field SDEs with additive noise.

For any bounded weight ``a`` on [0, T] with unit integral,

    grad_x E[phi(X_T^x)] = E[phi(X_T^x) W],
    W = int_0^T (a(s) Z_s + G_s A(s))^T dB_s,   A(s) = int_0^s a(u) du,

where ``Z = grad_x X`` is the first variation and ``G_s`` the derivative of the
law slot of the drift.  The stochastic integral is a left-point Ito sum, so the
discrete weight is exactly mean zero.  Irregular drifts pass through
:func:`mfsde.drift.mollify` before any Jacobian is taken.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .drift import MollifiedDrift, has_jacobian, mollify
from .report import EstimatorReport, digest, mean_and_se
from .sde_solver import (
    DEFAULT_MAX_ITER,
    DEFAULT_TOL,
    PicardResult,
    TimeGrid,
    as_point,
    driftless_flow,
    flow_statistics,
    make_noise,
    picard_law_iteration,
)
from .sensitivity import GradXbFlow, JacobianFlow, grad_x_b, propagate_first_variation

DEFAULT_MOLLIFY = 64


class HypothesisError(ValueError):
    """The drift does not meet the assumptions the estimator needs."""


# --- weight functions ------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class WeightFunction:
    """Values ``a(t_k)`` at the left grid points k = 0..M-1, normalized to sum(a) dt = 1."""

    kind: str
    values: np.ndarray
    dt: float

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1 or values.size < 1:
            raise ValueError("weight values must be a non-empty vector")
        if not np.all(np.isfinite(values)):
            raise ValueError("weight values must be finite")
        total = values.sum() * self.dt
        if total == 0:
            raise ValueError("weight function integrates to zero and cannot be normalized")
        object.__setattr__(self, "values", values / total)

    @property
    def cumulative(self) -> np.ndarray:
        """A(t_k) = sum_{l < k} a(t_l) dt for k = 0..M-1."""
        out = np.zeros_like(self.values)
        np.cumsum(self.values[:-1] * self.dt, out=out[1:])
        return out

    @classmethod
    def uniform(cls, grid: TimeGrid) -> WeightFunction:
        return cls("uniform", np.full(grid.steps, 1.0 / grid.horizon), grid.dt)

    @classmethod
    def indicator_front(cls, grid: TimeGrid, tau: Optional[float] = None) -> WeightFunction:
        """a = 1_{[0, tau)} / tau, tau = T/2 by default."""
        tau = grid.horizon / 2 if tau is None else tau
        if not 0 < tau <= grid.horizon:
            raise ValueError("tau must lie in (0, T]")
        t = grid.times[:-1]
        values = (t < tau - 1e-12 * grid.horizon).astype(np.float64)
        return cls(f"indicator_front({tau:g})", values, grid.dt)

    @classmethod
    def piecewise_constant(cls, grid: TimeGrid, breakpoints: Sequence[float], levels: Sequence[float]) -> WeightFunction:
        if len(levels) != len(breakpoints) + 1:
            raise ValueError("need one more level than breakpoints")
        idx = np.searchsorted(np.asarray(breakpoints), grid.times[:-1], side="right")
        return cls("piecewise_constant", np.asarray(levels, dtype=np.float64)[idx], grid.dt)


def build_weight(spec: dict | str | None, grid: TimeGrid) -> WeightFunction:
    if spec is None or spec == "uniform":
        return WeightFunction.uniform(grid)
    if isinstance(spec, str):
        spec = {"kind": spec}
    kind = spec.get("kind", "uniform")
    if kind == "uniform":
        return WeightFunction.uniform(grid)
    if kind == "indicator_front":
        return WeightFunction.indicator_front(grid, spec.get("tau"))
    if kind == "piecewise_constant":
        return WeightFunction.piecewise_constant(grid, spec["breakpoints"], spec["levels"])
    raise ValueError(f"unknown weight function kind {kind!r}")


# --- observables -------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Observable:
    """Scalar test function phi: R^d -> R, vectorized over rows of ``y``."""

    name: str
    phi: Callable[[np.ndarray], np.ndarray]
    declared_class: str = "weighted_L2"
    params: dict = field(default_factory=dict)

    def __call__(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        return np.asarray(self.phi(np.atleast_2d(y) if y.ndim == 1 else y), dtype=np.float64)


def build_observable(spec: dict | str) -> Observable:
    if isinstance(spec, str):
        spec = {"name": spec}
    params = dict(spec)
    name = params.pop("name")
    if name == "constant":
        c = float(params.get("c", 1.0))
        return Observable(name, lambda y: np.full(y.shape[0], c), "smooth_bounded", {"c": c})
    if name == "coordinate":
        i = int(params.get("index", 0))
        return Observable(name, lambda y: y[:, i].copy(), "weighted_L2", {"index": i})
    if name == "indicator_positive":
        i = int(params.get("index", 0))
        return Observable(name, lambda y: (y[:, i] > 0).astype(np.float64), "weighted_L2", {"index": i})
    if name == "square_norm":
        return Observable(name, lambda y: np.einsum("ni,ni->n", y, y), "weighted_L2", {})
    if name == "exp_square":
        scale = float(params.get("scale", 0.5))
        return Observable(name, lambda y: np.exp(scale * np.einsum("ni,ni->n", y, y)), "weighted_L2",
                          {"scale": scale})
    raise ValueError(f"unknown observable {name!r}")


# --- integrability of phi against omega_T -----------------------------------------------

@dataclass(frozen=True)
class IntegrabilityResult:
    passed: bool
    value: float
    tail_fraction: float
    message: str = ""


def weight_omega(y: np.ndarray, horizon: float) -> np.ndarray:
    """omega_T(y) = exp(-|y|^2 / (4T))."""
    return np.exp(-np.einsum("...i,...i->...", y, y) / (4.0 * horizon))


def check_phi_integrability(phi, d: int, horizon: float, points: Optional[int] = None,
                            radius: Optional[float] = None, shell: float = 0.1) -> IntegrabilityResult:
    """Tensor-grid trapezoid quadrature of phi(y)^2 omega_T(y) over [-R, R]^d, R = 10 sqrt(T).

    Passes when the value is finite and the outer shell ``max|y_i| > (1 - shell) R``
    carries less than 1% of it.
    """
    if d > 3:
        raise ValueError("quadrature check supports d <= 3")
    radius = 10.0 * math.sqrt(horizon) if radius is None else radius
    points = points or {1: 4001, 2: 401, 3: 81}[d]
    axis = np.linspace(-radius, radius, points)
    w1 = np.full(points, axis[1] - axis[0])
    w1[[0, -1]] *= 0.5
    mesh = np.stack(np.meshgrid(*([axis] * d), indexing="ij"), axis=-1).reshape(-1, d)
    weights = np.ones(1)
    for _ in range(d):
        weights = np.outer(weights, w1).ravel()
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        values = np.asarray(phi(mesh), dtype=np.float64)
    bad = ~np.isfinite(values)
    if bad.any():
        where = mesh[np.argmax(bad)].tolist()
        return IntegrabilityResult(False, math.inf, 1.0, f"phi is not finite at y={where}")
    with np.errstate(over="ignore"):
        integrand = values ** 2 * weight_omega(mesh, horizon) * weights
        total = float(integrand.sum())
    if not math.isfinite(total):
        return IntegrabilityResult(False, math.inf, 1.0, "integral overflows")
    outer = np.abs(mesh).max(axis=1) > (1.0 - shell) * radius
    tail = float(integrand[outer].sum())
    frac = tail / total if total > 0 else 0.0
    passed = frac < 0.01
    msg = "" if passed else f"outer shell carries {frac:.1%} of the weighted L2 mass"
    return IntegrabilityResult(passed, total, frac, msg)


# --- the weight W --------------------------------------------------------------------

def bel_weight(a: WeightFunction, first_var: JacobianFlow, gxb_path: np.ndarray, noise: np.ndarray,
               grid: TimeGrid) -> np.ndarray:
    """W_j = sum_k sum_i M_k[i, j] dB^i_k, M_k = a(t_k) Z_k + G_k A(t_k).

    ``first_var.matrices`` and ``gxb_path`` are ``(M + 1, P, d, d)``; ``noise`` is
    ``(M, P, d)`` for the same paths.  Returns ``(P, d)``.
    """
    m = grid.steps
    if a.values.size != m or noise.shape[0] != m:
        raise ValueError("weight function, noise and grid disagree on the number of steps")
    z = first_var.matrices[:m]
    g = gxb_path[:m]
    if z.shape != g.shape or z.shape[:2] != noise.shape[:2]:
        raise ValueError(f"shape mismatch: Z {z.shape}, G {g.shape}, noise {noise.shape}")
    integrand = a.values[:, None, None, None] * z + a.cumulative[:, None, None, None] * g
    return np.einsum("kpij,kpi->pj", integrand, noise)


@dataclass(frozen=True, eq=False)
class BELSetup:
    """Everything the weight needs that does not depend on ``a`` or ``phi``."""

    drift: object
    x0: np.ndarray
    grid: TimeGrid
    solution: PicardResult
    gxb: GradXbFlow
    seed: int
    mollified: Optional[int] = None


def check_hypotheses(drift) -> None:
    meta = drift.metadata
    problems = []
    if not meta.bounded:
        problems.append("the drift is not declared bounded")
    if meta.law_lipschitz is None:
        problems.append("the drift is not declared Lipschitz in the law")
    if problems:
        raise HypothesisError(
            f"gradient estimator refused for drift {drift.name!r}: " + "; ".join(problems)
            + " (bounded, law-Lipschitz drifts are required; clip unbounded drifts first)"
        )


def prepare(drift, x0, grid: TimeGrid, n: int, seed: int = 0, tol: float = DEFAULT_TOL,
            max_iter: int = DEFAULT_MAX_ITER, h: Optional[float] = None, mollify_n: int = DEFAULT_MOLLIFY,
            noise: Optional[np.ndarray] = None, workers: int = 1) -> BELSetup:
    """Solve the law, and the law-slot derivative, for the BEL weight.

    A drift without a spatial Jacobian is replaced by its mollification
    ``b_n`` with ``n = mollify_n`` for the whole computation.
    """
    check_hypotheses(drift)
    x0 = as_point(x0, drift.dim)
    mollified = None
    if not has_jacobian(drift):
        drift = mollify(drift, mollify_n)
        mollified = mollify_n
    elif isinstance(drift, MollifiedDrift):
        mollified = drift.n
    if noise is None:
        noise = make_noise(seed, n, grid, drift.dim, workers)
    solution = picard_law_iteration(drift, x0, grid, n, tol=tol, max_iter=max_iter, seed=seed,
                                    noise=noise, workers=workers, distance="coupling")
    gxb = grad_x_b(drift, x0, grid, n, h=h, seed=seed, base=solution, workers=workers)
    return BELSetup(drift, x0, grid, solution, gxb, seed, mollified)


def stream_weights(setup: BELSetup, weights: Sequence[WeightFunction]) -> list[np.ndarray]:
    """BEL weights W for every path, one ``(N, d)`` array per weight function."""
    grid = setup.grid
    bundle = setup.solution.bundle
    noise = bundle.increments
    out = [np.zeros((bundle.n, bundle.dim)) for _ in weights]
    cums = [a.cumulative for a in weights]
    for k, _, z, g, _ in propagate_first_variation(setup.drift, bundle, setup.solution.flow, setup.gxb):
        db = noise[k]
        zdb = np.einsum("pij,pi->pj", z, db)
        gdb = np.einsum("pij,pi->pj", g, db)
        for w, a, cum in zip(out, weights, cums):
            w += a.values[k] * zdb + cum[k] * gdb
    return out


def _digest(method, setup: BELSetup, extra: dict) -> str:
    return digest({"method": method, "drift": setup.drift.name, "params": setup.drift.params,
                   "x0": setup.x0, "T": setup.grid.horizon, "M": setup.grid.steps,
                   "N": setup.solution.bundle.n, "seed": setup.seed, **extra})


def bel_reports(setup: BELSetup, weights: Sequence[WeightFunction], phi: Observable,
                config_digest: str = "") -> list[EstimatorReport]:
    start = time.perf_counter()
    ws = stream_weights(setup, weights)
    values = phi(setup.solution.bundle.states[-1])
    elapsed = (time.perf_counter() - start) * 1e3
    reports = []
    for a, w in zip(weights, ws):
        samples = values[:, None] * w
        est, se = mean_and_se(samples)
        w_mean, w_se = mean_and_se(w)
        reports.append(EstimatorReport(
            est, se, samples.shape[0], "bel", setup.seed,
            config_digest or _digest("bel", setup, {"a": a.kind, "phi": phi.name, "phi_params": phi.params}),
            elapsed,
            {
                "weight_function": a.kind,
                "weight_mean": w_mean.tolist(),
                "weight_std_error": w_se.tolist(),
                "second_moment": float(np.mean(np.einsum("ni,ni->n", samples, samples))),
                "mollified": setup.mollified,
                "picard_iterations": setup.solution.iterations,
            },
        ))
    return reports


def estimate_gradient(drift, x0, grid: TimeGrid, n: int, a: Optional[WeightFunction] = None,
                      phi: Optional[Observable] = None, seed: int = 0, tol: float = DEFAULT_TOL,
                      max_iter: int = DEFAULT_MAX_ITER, h: Optional[float] = None,
                      mollify_n: int = DEFAULT_MOLLIFY, workers: int = 1, config_digest: str = "") -> EstimatorReport:
    """BEL estimate of grad_x E[phi(X_T^x)] with componentwise standard errors."""
    start = time.perf_counter()
    phi = phi or build_observable("coordinate")
    setup = prepare(drift, x0, grid, n, seed, tol, max_iter, h, mollify_n, workers=workers)
    a = a or WeightFunction.uniform(grid)
    report = bel_reports(setup, [a], phi, config_digest)[0]
    report.runtime_ms = (time.perf_counter() - start) * 1e3
    return report


# --- Girsanov-weighted expectation ----------------------------------------------------------

def stochastic_exponential(drift, x0, grid: TimeGrid, flow, noise: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Driftless paths x0 + B and exp(sum b_k . dB_k - 1/2 sum |b_k|^2 dt) along them.

    ``b_k = b(t_k, x0 + B_{t_k}, mu_{t_k})``.  Returns ``(terminal points, weights)``.
    """
    x = driftless_flow(x0, grid, noise).atoms
    stats = flow_statistics(drift, flow)
    times = grid.times
    log_e = np.zeros(noise.shape[1])
    for k in range(grid.steps):
        b = drift.field(times[k], x[k], stats[k])
        log_e += np.einsum("ni,ni->n", b, noise[k]) - 0.5 * grid.dt * np.einsum("ni,ni->n", b, b)
    return x[-1], np.exp(log_e)


def girsanov_estimate(drift, x0, grid: TimeGrid, n: int, phi: Observable, seed: int = 0,
                      flow=None, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER,
                      noise: Optional[np.ndarray] = None, workers: int = 1, config_digest: str = "") -> EstimatorReport:
    """E[phi(X_T^x)] as E[phi(x + B_T) E_T] under the change of measure that removes the drift.

    The law flow defaults to the Picard solution driven by the same noise.
    """
    start = time.perf_counter()
    if not drift.metadata.bounded:
        raise HypothesisError(f"girsanov estimate needs a bounded drift; {drift.name!r} is unbounded")
    x0 = as_point(x0, drift.dim)
    if noise is None:
        noise = make_noise(seed, n, grid, drift.dim, workers)
    iterations = None
    if flow is None:
        res = picard_law_iteration(drift, x0, grid, noise.shape[1], tol=tol, max_iter=max_iter, seed=seed,
                                   noise=noise, workers=workers, distance="coupling")
        flow, iterations = res.flow, res.iterations
    terminal, weights = stochastic_exponential(drift, x0, grid, flow, noise)
    samples = phi(terminal) * weights
    est, se = mean_and_se(samples[:, None])
    e_mean, e_se = mean_and_se(weights[:, None])
    return EstimatorReport(
        est, se, samples.shape[0], "girsanov", seed,
        config_digest or digest({"method": "girsanov", "drift": drift.name, "params": drift.params, "x0": x0,
                                 "T": grid.horizon, "M": grid.steps, "N": n, "seed": seed, "phi": phi.name}),
        (time.perf_counter() - start) * 1e3,
        {"exponential_mean": float(e_mean[0]), "exponential_std_error": float(e_se[0]),
         "exponential_min": float(weights.min()), "picard_iterations": iterations},
    )
