"""Independent reference values: finite differences with common random numbers,
the closed-form mean-field Ornstein-Uhlenbeck family, and a matrix exponential."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .drift import mean_field_ou
from .report import EstimatorReport, digest, mean_and_se
from .sde_solver import DEFAULT_MAX_ITER, DEFAULT_TOL, TimeGrid, as_point, default_fd_step, flow_statistics, make_noise, picard_law_iteration


def matrix_exp(a, t: float = 1.0) -> np.ndarray:
    """exp(t A) by scaling and squaring of a Taylor series."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64)) * t
    if a.shape[0] != a.shape[1]:
        raise ValueError("matrix_exp needs a square matrix")
    norm = np.linalg.norm(a, 1)
    squarings = max(0, int(math.ceil(math.log2(norm / 0.25)))) if norm > 0.25 else 0
    a = a / 2.0 ** squarings
    result = np.eye(a.shape[0])
    term = np.eye(a.shape[0])
    # |A| <= 1/4 after scaling: 18 terms leave a remainder far below 1e-16
    for k in range(1, 19):
        term = term @ a / k
        result = result + term
    for _ in range(squarings):
        result = result @ result
    return result


@dataclass(frozen=True)
class OUParams:
    alpha: float = 1.0
    beta: float = 0.5
    x0: float | np.ndarray = 1.0
    horizon: float = 1.0
    dim: int = 1

    def __post_init__(self) -> None:
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")


@dataclass(frozen=True)
class OUClosedForm:
    mean: np.ndarray
    variance: float
    gradient: float


def ou_closed_form(p: OUParams) -> OUClosedForm:
    """Mean, per-component variance and d mean / d x0 of X_T for b = -alpha y + beta mean(mu)."""
    x0 = np.broadcast_to(np.asarray(p.x0, dtype=np.float64), (p.dim,))
    growth = math.exp((p.beta - p.alpha) * p.horizon)
    if p.alpha > 0:
        var = (1.0 - math.exp(-2.0 * p.alpha * p.horizon)) / (2.0 * p.alpha)
    else:
        var = p.horizon
    return OUClosedForm(mean=x0 * growth, variance=var, gradient=growth)


def ou_mean_flow(p: OUParams, times) -> np.ndarray:
    """m(t) = x0 exp((beta - alpha) t), shape ``(len(times), d)``."""
    x0 = np.broadcast_to(np.asarray(p.x0, dtype=np.float64), (p.dim,))
    return np.exp((p.beta - p.alpha) * np.asarray(times))[:, None] * x0


def clipped_ou(p: OUParams, factor: float = 10.0):
    """The OU drift clipped at factor * (1 + |x0|), bounded as the gradient estimators require."""
    level = factor * (1.0 + float(np.linalg.norm(np.broadcast_to(p.x0, (p.dim,)))))
    return mean_field_ou(p.dim, p.alpha, p.beta, clip=level)


def clip_activity(drift, bundle, flow) -> float:
    """Fraction of (path, step) pairs where the clipped OU drift is actually clipped."""
    clip = drift.params.get("clip")
    if clip is None:
        return 0.0
    alpha, beta = drift.params["alpha"], drift.params["beta"]
    stats = flow_statistics(drift, flow)
    hits = 0
    for k in range(bundle.grid.steps):
        raw = -alpha * bundle.states[k] + beta * stats[k]
        hits += int(np.any(np.abs(raw) >= clip, axis=1).sum())
    return hits / (bundle.grid.steps * bundle.n)


def fd_gradient(drift, x0, grid: TimeGrid, n: int, phi, h: Optional[float] = None, seed: int = 0,
                tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER, noise: Optional[np.ndarray] = None,
                workers: int = 1, config_digest: str = "") -> EstimatorReport:
    """Central differences of E[phi(X_T)] in x0 with identical noise in all 2d runs.

    Each run solves the law by Picard iteration to ``tol * h`` in the coupling
    distance, because flow errors are amplified by ``1 / (2h)``.
    """
    start = time.perf_counter()
    x0 = as_point(x0, drift.dim)
    h = default_fd_step(x0) if h is None else float(h)
    if not h > 0:
        raise ValueError("finite-difference step h must be positive")
    if noise is None:
        noise = make_noise(seed, n, grid, drift.dim, workers)
    d = drift.dim
    samples = np.empty((noise.shape[1], d))
    traces = []
    for j in range(d):
        e = np.zeros(d)
        e[j] = h
        values = []
        for sign in (1.0, -1.0):
            res = picard_law_iteration(drift, x0 + sign * e, grid, noise.shape[1], tol=tol * h,
                                       max_iter=max(max_iter, 50), seed=seed, noise=noise,
                                       workers=workers, distance="coupling")
            values.append(np.asarray(phi(res.bundle.states[-1]), dtype=np.float64))
            traces.append(res.trace)
        samples[:, j] = (values[0] - values[1]) / (2.0 * h)
    est, se = mean_and_se(samples)
    return EstimatorReport(
        est, se, samples.shape[0], "fd", seed,
        config_digest or digest({"method": "fd", "drift": drift.name, "params": drift.params,
                                 "x0": x0, "T": grid.horizon, "M": grid.steps, "N": n, "h": h, "seed": seed}),
        (time.perf_counter() - start) * 1e3,
        {"h": h, "picard_iterations": [len(t) for t in traces]},
    )
