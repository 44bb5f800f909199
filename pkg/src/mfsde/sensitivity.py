"""Jacobian flows along simulated paths.

Two linear matrix ODEs are integrated on the path's own Euler grid:

* the Malliavin derivative ``D_s X_t``: ``D <- (I + J_k dt) D`` from ``D_s X_s = I``;
* the first variation ``Z_t = grad_x X_t``: ``Z <- Z + (J_k Z + G_k) dt`` from ``Z_0 = I``,

with ``J_k`` the spatial Jacobian of the drift at ``(t_k, X_k, mu_k)`` and ``G_k``
the derivative of ``x -> b(t_k, y, law(X_{t_k}^x))`` at ``y = X_k``.  The
Malliavin flow is a time-ordered product, not ``exp(sum J_k dt)``; the two only
agree when the ``J_k`` commute.

Matrices index as ``[..., i, j] = d (output i) / d (input j)``; in particular
column ``j`` of ``G_k`` is the derivative in the direction of ``x0 + h e_j``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .drift import field_and_jacobian, spatial_jacobian_stats
from .measure_flow import MeasureFlow
from .oracle import matrix_exp
from .sde_solver import (
    PathBundle,
    PicardResult,
    TimeGrid,
    as_point,
    default_fd_step,
    flow_statistics,
    make_noise,
    picard_law_iteration,
)

FIRST_VARIATION = "first_variation"
MALLIAVIN = "malliavin_from_s"


@dataclass(frozen=True, eq=False)
class JacobianFlow:
    """``matrices[k, p]`` is the d x d matrix at time t_k on path ``p``.

    For the Malliavin kind, entries before the anchor are NaN (undefined).
    """

    matrices: np.ndarray
    kind: str
    anchor: int = 0
    paths: Optional[np.ndarray] = None

    @property
    def dim(self) -> int:
        return self.matrices.shape[-1]

    def at(self, k: int) -> np.ndarray:
        if k < self.anchor:
            raise IndexError(f"Jacobian flow starts at index {self.anchor}, asked for {k}")
        return self.matrices[k]

    def max_operator_norm(self) -> float:
        m = self.matrices[self.anchor:]
        return float(np.linalg.norm(m, ord=2, axis=(-2, -1)).max())

    def to_csv(self, path, path_index: int = 0, times: Optional[np.ndarray] = None) -> None:
        """One row per time step: ``t`` then the d*d entries in row-major order."""
        d = self.dim
        rows = self.matrices[:, path_index].reshape(self.matrices.shape[0], d * d)
        t = np.arange(rows.shape[0]) if times is None else times
        header = "t," + ",".join(f"m{i}{j}" for i in range(d) for j in range(d))
        np.savetxt(path, np.column_stack([t, rows]), delimiter=",", header=header, comments="", fmt="%.17g")


def jacobian_bound(spatial_bound: float, law_bound: float, horizon: float) -> float:
    """exp(|grad_y b| T) (1 + |grad_x b| T): a priori bound on the first-variation norm."""
    return float(np.exp(spatial_bound * horizon) * (1.0 + law_bound * horizon))


def _select(bundle: PathBundle, paths) -> tuple[np.ndarray, np.ndarray]:
    idx = np.arange(bundle.n) if paths is None else np.atleast_1d(np.asarray(paths, dtype=int))
    return idx, bundle.states[:, idx, :]


def spatial_jacobians(drift, bundle: PathBundle, flow: MeasureFlow, paths=None) -> np.ndarray:
    """J_k along the selected paths, shape ``(M, P, d, d)`` for k = 0..M-1."""
    _, x = _select(bundle, paths)
    stats = flow_statistics(drift, flow)
    times = bundle.grid.times
    return np.stack([spatial_jacobian_stats(drift, times[k], x[k], stats[k]) for k in range(bundle.grid.steps)])


def malliavin_derivative(drift, bundle: PathBundle, flow: MeasureFlow, s_index: int, paths=None) -> JacobianFlow:
    """D_{t_s} X_{t_k} for k >= s by the Euler product recursion."""
    m = bundle.grid.steps
    if not 0 <= s_index <= m:
        raise IndexError(f"s_index {s_index} outside 0..{m}")
    idx, x = _select(bundle, paths)
    d = bundle.dim
    stats = flow_statistics(drift, flow)
    dt = bundle.grid.dt
    times = bundle.grid.times
    out = np.full((m + 1, idx.size, d, d), np.nan)
    out[s_index] = np.eye(d)
    for k in range(s_index, m):
        jac = spatial_jacobian_stats(drift, times[k], x[k], stats[k])
        out[k + 1] = out[k] + (jac @ out[k]) * dt
    return JacobianFlow(out, MALLIAVIN, s_index, idx)


def terminal_malliavin(drift, bundle: PathBundle, flow: MeasureFlow, paths=None) -> np.ndarray:
    """D_{t_k} X_T for every k, shape ``(M + 1, P, d, d)``, by a backward product."""
    m = bundle.grid.steps
    idx, x = _select(bundle, paths)
    d = bundle.dim
    stats = flow_statistics(drift, flow)
    dt = bundle.grid.dt
    times = bundle.grid.times
    out = np.empty((m + 1, idx.size, d, d))
    out[m] = np.eye(d)
    for k in range(m - 1, -1, -1):
        jac = spatial_jacobian_stats(drift, times[k], x[k], stats[k])
        out[k] = out[k + 1] + (out[k + 1] @ jac) * dt
    return out


@dataclass(frozen=True, eq=False)
class GradXbFlow:
    """Derivative of ``x -> b(t_k, y, law(X_{t_k}^x))``, evaluated lazily in ``y``.

    Column ``j`` at ``(k, y)`` is ``[b(t_k, y, mu^+_jk) - b(t_k, y, mu^-_jk)] / (2h)``
    where ``mu^(+/-)_j`` are the Picard flows started from ``x0 +/- h e_j``.
    """

    drift: object
    grid: TimeGrid
    h: float
    stats_plus: list = field(default_factory=list)  # [j][k] -> statistic
    stats_minus: list = field(default_factory=list)
    traces: list = field(default_factory=list)

    @property
    def dim(self) -> int:
        return self.drift.dim

    @property
    def law_independent(self) -> bool:
        return not self.stats_plus

    def evaluate(self, k: int, y) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        d = self.dim
        out = np.zeros(y.shape + (d,))
        if self.law_independent:
            return out
        t = self.grid.times[k]
        for j in range(d):
            plus = self.drift.field(t, y, self.stats_plus[j][k])
            minus = self.drift.field(t, y, self.stats_minus[j][k])
            out[..., :, j] = (plus - minus) / (2.0 * self.h)
        return out

    def along(self, bundle: PathBundle, paths=None) -> np.ndarray:
        """G_k at y = X_k for the selected paths, shape ``(M + 1, P, d, d)``."""
        _, x = _select(bundle, paths)
        return np.stack([self.evaluate(k, x[k]) for k in range(self.grid.steps + 1)])


def grad_x_b(drift, x0, grid: TimeGrid, n: int, h: Optional[float] = None, seed: int = 0,
             noise: Optional[np.ndarray] = None, tol: Optional[float] = None, max_iter: int = 50,
             base: Optional[PicardResult] = None, workers: int = 1) -> GradXbFlow:
    """Central-difference derivative of the law slot via Picard flows at x0 +/- h e_j.

    All 2d Picard runs share the same noise.  Their stopping tolerance defaults
    to ``1e-3 * h`` on the coupling distance: errors in the flows are divided
    by ``2h``, so the usual ``1e-3`` would swamp the difference quotient.
    When ``base`` (the Picard solution at x0) is given, each run starts from its
    flow shifted by ``+/- h e_j``.
    """
    x0 = as_point(x0, drift.dim)
    h = default_fd_step(x0) if h is None else float(h)
    if not h > 0:
        raise ValueError("finite-difference step h must be positive")
    if not drift.law_dependent:
        return GradXbFlow(drift, grid, h)
    if noise is None:
        noise = base.bundle.increments if base is not None else make_noise(seed, n, grid, drift.dim, workers)
    tol = 1e-3 * h if tol is None else tol
    d = drift.dim
    plus, minus, traces = [], [], []
    for j in range(d):
        e = np.zeros(d)
        e[j] = h
        pair = []
        for sign in (1.0, -1.0):
            start = None
            if base is not None:
                start = MeasureFlow(base.flow.grid, base.flow.atoms + sign * e)
            res = picard_law_iteration(drift, x0 + sign * e, grid, noise.shape[1], tol=tol, max_iter=max_iter,
                                       seed=seed, noise=noise, initial_flow=start, workers=workers,
                                       distance="coupling")
            pair.append(flow_statistics(drift, res.flow))
            traces.append(res.trace)
        plus.append(pair[0])
        minus.append(pair[1])
    return GradXbFlow(drift, grid, h, plus, minus, traces)


def first_variation(drift, bundle: PathBundle, flow: MeasureFlow, gxb: GradXbFlow, paths=None) -> JacobianFlow:
    """Z_{k+1} = Z_k + (J_k Z_k + G_k) dt from Z_0 = I."""
    idx, x = _select(bundle, paths)
    m = bundle.grid.steps
    d = bundle.dim
    stats = flow_statistics(drift, flow)
    dt = bundle.grid.dt
    times = bundle.grid.times
    out = np.empty((m + 1, idx.size, d, d))
    out[0] = np.eye(d)
    for k in range(m):
        jac = spatial_jacobian_stats(drift, times[k], x[k], stats[k])
        out[k + 1] = out[k] + (jac @ out[k] + gxb.evaluate(k, x[k])) * dt
    return JacobianFlow(out, FIRST_VARIATION, 0, idx)


def check_representation(first_var: JacobianFlow, terminal: np.ndarray, gxb_path: np.ndarray,
                         grid: TimeGrid, s_index: int) -> np.ndarray:
    """Per-path Frobenius residual of

        Z_T - [D_s X_T Z_s + sum_{k >= s} D_{t_k} X_T G_k dt]

    using left-point Riemann sums, so the residual is O(dt) in general and
    vanishes exactly when G is zero.
    """
    m = grid.steps
    if not 0 <= s_index < m:
        raise IndexError(f"s_index {s_index} outside 0..{m - 1}")
    z = first_var.matrices
    rhs = terminal[s_index] @ z[s_index]
    rhs = rhs + np.einsum("kpij,kpjl->pil", terminal[s_index:m], gxb_path[s_index:m]) * grid.dt
    return np.linalg.norm(z[m] - rhs, axis=(-2, -1))


def representation_residual(drift, bundle: PathBundle, flow: MeasureFlow, gxb: GradXbFlow, s_index: int,
                            paths=None) -> np.ndarray:
    fv = first_variation(drift, bundle, flow, gxb, paths)
    terminal = terminal_malliavin(drift, bundle, flow, paths)
    return check_representation(fv, terminal, gxb.along(bundle, paths), bundle.grid, s_index)


def ordered_exponential(generators: np.ndarray, dt: float) -> np.ndarray:
    """Time-ordered product exp(J_{m-1} dt) ... exp(J_0 dt) for generators ``(m, d, d)``."""
    d = generators.shape[-1]
    out = np.eye(d)
    for jac in generators:
        out = matrix_exp(jac, dt) @ out
    return out


def propagate_first_variation(drift, bundle: PathBundle, flow: MeasureFlow, gxb: GradXbFlow):
    """Yield ``(k, X_k, Z_k, G_k, b_k)`` for k = 0..M-1 over all paths without storing the flow.

    ``b_k`` is the drift value at ``(t_k, X_k, mu_k)``, returned because the
    mollified drifts compute it alongside the Jacobian at no extra cost.
    """
    m = bundle.grid.steps
    d = bundle.dim
    stats = flow_statistics(drift, flow)
    dt = bundle.grid.dt
    times = bundle.grid.times
    z = np.broadcast_to(np.eye(d), (bundle.n, d, d)).copy()
    for k in range(m):
        x = bundle.states[k]
        b, jac = field_and_jacobian(drift, times[k], x, stats[k])
        g = gxb.evaluate(k, x)
        yield k, x, z, g, b
        z = z + (jac @ z + g) * dt
