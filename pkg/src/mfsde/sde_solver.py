"""Euler-Maruyama solvers for dX = b(t, X, law(X_t)) dt + dB.

Two routes are provided: an interacting particle system, where the law is the
ensemble's own empirical measure at each step, and the frozen-law equation,
where a given measure flow stands in for the law.  Iterating the frozen-law
solve on its own output (with the noise held fixed) gives the Picard fixed
point on the measure flow.

Arrays are time-major: states ``(M + 1, N, d)``, increments ``(M, N, d)``.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import rng
from .measure_flow import MeasureFlow, flow_distance

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
DEFAULT_TOL = 1e-3
DEFAULT_MAX_ITER = 25


class NumericalBlowUp(FloatingPointError):
    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"non-finite state at step {step}")


class PicardNonConvergence(RuntimeError):
    """Raised when the law iteration does not reach ``tol``; carries the trace."""

    def __init__(self, trace: list[float], tol: float, result: "PicardResult"):
        self.trace = trace
        self.tol = tol
        self.result = result
        super().__init__(
            f"Picard iteration did not reach tol={tol:g} in {len(trace)} iterations "
            f"(last distance {trace[-1]:.3g})"
        )


@dataclass(frozen=True)
class TimeGrid:
    horizon: float
    steps: int

    def __post_init__(self) -> None:
        if not self.horizon > 0:
            raise ValueError(f"horizon T must be positive, got {self.horizon}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValueError(f"number of steps M must be a positive integer, got {self.steps}")

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    @property
    def times(self) -> np.ndarray:
        t = np.arange(self.steps + 1) * self.dt
        t[-1] = self.horizon
        return t

    def index(self, t: float) -> int:
        k = int(round(t / self.dt))
        if not 0 <= k <= self.steps or abs(k * self.dt - t) > 1e-9 * max(1.0, self.horizon):
            raise ValueError(f"time {t} is not on the grid")
        return k


@dataclass(frozen=True, eq=False)
class PathBundle:
    x0: np.ndarray
    states: np.ndarray
    increments: np.ndarray
    grid: TimeGrid
    seed: Optional[int] = None
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.states.shape[1]

    @property
    def dim(self) -> int:
        return self.states.shape[2]

    @property
    def paths(self) -> np.ndarray:
        """View of shape ``(N, M + 1, d)``."""
        return self.states.transpose(1, 0, 2)

    @property
    def flow(self) -> MeasureFlow:
        return MeasureFlow(self.grid.times, self.states)

    def brownian(self) -> np.ndarray:
        """B_t on the grid, shape ``(M + 1, N, d)``."""
        b = np.zeros_like(self.states)
        np.cumsum(self.increments, axis=0, out=b[1:])
        return b

    def save(self, directory, drift_info: Optional[dict] = None) -> list[str]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        np.save(directory / "states.npy", self.states)
        np.save(directory / "increments.npy", self.increments)
        manifest = {
            "format_version": FORMAT_VERSION,
            "seed": self.seed,
            "N": self.n,
            "M": self.grid.steps,
            "T": self.grid.horizon,
            "d": self.dim,
            "x0": self.x0.tolist(),
            "drift": drift_info or self.meta.get("drift"),
            "layout": "time-major (M+1, N, d) float64",
        }
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
        return ["states.npy", "increments.npy", "manifest.json"]

    @classmethod
    def load(cls, directory) -> PathBundle:
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        if manifest.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported path bundle format {manifest.get('format_version')}")
        return cls(
            x0=np.asarray(manifest["x0"], dtype=np.float64),
            states=np.load(directory / "states.npy"),
            increments=np.load(directory / "increments.npy"),
            grid=TimeGrid(manifest["T"], manifest["M"]),
            seed=manifest["seed"],
            meta={"drift": manifest.get("drift")},
        )


@dataclass(frozen=True, eq=False)
class PicardResult:
    flow: MeasureFlow
    bundle: PathBundle
    trace: list[float]

    @property
    def iterations(self) -> int:
        return len(self.trace)


def as_point(x0, dim: Optional[int] = None) -> np.ndarray:
    x0 = np.atleast_1d(np.asarray(x0, dtype=np.float64))
    if x0.ndim != 1:
        raise ValueError("x0 must be a point in R^d")
    if dim is not None and x0.size != dim:
        raise ValueError(f"x0 has dimension {x0.size}, drift expects {dim}")
    return x0


def default_fd_step(x0) -> float:
    """1e-2 * max(1, |x0|): the central-difference step in the initial condition."""
    return 1e-2 * max(1.0, float(np.linalg.norm(x0)))


def make_noise(seed: int, n_paths: int, grid: TimeGrid, dim: int, workers: int = 1) -> np.ndarray:
    return rng.brownian_increments(seed, n_paths, grid.steps, dim, grid.dt, workers=workers)


def _chunks(n: int, workers: int) -> list[slice]:
    if workers <= 1:
        return [slice(0, n)]
    size = -(-n // workers)
    return [slice(lo, min(lo + size, n)) for lo in range(0, n, size)]


def _euler(drift, x0, grid: TimeGrid, noise: np.ndarray, stats: Optional[Sequence[np.ndarray]], workers: int) -> np.ndarray:
    """Euler scheme; ``stats[k]`` is the law statistic at t_k, or None for particles."""
    m, n, d = noise.shape
    states = np.empty((m + 1, n, d))
    states[0] = x0
    dt = grid.dt
    times = grid.times
    pieces = _chunks(n, workers)
    pool = ThreadPoolExecutor(max_workers=workers) if len(pieces) > 1 else None
    try:
        for k in range(m):
            x = states[k]
            s = drift.law_statistics(x) if stats is None else stats[k]

            def step(sl, x=x, s=s, k=k):
                states[k + 1, sl] = x[sl] + drift.field(times[k], x[sl], s) * dt + noise[k, sl]

            if pool is None:
                step(pieces[0])
            else:
                list(pool.map(step, pieces))
            if not np.all(np.isfinite(states[k + 1])):
                raise NumericalBlowUp(k + 1, f"non-finite state at step {k + 1} (t={times[k + 1]:.6g}) with drift {drift.name!r}")
    finally:
        if pool is not None:
            pool.shutdown()
    return states


def _check_noise(noise: np.ndarray, grid: TimeGrid, dim: int, n: Optional[int] = None) -> None:
    if noise.ndim != 3 or noise.shape[0] != grid.steps or noise.shape[2] != dim:
        raise ValueError(f"noise shape {noise.shape} does not match (M={grid.steps}, N, d={dim})")
    if n is not None and noise.shape[1] != n:
        raise ValueError(f"noise has {noise.shape[1]} paths, expected {n}")


def _meta(drift) -> dict:
    return {"drift": {"name": drift.name, **drift.params}}


def simulate_particles(drift, x0, grid: TimeGrid, n: int, seed: int = 0, noise: Optional[np.ndarray] = None,
                       workers: int = 1) -> tuple[PathBundle, MeasureFlow]:
    """Interacting particle system: the law at t_k is the empirical measure of all N particles."""
    if n < 2:
        raise ValueError("particle system needs N >= 2")
    x0 = as_point(x0, drift.dim)
    if noise is None:
        noise = make_noise(seed, n, grid, drift.dim, workers)
    _check_noise(noise, grid, drift.dim, n)
    states = _euler(drift, x0, grid, noise, None, workers)
    bundle = PathBundle(x0, states, noise, grid, seed, _meta(drift))
    return bundle, bundle.flow


def flow_statistics(drift, flow: MeasureFlow) -> list[np.ndarray]:
    return [drift.law_statistics(flow.atoms[k]) for k in range(len(flow))]


def solve_frozen_law(drift, flow: MeasureFlow, x0, grid: TimeGrid, noise: np.ndarray, seed: Optional[int] = None,
                     workers: int = 1) -> PathBundle:
    """Euler solution of dY = b(t, Y, flow(t)) dt + dB driven by the given increments."""
    if len(flow) != grid.steps + 1 or not np.allclose(flow.grid, grid.times, rtol=0, atol=1e-12):
        raise ValueError("measure flow grid does not match the time grid")
    x0 = as_point(x0, drift.dim)
    _check_noise(noise, grid, drift.dim)
    states = _euler(drift, x0, grid, noise, flow_statistics(drift, flow), workers)
    return PathBundle(x0, states, noise, grid, seed, _meta(drift))


def driftless_flow(x0, grid: TimeGrid, noise: np.ndarray) -> MeasureFlow:
    """Empirical law of x0 + B built from stored increments."""
    states = np.empty((grid.steps + 1,) + noise.shape[1:])
    states[0] = x0
    np.cumsum(noise, axis=0, out=states[1:])
    states[1:] += x0
    return MeasureFlow(grid.times, states)


def picard_law_iteration(drift, x0, grid: TimeGrid, n: int, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER,
                         seed: int = 0, noise: Optional[np.ndarray] = None, initial_flow: Optional[MeasureFlow] = None,
                         workers: int = 1, distance: str = "kantorovich") -> PicardResult:
    """Fixed point of flow -> law(solve_frozen_law(flow)) with the noise held fixed.

    ``trace[i]`` is the distance between iterates ``i + 1`` and ``i``; the
    default starting flow is the law of ``x0 + B``.  ``distance`` is either
    ``"kantorovich"`` (:func:`flow_distance`) or ``"coupling"``, the sup over
    time of the mean per-path displacement.  Successive iterates share their
    noise path by path, so the coupling value bounds the Kantorovich one from
    above and costs one pass instead of a sort per projection.
    """
    if distance not in ("kantorovich", "coupling"):
        raise ValueError(f"unknown flow distance {distance!r}")
    if not tol > 0:
        raise ValueError("tol must be positive")
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    x0 = as_point(x0, drift.dim)
    if noise is None:
        noise = make_noise(seed, n, grid, drift.dim, workers)
    _check_noise(noise, grid, drift.dim, n)
    flow = initial_flow if initial_flow is not None else driftless_flow(x0, grid, noise)
    trace: list[float] = []
    bundle = None
    for it in range(max_iter):
        bundle = solve_frozen_law(drift, flow, x0, grid, noise, seed, workers)
        new_flow = bundle.flow
        if distance == "coupling" and flow.n == new_flow.n:
            dist = coupling_distance(new_flow, flow)
        else:
            dist = flow_distance(new_flow, flow)
        trace.append(dist)
        logger.debug("picard iteration %d: flow distance %.3e", it + 1, dist)
        flow = new_flow
        if dist < tol:
            return PicardResult(flow, bundle, trace)
    raise PicardNonConvergence(trace, tol, PicardResult(flow, bundle, trace))


def coupling_distance(f: MeasureFlow, g: MeasureFlow) -> float:
    """max_k mean_i |f_k[i] - g_k[i]|, an upper bound on :func:`flow_distance`."""
    diff = f.atoms - g.atoms
    return float(np.sqrt(np.einsum("kni,kni->kn", diff, diff)).mean(axis=1).max())


def bounded_drift_excess(bundle: PathBundle, bound: float) -> float:
    """max over paths and times of |X_t - x0 - B_t| - bound * t (<= 0 for a drift bounded by ``bound``)."""
    disp = bundle.states - bundle.x0 - bundle.brownian()
    norms = np.linalg.norm(disp, axis=2)
    return float((norms - bound * bundle.grid.times[:, None]).max())


def sup_moment(bundle: PathBundle, p: float = 2.0) -> float:
    """Ensemble estimate of E[sup_t |X_t|^p]."""
    return float((np.linalg.norm(bundle.states, axis=2).max(axis=0) ** p).mean())
