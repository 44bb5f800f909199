"""Equal-mass empirical measures, measure flows and the Kantorovich (W1) distance."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

N_EXACT = 512
N_PROJECTIONS = 64
PROJECTION_SEED = 0x5EED


class MeasureError(ValueError):
    pass


def _frozen(a: np.ndarray) -> np.ndarray:
    view = np.asarray(a, dtype=np.float64).view()
    view.flags.writeable = False
    return view


@dataclass(frozen=True, eq=False)
class EmpiricalMeasure:
    """Uniform probability measure on ``atoms`` (shape ``(N, d)``)."""

    atoms: np.ndarray

    def __post_init__(self) -> None:
        atoms = np.asarray(self.atoms, dtype=np.float64)
        if atoms.ndim == 1:
            atoms = atoms[:, None]
        if atoms.ndim != 2 or atoms.shape[0] < 1 or atoms.shape[1] < 1:
            raise MeasureError(f"atoms must have shape (N, d) with N, d >= 1, got {atoms.shape}")
        if not np.all(np.isfinite(atoms)):
            raise MeasureError("atoms contain NaN or Inf")
        object.__setattr__(self, "atoms", _frozen(atoms))

    @property
    def n(self) -> int:
        return self.atoms.shape[0]

    @property
    def dim(self) -> int:
        return self.atoms.shape[1]

    @classmethod
    def dirac(cls, point, n: int = 1) -> EmpiricalMeasure:
        point = np.atleast_1d(np.asarray(point, dtype=np.float64))
        return cls(np.broadcast_to(point, (n, point.size)).copy())

    def mean(self) -> np.ndarray:
        return self.atoms.mean(axis=0)

    def to_csv(self, path) -> None:
        np.savetxt(path, self.atoms, delimiter=",", fmt="%.17g")

    @classmethod
    def from_csv(cls, path) -> EmpiricalMeasure:
        return cls(np.loadtxt(path, delimiter=",", ndmin=2))


class Distance(float):
    """A float carrying whether it was computed exactly."""

    exact: bool

    def __new__(cls, value: float, exact: bool = True):
        obj = super().__new__(cls, value)
        obj.exact = exact
        return obj


def first_moment(mu: EmpiricalMeasure) -> float:
    """K(mu, delta_0): the mean Euclidean norm of the atoms."""
    return float(np.linalg.norm(mu.atoms, axis=1).mean())


def _sphere_mean_abs_coordinate(d: int) -> float:
    # E|theta_1| for theta uniform on the unit sphere in R^d
    return math.exp(math.lgamma(d / 2) - math.lgamma((d + 1) / 2)) / math.sqrt(math.pi)


def projection_set(d: int, count: int = N_PROJECTIONS, seed: int = PROJECTION_SEED) -> np.ndarray:
    """Stratified unit directions: even angles in 2-D, random orthonormal frames above."""
    rng = np.random.default_rng(seed)
    if d == 1:
        return np.ones((1, 1))
    if d == 2:
        angles = (np.arange(count) + rng.random()) * np.pi / count
        return np.column_stack([np.cos(angles), np.sin(angles)])
    frames = []
    while sum(f.shape[0] for f in frames) < count:
        q, r = np.linalg.qr(rng.standard_normal((d, d)))
        frames.append((q * np.sign(np.diag(r))).T)
    return np.concatenate(frames)[:count]


def _w1_sorted(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    # columnwise 1-d W1 between equal-size samples
    return np.abs(np.sort(x, axis=0) - np.sort(y, axis=0)).mean(axis=0)


def sliced_kantorovich(
    mu: EmpiricalMeasure,
    nu: EmpiricalMeasure,
    n_projections: int = N_PROJECTIONS,
    seed: int = PROJECTION_SEED,
) -> float:
    """Sliced W1 rescaled by 1/E|theta_1| so that translations are measured exactly."""
    _check_pair(mu, nu)
    d = mu.dim
    if d == 1:
        return float(_w1_sorted(mu.atoms[:, 0], nu.atoms[:, 0]))
    theta = projection_set(d, n_projections, seed)
    per_dir = _w1_sorted(mu.atoms @ theta.T, nu.atoms @ theta.T)
    return float(per_dir.mean() / _sphere_mean_abs_coordinate(d))


def exact_kantorovich(mu: EmpiricalMeasure, nu: EmpiricalMeasure) -> float:
    """W1 by minimum-cost perfect matching on the Euclidean cost matrix."""
    _check_pair(mu, nu)
    if mu.dim == 1:
        return float(_w1_sorted(mu.atoms[:, 0], nu.atoms[:, 0]))
    cost = cdist(mu.atoms, nu.atoms)
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].mean())


def _check_pair(mu: EmpiricalMeasure, nu: EmpiricalMeasure) -> None:
    if mu.dim != nu.dim:
        raise MeasureError(f"dimension mismatch: {mu.dim} vs {nu.dim}")
    if mu.n != nu.n:
        raise MeasureError(f"unequal atom counts: {mu.n} vs {nu.n}")


def kantorovich(
    mu: EmpiricalMeasure,
    nu: EmpiricalMeasure,
    n_exact: int = N_EXACT,
    n_projections: int = N_PROJECTIONS,
) -> Distance:
    """W1 distance between equal-size uniform empirical measures.

    Exact for ``d == 1`` (sorted samples) and for ``N <= n_exact`` (assignment);
    otherwise the sliced approximation, returned with ``exact=False``.
    """
    _check_pair(mu, nu)
    if mu.dim == 1 or mu.n <= n_exact:
        return Distance(exact_kantorovich(mu, nu), exact=True)
    return Distance(sliced_kantorovich(mu, nu, n_projections), exact=False)


@dataclass(frozen=True, eq=False)
class MeasureFlow:
    """Empirical measures on a time grid, stored as ``atoms[k]`` of shape ``(N, d)``."""

    grid: np.ndarray
    atoms: np.ndarray

    def __post_init__(self) -> None:
        grid = np.asarray(self.grid, dtype=np.float64)
        atoms = np.asarray(self.atoms, dtype=np.float64)
        if grid.ndim != 1 or grid.size < 2:
            raise MeasureError("grid needs at least two time points")
        if grid[0] != 0.0 or np.any(np.diff(grid) <= 0):
            raise MeasureError("grid must start at 0 and be strictly increasing")
        if atoms.ndim != 3 or atoms.shape[0] != grid.size:
            raise MeasureError(f"atoms shape {atoms.shape} does not match grid of length {grid.size}")
        if atoms.shape[1] < 1 or atoms.shape[2] < 1:
            raise MeasureError("flow needs N >= 1 atoms in d >= 1 dimensions")
        object.__setattr__(self, "grid", _frozen(grid))
        object.__setattr__(self, "atoms", _frozen(atoms))

    @property
    def horizon(self) -> float:
        return float(self.grid[-1])

    @property
    def n(self) -> int:
        return self.atoms.shape[1]

    @property
    def dim(self) -> int:
        return self.atoms.shape[2]

    def __len__(self) -> int:
        return self.grid.size

    def __getitem__(self, k: int) -> EmpiricalMeasure:
        return EmpiricalMeasure(self.atoms[k])

    @property
    def measures(self) -> list[EmpiricalMeasure]:
        return [self[k] for k in range(len(self))]

    @classmethod
    def constant(cls, grid, point, n: int = 1) -> MeasureFlow:
        point = np.atleast_1d(np.asarray(point, dtype=np.float64))
        grid = np.asarray(grid, dtype=np.float64)
        return cls(grid, np.broadcast_to(point, (grid.size, n, point.size)).copy())

    def means(self) -> np.ndarray:
        return self.atoms.mean(axis=1)

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        files = []
        for k in range(len(self)):
            name = f"measure_{k:05d}.csv"
            self[k].to_csv(directory / name)
            files.append(name)
        index = {"grid": self.grid.tolist(), "N": self.n, "d": self.dim, "files": files}
        (directory / "index.json").write_text(json.dumps(index, indent=2))

    @classmethod
    def load(cls, directory) -> MeasureFlow:
        directory = Path(directory)
        index = json.loads((directory / "index.json").read_text())
        atoms = np.stack([
            np.loadtxt(directory / name, delimiter=",", ndmin=2) for name in index["files"]
        ])
        flow = cls(np.asarray(index["grid"]), atoms)
        if flow.n != index["N"] or flow.dim != index["d"]:
            raise MeasureError(f"{directory}: index (N, d) disagrees with stored measures")
        return flow


def flow_distance(f: MeasureFlow, g: MeasureFlow) -> float:
    """sup over the grid of the pointwise Kantorovich distance."""
    if f.grid.shape != g.grid.shape or not np.array_equal(f.grid, g.grid):
        raise MeasureError("flows live on different time grids")
    if f.n != g.n or f.dim != g.dim:
        raise MeasureError(f"flow shapes differ: (N={f.n}, d={f.dim}) vs (N={g.n}, d={g.dim})")
    return max(float(kantorovich(f[k], g[k])) for k in range(len(f)))
