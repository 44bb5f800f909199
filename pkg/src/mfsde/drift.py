"""Drift coefficients b(t, y, mu), their regularity metadata, and Gaussian mollification.

A drift sees the law only through a short vector of statistics computed from
the atoms of an empirical measure (mean, first moment, ...).  Fields are
vectorized over points: ``y`` has shape ``(..., d)`` and the result matches it.
Law-Lipschitz constants are unaffected by mollification since smoothing acts in
``y`` only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy import special

from .measure_flow import EmpiricalMeasure, kantorovich, first_moment

FieldFn = Callable[[float, np.ndarray, np.ndarray], np.ndarray]
JacobianFn = Callable[[float, np.ndarray, np.ndarray], np.ndarray]
StatsFn = Callable[[np.ndarray], np.ndarray]

DEFAULT_NODES = 32
FD_STEP = 1e-5
MAX_NODES_PER_AXIS = 200  # the Golub-Welsch weights overflow beyond this


class DriftError(ValueError):
    pass


@dataclass(frozen=True)
class DriftMetadata:
    bound: Optional[float] = None  # None: unbounded
    linear_growth: float = 0.0
    law_lipschitz: Optional[float] = None  # None: not Lipschitz in the law
    spatially_smooth: bool = False
    modulus: Optional[str] = None

    @property
    def bounded(self) -> bool:
        return self.bound is not None


def _apply(a: np.ndarray, y: np.ndarray) -> np.ndarray:
    # y @ a.T without BLAS, so results do not depend on the batch size
    out = y[..., 0, None] * a[:, 0]
    for j in range(1, a.shape[1]):
        out = out + y[..., j, None] * a[:, j]
    return out


def _no_stats(atoms: np.ndarray) -> np.ndarray:
    return np.empty(0)


def _mean_stats(atoms: np.ndarray) -> np.ndarray:
    return atoms.mean(axis=0)


def _first_moment_stats(atoms: np.ndarray) -> np.ndarray:
    return np.array([np.linalg.norm(atoms, axis=1).mean()])


@dataclass(frozen=True, eq=False)
class DriftSpec:
    name: str
    dim: int
    field: FieldFn
    metadata: DriftMetadata
    law_statistics: StatsFn = _no_stats
    jacobian: Optional[JacobianFn] = None
    params: dict = field(default_factory=dict)
    # optional exact Gaussian convolution: (t, y, stats, sigma) -> (field, jacobian)
    smoothed: Optional[Callable] = None

    @property
    def law_dependent(self) -> bool:
        return self.law_statistics is not _no_stats

    def statistics(self, mu) -> np.ndarray:
        atoms = mu.atoms if isinstance(mu, EmpiricalMeasure) else np.asarray(mu)
        return self.law_statistics(atoms)

    def __call__(self, t: float, y, mu) -> np.ndarray:
        return eval_drift(self, t, y, mu)


def eval_drift(spec, t: float, y, mu) -> np.ndarray:
    """b(t, y, mu) at a single point or a batch of points."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape[-1] != spec.dim:
        raise DriftError(f"{spec.name}: point has dimension {y.shape[-1]}, drift expects {spec.dim}")
    if isinstance(mu, EmpiricalMeasure) and mu.dim != spec.dim:
        raise DriftError(f"{spec.name}: measure has dimension {mu.dim}, drift expects {spec.dim}")
    out = spec.field(t, y, spec.statistics(mu))
    if not np.all(np.isfinite(out)):
        raise DriftError(f"drift {spec.name!r} returned a non-finite value at t={t}, y={y.tolist()}")
    return out


# --- built-in library --------------------------------------------------------

def zero_drift(dim: int) -> DriftSpec:
    return DriftSpec(
        "zero", dim,
        lambda t, y, s: np.zeros_like(y),
        DriftMetadata(bound=0.0, linear_growth=0.0, law_lipschitz=0.0, spatially_smooth=True),
        jacobian=lambda t, y, s: np.zeros(y.shape + (y.shape[-1],)),
    )


def constant_drift(dim: int, c) -> DriftSpec:
    c = np.broadcast_to(np.asarray(c, dtype=np.float64), (dim,)).copy()
    norm = float(np.linalg.norm(c))
    return DriftSpec(
        "constant", dim,
        lambda t, y, s: np.broadcast_to(c, y.shape).copy(),
        DriftMetadata(bound=norm, linear_growth=norm, law_lipschitz=0.0, spatially_smooth=True),
        jacobian=lambda t, y, s: np.zeros(y.shape + (dim,)),
        params={"c": c.tolist()},
    )


def linear_drift(dim: int, matrix) -> DriftSpec:
    """b(y) = A y."""
    a = np.asarray(matrix, dtype=np.float64)
    if a.ndim == 0:
        a = a * np.eye(dim)
    if a.shape != (dim, dim):
        raise DriftError(f"linear drift matrix must be {dim}x{dim}, got {a.shape}")
    return DriftSpec(
        "linear", dim,
        lambda t, y, s: _apply(a, y),
        DriftMetadata(linear_growth=float(np.linalg.norm(a, 2)), law_lipschitz=0.0, spatially_smooth=True),
        jacobian=lambda t, y, s: np.broadcast_to(a, y.shape + (dim,)).copy(),
        params={"A": a.tolist()},
    )


def mean_field_ou(dim: int, alpha: float = 1.0, beta: float = 0.5, clip: Optional[float] = None) -> DriftSpec:
    """b(t, y, mu) = -alpha y + beta mean(mu), optionally clipped componentwise to [-clip, clip]."""
    if alpha < 0:
        raise DriftError("mean_field_ou: alpha must be >= 0")

    def raw(y, s):
        return -alpha * y + beta * s

    if clip is None:
        fld = lambda t, y, s: raw(y, s)
        jac = lambda t, y, s: np.broadcast_to(-alpha * np.eye(dim), y.shape + (dim,)).copy()
        bound = None
    else:
        clip = float(clip)
        if clip <= 0:
            raise DriftError("mean_field_ou: clip must be positive")
        fld = lambda t, y, s: np.clip(raw(y, s), -clip, clip)

        def jac(t, y, s):
            active = np.abs(raw(y, s)) < clip
            return -alpha * active[..., :, None] * np.eye(dim)

        bound = clip * math.sqrt(dim)
    return DriftSpec(
        "mean_field_ou", dim, fld,
        DriftMetadata(bound=bound, linear_growth=max(alpha, abs(beta)),
                      law_lipschitz=abs(beta), spatially_smooth=True, modulus="lipschitz"),
        law_statistics=_mean_stats, jacobian=jac,
        params={"alpha": alpha, "beta": beta, "clip": clip},
    )


def sign_attractor(dim: int, strength: float = 1.0, cap: float = 1.0) -> DriftSpec:
    """b(t, y, mu) = (-strength sign(y_1) + min(K(mu, delta_0), cap)) e_1.

    Bounded, 1-Lipschitz in the law, discontinuous across {y_1 = 0}.
    """

    def fld(t, y, s):
        out = np.zeros_like(y)
        out[..., 0] = -strength * np.sign(y[..., 0]) + min(float(s[0]), cap)
        return out

    def smoothed(t, y, s, sigma):
        # E[sign(y + sigma Z)] = erf(y / (sigma sqrt 2)); its derivative is twice the normal density
        u = y[..., 0] / sigma
        out = np.zeros_like(y)
        out[..., 0] = -strength * special.erf(u / math.sqrt(2.0)) + min(float(s[0]), cap)
        jac = np.zeros(y.shape + (y.shape[-1],))
        jac[..., 0, 0] = -strength * 2.0 * np.exp(-0.5 * u * u) / (sigma * math.sqrt(2.0 * math.pi))
        return out, jac

    bound = abs(strength) + abs(cap)
    return DriftSpec(
        "sign_attractor", dim, fld,
        DriftMetadata(bound=bound, linear_growth=bound, law_lipschitz=1.0,
                      spatially_smooth=False, modulus="lipschitz"),
        law_statistics=_first_moment_stats,
        params={"strength": strength, "cap": cap},
        smoothed=smoothed,
    )


def tanh_mean_field(dim: int, kappa: float = 1.0, beta: float = 0.5) -> DriftSpec:
    """b(t, y, mu) = -kappa tanh(y) + beta tanh(mean(mu)), componentwise."""

    def jac(t, y, s):
        return (-kappa / np.cosh(y) ** 2)[..., :, None] * np.eye(dim)

    bound = (abs(kappa) + abs(beta)) * math.sqrt(dim)
    return DriftSpec(
        "tanh_mean_field", dim,
        lambda t, y, s: -kappa * np.tanh(y) + beta * np.tanh(s),
        DriftMetadata(bound=bound, linear_growth=bound, law_lipschitz=abs(beta),
                      spatially_smooth=True, modulus="lipschitz"),
        law_statistics=_mean_stats, jacobian=jac,
        params={"kappa": kappa, "beta": beta},
    )


def matrix_tanh(dim: int, matrix) -> DriftSpec:
    """b(y) = A tanh(y); non-commuting spatial Jacobians for non-normal A."""
    a = np.asarray(matrix, dtype=np.float64)
    if a.shape != (dim, dim):
        raise DriftError(f"matrix_tanh matrix must be {dim}x{dim}, got {a.shape}")
    bound = float(np.linalg.norm(a, 2)) * math.sqrt(dim)
    return DriftSpec(
        "matrix_tanh", dim,
        lambda t, y, s: _apply(a, np.tanh(y)),
        DriftMetadata(bound=bound, linear_growth=bound, law_lipschitz=0.0, spatially_smooth=True),
        jacobian=lambda t, y, s: a * (1.0 / np.cosh(y) ** 2)[..., None, :],
        params={"A": a.tolist()},
    )


REGISTRY: dict[str, Callable[..., DriftSpec]] = {
    "zero": zero_drift,
    "constant": constant_drift,
    "linear": linear_drift,
    "mean_field_ou": mean_field_ou,
    "sign_attractor": sign_attractor,
    "tanh_mean_field": tanh_mean_field,
    "matrix_tanh": matrix_tanh,
}


def build_drift(config: dict, dim: int) -> DriftSpec:
    """Drift from a JSON block such as ``{"name": "mean_field_ou", "alpha": 1.0}``.

    An optional ``"mollify": n`` key wraps the result in :func:`mollify`.
    """
    params = dict(config)
    try:
        name = params.pop("name")
    except KeyError:
        raise DriftError("drift config needs a 'name'") from None
    n = params.pop("mollify", None)
    nodes = params.pop("nodes", DEFAULT_NODES)
    if name not in REGISTRY:
        raise DriftError(f"unknown drift {name!r}; known: {sorted(REGISTRY)}")
    try:
        spec = REGISTRY[name](dim, **params)
    except TypeError as exc:
        raise DriftError(f"bad parameters for drift {name!r}: {exc}") from None
    return mollify(spec, n, nodes) if n is not None else spec


# --- mollification -------------------------------------------------------------

def gauss_hermite_offsets(dim: int, nodes: int = DEFAULT_NODES) -> tuple[np.ndarray, np.ndarray]:
    """Tensor-product Gauss-Hermite rule for N(0, I_d) with about ``nodes`` points.

    Each axis gets ``round(nodes ** (1/d))`` points (at least 2).  Returns
    offsets of shape ``(Q, d)`` and weights summing to one.
    """
    per_axis = max(2, int(round(nodes ** (1.0 / dim))))
    if per_axis > MAX_NODES_PER_AXIS:
        raise DriftError(f"at most {MAX_NODES_PER_AXIS} quadrature nodes per axis are supported")
    x, w = hermegauss(per_axis)
    w = w / w.sum()
    grids = np.meshgrid(*([x] * dim), indexing="ij")
    offsets = np.stack([g.ravel() for g in grids], axis=1)
    weights = np.ones(1)
    for _ in range(dim):
        weights = np.outer(weights, w).ravel()
    return offsets, weights


@dataclass(frozen=True, eq=False)
class MollifiedDrift:
    """b_n(t, y, mu) = E[b(t, y + Z / sqrt(n), mu)], Z ~ N(0, I).

    Uses the base drift's exact convolution when it provides one, otherwise a
    fixed symmetric Gauss-Hermite rule.
    """

    base: DriftSpec
    n: int
    nodes: int = DEFAULT_NODES
    offsets: np.ndarray = field(init=False, repr=False)
    weights: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        offsets, weights = gauss_hermite_offsets(self.base.dim, self.nodes)
        object.__setattr__(self, "offsets", offsets)
        object.__setattr__(self, "weights", weights)

    @property
    def name(self) -> str:
        return f"{self.base.name}~n{self.n}"

    @property
    def dim(self) -> int:
        return self.base.dim

    @property
    def bandwidth(self) -> float:
        return 1.0 / math.sqrt(self.n)

    @property
    def metadata(self) -> DriftMetadata:
        m = self.base.metadata
        return DriftMetadata(bound=m.bound, linear_growth=m.linear_growth, law_lipschitz=m.law_lipschitz,
                             spatially_smooth=True, modulus=m.modulus)

    @property
    def params(self) -> dict:
        return {**self.base.params, "mollify": self.n, "nodes": self.nodes}

    @property
    def law_statistics(self) -> StatsFn:
        return self.base.law_statistics

    @property
    def law_dependent(self) -> bool:
        return self.base.law_dependent

    def statistics(self, mu) -> np.ndarray:
        return self.base.statistics(mu)

    def _accumulate(self, t, y, s, with_jacobian: bool):
        # one base evaluation per node on (..., d) arrays; the fixed summation
        # order keeps results independent of how points are batched
        y = np.asarray(y, dtype=np.float64)
        if self.base.smoothed is not None:
            out, jac = self.base.smoothed(t, y, s, self.bandwidth)
            return out, (jac if with_jacobian else None)
        d = y.shape[-1]
        shifts = self.offsets * self.bandwidth
        score = self.weights[:, None] * self.offsets * math.sqrt(self.n)
        acc = np.zeros_like(y)
        if with_jacobian and self.base.jacobian is not None:
            # smooth base: average its Jacobian, the exact derivative of this rule
            jac = np.zeros(y.shape + (d,))
            for q in range(self.weights.size):
                acc += self.weights[q] * self.base.field(t, y + shifts[q], s)
                jac += self.weights[q] * self.base.jacobian(t, y + shifts[q], s)
            return acc, jac
        cols = [np.zeros_like(y) for _ in range(d)] if with_jacobian else []
        for q in range(self.weights.size):
            v = self.base.field(t, y + shifts[q], s)
            acc += self.weights[q] * v
            for j, col in enumerate(cols):
                col += score[q, j] * v
        jac = np.stack(cols, axis=-1) if with_jacobian else None
        return acc, jac

    def field(self, t, y, s) -> np.ndarray:
        return self._accumulate(t, y, s, False)[0]

    def jacobian(self, t, y, s) -> np.ndarray:
        # without a base Jacobian: d/dy E[b(y + Z/sqrt(n))] = sqrt(n) E[b(y + Z/sqrt(n)) Z^T]
        return self._accumulate(t, y, s, True)[1]

    def field_and_jacobian(self, t, y, s) -> tuple[np.ndarray, np.ndarray]:
        return self._accumulate(t, y, s, True)

    def __call__(self, t: float, y, mu) -> np.ndarray:
        return eval_drift(self, t, y, mu)


def mollify(spec: DriftSpec, n: int, nodes: int = DEFAULT_NODES) -> MollifiedDrift:
    if isinstance(spec, MollifiedDrift):
        raise DriftError("drift is already mollified")
    if not spec.metadata.bounded:
        raise DriftError(f"cannot mollify unbounded drift {spec.name!r}: a uniform bound is required")
    if n < 1:
        raise DriftError("smoothing index n must be >= 1")
    return MollifiedDrift(spec, int(n), int(nodes))


def has_jacobian(spec) -> bool:
    return isinstance(spec, MollifiedDrift) or spec.jacobian is not None


def spatial_jacobian_stats(spec, t: float, y: np.ndarray, stats: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """d b^i / d y^j at points ``y`` of shape ``(..., d)``; result ``(..., d, d)``."""
    if has_jacobian(spec):
        return spec.jacobian(t, y, stats)
    d = y.shape[-1]
    out = np.empty(y.shape + (d,))
    for j in range(d):
        step = np.zeros(d)
        step[j] = h
        out[..., :, j] = (spec.field(t, y + step, stats) - spec.field(t, y - step, stats)) / (2 * h)
    return out


def spatial_jacobian(spec, t: float, y, mu, h: float = FD_STEP) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    jac = spatial_jacobian_stats(spec, t, y, spec.statistics(mu), h)
    if not np.all(np.isfinite(jac)):
        raise DriftError(f"drift {spec.name!r}: non-finite spatial Jacobian at t={t}, y={y.tolist()}")
    return jac


def field_and_jacobian(spec, t: float, y: np.ndarray, stats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(spec, MollifiedDrift):
        return spec.field_and_jacobian(t, y, stats)
    return spec.field(t, y, stats), spatial_jacobian_stats(spec, t, y, stats)


# --- metadata probes -------------------------------------------------------------

def probe_metadata(spec, horizon: float = 1.0, n_probes: int = 1000, seed: int = 0, atoms: int = 8) -> list[str]:
    """Check the declared bound, growth and law-Lipschitz constants on random probes.

    Returns a list of human-readable violations (empty when all probes pass).
    """
    rng = np.random.default_rng(seed)
    d = spec.dim
    meta = spec.metadata
    problems: list[str] = []
    tol = 1e-9
    for i in range(n_probes):
        t = float(rng.uniform(0, horizon))
        y = rng.normal(scale=3.0, size=d)
        mu = EmpiricalMeasure(rng.normal(scale=2.0, size=(atoms, d)) + rng.normal(scale=3.0, size=d))
        nu = EmpiricalMeasure(rng.normal(scale=2.0, size=(atoms, d)) + rng.normal(scale=3.0, size=d))
        b_mu = eval_drift(spec, t, y, mu)
        size = float(np.linalg.norm(b_mu))
        if meta.bound is not None and size > meta.bound * (1 + tol) + tol:
            problems.append(f"probe {i}: |b| = {size:.6g} exceeds bound {meta.bound}")
        growth = meta.linear_growth * (1 + np.linalg.norm(y) + first_moment(mu))
        if size > growth * (1 + tol) + tol:
            problems.append(f"probe {i}: |b| = {size:.6g} exceeds linear growth {growth:.6g}")
        if meta.law_lipschitz is not None:
            diff = float(np.linalg.norm(b_mu - eval_drift(spec, t, y, nu)))
            limit = meta.law_lipschitz * float(kantorovich(mu, nu))
            if diff > limit * (1 + tol) + tol:
                problems.append(f"probe {i}: law increment {diff:.6g} exceeds {limit:.6g}")
    return problems
