"""Estimator reports and configuration digests."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_jsonable)


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def digest(obj) -> str:
    """Stable short hash of a JSON-able configuration."""
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:16]


def mean_and_se(samples: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Column means and standard errors of ``samples`` with shape ``(N, ...)``."""
    samples = np.asarray(samples, dtype=np.float64)
    n = samples.shape[0]
    if n < 2:
        raise ValueError("need at least two samples for a standard error")
    mean = samples.mean(axis=0)
    se = samples.std(axis=0, ddof=1) / np.sqrt(n)
    return mean, se


@dataclass
class EstimatorReport:
    estimate: np.ndarray
    std_error: np.ndarray
    n: int
    method: str
    seed: int | None = None
    config_digest: str = ""
    runtime_ms: float = 0.0
    extra: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.estimate = np.atleast_1d(np.asarray(self.estimate, dtype=np.float64))
        self.std_error = np.atleast_1d(np.asarray(self.std_error, dtype=np.float64))
        if np.any(self.std_error < 0):
            raise ValueError("standard errors must be non-negative")
        if self.n < 2:
            raise ValueError("a report needs N >= 2 samples")

    def within(self, target, k: float = 3.0) -> np.ndarray:
        return np.abs(self.estimate - np.asarray(target)) <= k * self.std_error

    def to_dict(self, include_runtime: bool = True) -> dict:
        out = {
            "estimate": self.estimate.tolist(),
            "std_error": self.std_error.tolist(),
            "n": int(self.n),
            "seed": self.seed,
            "config_digest": self.config_digest,
            "method": self.method,
        }
        if include_runtime:
            out["runtime_ms"] = round(self.runtime_ms, 3)
        if self.extra:
            out["extra"] = json.loads(canonical_json(self.extra))
        return out

    def to_json(self, path=None, include_runtime: bool = True) -> str:
        text = json.dumps(self.to_dict(include_runtime), indent=2, sort_keys=True)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text

    @classmethod
    def from_dict(cls, data: dict) -> EstimatorReport:
        return cls(
            estimate=np.asarray(data["estimate"]),
            std_error=np.asarray(data["std_error"]),
            n=data["n"],
            method=data["method"],
            seed=data.get("seed"),
            config_digest=data.get("config_digest", ""),
            runtime_ms=data.get("runtime_ms", 0.0),
            extra=data.get("extra", {}),
        )
