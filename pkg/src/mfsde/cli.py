"""Batch experiment runner.

    mfsde simulate     --config cfg.json [--seed S] [--workers K] [--out DIR]
    mfsde gradient     --config cfg.json ...
    mfsde holder-scan  --config cfg.json ...
    mfsde validate-drift --config cfg.json ...
    mfsde phi-check    --config cfg.json ...

Exit codes: 0 success, 1 a validation command found a violation, 2 invalid
configuration, 3 Picard non-convergence, 4 numerical blow-up.

Result files carry no timing information, so identical configurations give
byte-identical results; wall times go to ``manifest.json`` only.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .bel import (
    HypothesisError,
    bel_reports,
    build_observable,
    build_weight,
    check_phi_integrability,
    girsanov_estimate,
    prepare,
)
from .drift import DriftError, build_drift, probe_metadata
from .oracle import fd_gradient
from .report import canonical_json, digest, mean_and_se
from .sde_solver import (
    NumericalBlowUp,
    PicardNonConvergence,
    TimeGrid,
    make_noise,
    picard_law_iteration,
    simulate_particles,
)

logger = logging.getLogger("mfsde")

SCHEMA_VERSION = 1
COMMANDS = ("simulate", "gradient", "holder-scan", "validate-drift", "phi-check")
EXIT_OK, EXIT_VIOLATION, EXIT_CONFIG, EXIT_PICARD, EXIT_NUMERIC = 0, 1, 2, 3, 4


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    command: str
    drift: dict
    d: int
    x0: list
    T: float
    M: int
    N: int
    seed: int = 0
    output: str = "out"
    solver: str = "picard"
    estimator: dict = field(default_factory=dict)
    phi: dict = field(default_factory=lambda: {"name": "coordinate", "index": 0})
    holder: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    @classmethod
    def from_dict(cls, raw: dict, command: Optional[str] = None) -> ExperimentConfig:
        data = dict(raw)
        if command is not None:
            data["command"] = command
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config field(s): {', '.join(unknown)}")
        missing = [k for k in ("command", "d", "T", "M", "N") if k not in data]
        if missing:
            raise ConfigError(f"missing config field(s): {', '.join(missing)}")
        data.setdefault("drift", {"name": "zero"})
        data.setdefault("x0", [0.0] * int(data["d"]))
        cfg = cls(**data)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"schema_version: expected {SCHEMA_VERSION}, got {self.schema_version}")
        if self.command not in COMMANDS:
            raise ConfigError(f"command: unknown {self.command!r}; expected one of {COMMANDS}")
        for name in ("d", "M", "N"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"{name}: must be a positive integer, got {value!r}")
        if self.N < 2:
            raise ConfigError("N: at least two paths are needed")
        if not isinstance(self.T, (int, float)) or not self.T > 0:
            raise ConfigError(f"T: must be positive, got {self.T!r}")
        if not isinstance(self.x0, list) or len(self.x0) != self.d:
            raise ConfigError(f"x0: must be a list of length d={self.d}")
        if not isinstance(self.seed, int) or not 0 <= self.seed < 2 ** 64:
            raise ConfigError(f"seed: must be an unsigned 64-bit integer, got {self.seed!r}")
        if self.solver not in ("picard", "particles"):
            raise ConfigError(f"solver: expected 'picard' or 'particles', got {self.solver!r}")
        for key in ("tol", "h"):
            value = self.estimator.get(key)
            if value is not None and not value > 0:
                raise ConfigError(f"estimator.{key}: must be positive, got {value!r}")
        max_iter = self.estimator.get("max_iter")
        if max_iter is not None and (not isinstance(max_iter, int) or max_iter < 1):
            raise ConfigError(f"estimator.max_iter: must be a positive integer, got {max_iter!r}")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @property
    def digest(self) -> str:
        # the output directory does not change results
        body = self.to_dict()
        body.pop("output")
        return digest(body)

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid(float(self.T), self.M)

    @property
    def tol(self) -> float:
        return float(self.estimator.get("tol", 1e-3))

    @property
    def max_iter(self) -> int:
        return int(self.estimator.get("max_iter", 25))


@dataclass
class RunManifest:
    config_digest: str
    seed: int
    command: str
    tool_version: str = __version__
    stage_seconds: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    picard_trace: list = field(default_factory=list)
    status: str = "ok"
    message: str = ""

    def write(self, directory: Path) -> Path:
        path = directory / "manifest.json"
        path.write_text(json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n")
        return path


class _Stage:
    def __init__(self, manifest: RunManifest, name: str):
        self.manifest, self.name = manifest, name

    def __enter__(self):
        self.start = time.perf_counter()

    def __exit__(self, *exc):
        self.manifest.stage_seconds[self.name] = round(time.perf_counter() - self.start, 4)


def _write_csv(path: Path, header: list[str], rows, cfg_digest: str) -> str:
    with path.open("w") as fh:
        fh.write(f"# config_digest={cfg_digest}\n")
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")
    return path.name


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _write_json(path: Path, obj: dict) -> str:
    path.write_text(json.dumps(json.loads(canonical_json(obj)), indent=2, sort_keys=True) + "\n")
    return path.name


def _solve(cfg: ExperimentConfig, drift, workers: int, manifest: RunManifest, x0=None, noise=None, stage="solve"):
    x0 = np.asarray(cfg.x0 if x0 is None else x0, dtype=np.float64)
    with _Stage(manifest, stage):
        if cfg.solver == "particles":
            bundle, flow = simulate_particles(drift, x0, cfg.grid, cfg.N, cfg.seed, noise=noise, workers=workers)
            return bundle, flow, []
        res = picard_law_iteration(drift, x0, cfg.grid, cfg.N, cfg.tol, cfg.max_iter, cfg.seed,
                                   noise=noise, workers=workers)
    return res.bundle, res.flow, res.trace


def run_simulate(cfg: ExperimentConfig, out: Path, workers: int = 1) -> RunManifest:
    manifest = RunManifest(cfg.digest, cfg.seed, cfg.command)
    drift = build_drift(cfg.drift, cfg.d)
    bundle, flow, trace = _solve(cfg, drift, workers, manifest)
    manifest.picard_trace = trace
    with _Stage(manifest, "write"):
        flow_dir = out / "flow"
        flow.save(flow_dir)
        manifest.outputs += [f"flow/{p.name}" for p in sorted(flow_dir.iterdir())]
        d = cfg.d
        header = ["t"] + [f"mean_{i}" for i in range(d)] + [f"se_{i}" for i in range(d)] \
            + [f"var_{i}" for i in range(d)] + ["first_moment"]
        rows = []
        for k, t in enumerate(cfg.grid.times):
            x = bundle.states[k]
            mean, se = mean_and_se(x)
            rows.append([t, *mean, *se, *x.var(axis=0, ddof=1), float(np.linalg.norm(x, axis=1).mean())])
        manifest.outputs.append(_write_csv(out / "moments.csv", header, rows, cfg.digest))
        manifest.outputs.append(_write_csv(out / "picard_trace.csv", ["iteration", "flow_distance"],
                                           [[i + 1, v] for i, v in enumerate(trace)], cfg.digest))
    return manifest


def run_gradient(cfg: ExperimentConfig, out: Path, workers: int = 1) -> RunManifest:
    manifest = RunManifest(cfg.digest, cfg.seed, cfg.command)
    est = cfg.estimator
    methods = est.get("method", "bel")
    methods = [methods] if isinstance(methods, str) else list(methods)
    bad = sorted(set(methods) - {"bel", "fd", "girsanov-check"})
    if bad:
        raise ConfigError(f"estimator.method: unknown {bad}")
    drift = build_drift(cfg.drift, cfg.d)
    phi = build_observable(cfg.phi)
    grid = cfg.grid
    x0 = np.asarray(cfg.x0, dtype=np.float64)
    with _Stage(manifest, "noise"):
        noise = make_noise(cfg.seed, cfg.N, grid, cfg.d, workers)
    reports = {}
    if "bel" in methods:
        weights = est.get("a", "uniform")
        weights = weights if isinstance(weights, list) else [weights]
        with _Stage(manifest, "bel"):
            setup = prepare(drift, x0, grid, cfg.N, cfg.seed, cfg.tol, cfg.max_iter, est.get("h"),
                            est.get("mollify", 64), noise=noise, workers=workers)
            manifest.picard_trace = setup.solution.trace
            for i, rep in enumerate(bel_reports(setup, [build_weight(w, grid) for w in weights], phi, cfg.digest)):
                reports["bel" if i == 0 else f"bel_{i}"] = rep
    if "fd" in methods:
        with _Stage(manifest, "fd"):
            reports["fd"] = fd_gradient(drift, x0, grid, cfg.N, phi, est.get("h"), cfg.seed, cfg.tol,
                                        cfg.max_iter, noise=noise, workers=workers, config_digest=cfg.digest)
    if "girsanov-check" in methods:
        with _Stage(manifest, "girsanov"):
            reports["girsanov"] = girsanov_estimate(drift, x0, grid, cfg.N, phi, cfg.seed, tol=cfg.tol,
                                                    max_iter=cfg.max_iter, noise=noise, workers=workers,
                                                    config_digest=cfg.digest)
    with _Stage(manifest, "write"):
        for name, rep in reports.items():
            manifest.stage_seconds[f"{name}_runtime"] = round(rep.runtime_ms / 1e3, 4)
            manifest.outputs.append(_write_json(out / f"report_{name}.json", rep.to_dict(include_runtime=False)))
        if "bel" in reports and "fd" in reports:
            b, f = reports["bel"], reports["fd"]
            rows = []
            for j in range(cfg.d):
                diff = abs(b.estimate[j] - f.estimate[j])
                limit = 3.0 * (b.std_error[j] + f.std_error[j])
                rows.append([j, b.estimate[j], b.std_error[j], f.estimate[j], f.std_error[j], diff, limit,
                             "pass" if diff <= limit else "fail"])
            manifest.outputs.append(_write_csv(
                out / "comparison.csv",
                ["component", "bel", "bel_se", "fd", "fd_se", "abs_diff", "limit_3se", "verdict"], rows, cfg.digest))
    return manifest


def _holder_settings(cfg: ExperimentConfig) -> tuple[list, list, float]:
    h = cfg.holder
    grid = cfg.grid
    dt = grid.dt
    lags = h.get("time_lags", [dt * 2 ** j for j in range(5) if dt * 2 ** j <= grid.horizon / 2])
    start = h.get("s", grid.horizon / 4)
    pairs = h.get("time_pairs", [[start, start + lag] for lag in lags])
    offsets = h.get("space_offsets", [0.025, 0.05, 0.1, 0.2, 0.4])
    t_space = h.get("t", grid.horizon)
    for s, t in pairs:
        if not (0 <= s <= grid.horizon and 0 <= t <= grid.horizon):
            raise ConfigError(f"holder.time_pairs: ({s}, {t}) outside [0, T]")
    if any(not o > 0 for o in offsets):
        raise ConfigError("holder.space_offsets: must be positive")
    return pairs, offsets, t_space


def _fit_exponent(x, y) -> float:
    slope, _ = np.polyfit(np.log(x), np.log(y), 1)
    return float(slope)


def run_holder_scan(cfg: ExperimentConfig, out: Path, workers: int = 1) -> RunManifest:
    manifest = RunManifest(cfg.digest, cfg.seed, cfg.command)
    pairs, offsets, t_space = _holder_settings(cfg)
    lags = {abs(t - s) for s, t in pairs}
    if len(pairs) < 3 or len(lags) < 3 or len(set(offsets)) < 3:
        raise ConfigError("holder-scan needs at least 3 distinct time lags and 3 distinct space offsets for a regression")
    drift = build_drift(cfg.drift, cfg.d)
    grid = cfg.grid
    noise = make_noise(cfg.seed, cfg.N, grid, cfg.d, workers)
    bundle, _, trace = _solve(cfg, drift, workers, manifest, noise=noise)
    manifest.picard_trace = trace
    time_rows = []
    for s, t in pairs:
        ks, kt = grid.index(s), grid.index(t)
        sq = np.sum((bundle.states[kt] - bundle.states[ks]) ** 2, axis=1)
        m, se = mean_and_se(sq)
        time_rows.append([s, t, abs(t - s), m[()], se[()]])
    k_space = grid.index(t_space)
    x0 = np.asarray(cfg.x0, dtype=np.float64)
    base_end = bundle.states[k_space]
    space_rows = []
    for i, delta in enumerate(offsets):
        shifted = x0.copy()
        shifted[0] += delta
        other, _, _ = _solve(cfg, drift, workers, manifest, x0=shifted, noise=noise, stage=f"solve_offset_{i}")
        sq = np.sum((other.states[k_space] - base_end) ** 2, axis=1)
        m, se = mean_and_se(sq)
        space_rows.append([t_space, delta, delta ** 2, m[()], se[()]])
    t_arr = np.array(time_rows)
    s_arr = np.array(space_rows)
    fit = {
        "time_exponent": _fit_exponent(t_arr[:, 2], t_arr[:, 3]),
        "space_exponent": _fit_exponent(s_arr[:, 2], s_arr[:, 3]),
        "config_digest": cfg.digest,
    }
    manifest.outputs.append(_write_csv(out / "holder_time.csv", ["s", "t", "lag", "mean_sq_dist", "se"],
                                       time_rows, cfg.digest))
    manifest.outputs.append(_write_csv(out / "holder_space.csv", ["t", "offset", "offset_sq", "mean_sq_dist", "se"],
                                       space_rows, cfg.digest))
    manifest.outputs.append(_write_json(out / "holder_fit.json", fit))
    return manifest


def run_validate_drift(cfg: ExperimentConfig, out: Path, workers: int = 1) -> RunManifest:
    manifest = RunManifest(cfg.digest, cfg.seed, cfg.command)
    drift = build_drift(cfg.drift, cfg.d)
    with _Stage(manifest, "probe"):
        problems = probe_metadata(drift, float(cfg.T), seed=cfg.seed)
    meta = drift.metadata
    result = {
        "drift": {"name": drift.name, **drift.params},
        "metadata": meta.__dict__,
        "violations": problems,
        "passed": not problems,
        "config_digest": cfg.digest,
    }
    manifest.outputs.append(_write_json(out / "drift_validation.json", result))
    if problems:
        manifest.status = "violation"
        manifest.message = f"{len(problems)} metadata violation(s)"
    return manifest


def run_phi_check(cfg: ExperimentConfig, out: Path, workers: int = 1) -> RunManifest:
    manifest = RunManifest(cfg.digest, cfg.seed, cfg.command)
    phi = build_observable(cfg.phi)
    if cfg.d > 3:
        raise ConfigError("d: the integrability check supports d <= 3")
    with _Stage(manifest, "quadrature"):
        res = check_phi_integrability(phi, cfg.d, float(cfg.T))
    value = res.value if math.isfinite(res.value) else None
    manifest.outputs.append(_write_json(out / "phi_check.json", {
        "phi": cfg.phi, "passed": res.passed, "value": value, "tail_fraction": res.tail_fraction,
        "message": res.message, "config_digest": cfg.digest,
    }))
    if not res.passed:
        manifest.status = "violation"
        manifest.message = res.message
    return manifest


RUNNERS = {
    "simulate": run_simulate,
    "gradient": run_gradient,
    "holder-scan": run_holder_scan,
    "validate-drift": run_validate_drift,
    "phi-check": run_phi_check,
}


def load_config(path, command: Optional[str] = None, seed: Optional[int] = None, out: Optional[str] = None) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    if seed is not None:
        raw["seed"] = seed
    if out is not None:
        raw["output"] = out
    return ExperimentConfig.from_dict(raw, command)


def run(cfg: ExperimentConfig, workers: int = 1) -> tuple[int, RunManifest]:
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    # the output location is left out so that relocated runs stay byte-identical
    body = cfg.to_dict()
    body.pop("output")
    (out / "config.json").write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
    try:
        manifest = RUNNERS[cfg.command](cfg, out, workers)
        code = EXIT_VIOLATION if manifest.status == "violation" else EXIT_OK
    except (ConfigError, DriftError, HypothesisError) as exc:
        manifest, code = RunManifest(cfg.digest, cfg.seed, cfg.command, status="config_error", message=str(exc)), EXIT_CONFIG
    except PicardNonConvergence as exc:
        manifest = RunManifest(cfg.digest, cfg.seed, cfg.command, status="picard_nonconvergence", message=str(exc),
                               picard_trace=exc.trace)
        code = EXIT_PICARD
    except (NumericalBlowUp, FloatingPointError) as exc:
        manifest, code = RunManifest(cfg.digest, cfg.seed, cfg.command, status="numeric", message=str(exc)), EXIT_NUMERIC
    manifest.outputs.insert(0, "config.json")
    manifest.write(out)
    return code, manifest


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mfsde", description=__doc__.split("\n\n")[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="JSON experiment config")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--workers", type=int, default=1, help="worker threads (does not change results)")
    parser.add_argument("--out", help="override the output directory")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    if args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(args.config, args.command, args.seed, args.out)
    except (ConfigError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    code, manifest = run(cfg, args.workers)
    if code == EXIT_OK:
        logger.info("%s done; outputs in %s", cfg.command, cfg.output)
    else:
        print(f"{manifest.status}: {manifest.message}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
