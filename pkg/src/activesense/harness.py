"""Seeded Monte Carlo experiments over SNR, strategy and exploration schedule."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import subprocess
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .array_model import SceneParams, complex_normal, steering_vector
from .bfim import NonIdentifiable
from .dual import NonConverged
from .strategies import RUNNERS, STRATEGIES, SensingConfig, StageRecord

logger = logging.getLogger(__name__)

CSV_HEADER = ("strategy", "snr_db", "t_explore", "trials", "wmse_mean", "wmse_stderr", "failures")
FAILURE_LIMIT = 0.01


class ExperimentAborted(RuntimeError):
    def __init__(self, message: str, report: "WmseReport"):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class ExperimentSpec:
    base: SensingConfig
    snr_grid: tuple[float, ...]
    trials: int = 200
    seed: int = 0
    strategies: tuple[str, ...] = STRATEGIES
    t_explore_values: tuple[int, ...] | None = None
    output: str | None = None
    alpha_random: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "snr_grid", tuple(float(s) for s in self.snr_grid))
        object.__setattr__(self, "strategies", tuple(self.strategies))
        if self.t_explore_values is None:
            object.__setattr__(self, "t_explore_values", (self.base.t_explore,))
        else:
            object.__setattr__(self, "t_explore_values", tuple(int(t) for t in self.t_explore_values))
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if not self.snr_grid:
            raise ValueError("snr_grid must be non-empty")
        unknown = set(self.strategies) - set(RUNNERS)
        if unknown:
            raise ValueError(f"unknown strategies {sorted(unknown)}; choose from {list(RUNNERS)}")
        for t in self.t_explore_values:
            if not 0 <= t <= self.base.stages:
                raise ValueError(f"t_explore {t} outside [0, {self.base.stages}]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["base"]["angle_range"] = list(self.base.angle_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        d = dict(d)
        base = d.pop("base")
        if isinstance(base, dict):
            base = SensingConfig(**base)
        return cls(base=base, **d)


@dataclass
class CellStats:
    """Aggregate over the successful trials of one (strategy, snr, t_explore) cell."""

    trials: int
    wmse_mean: float
    wmse_stderr: float
    failures: int
    bcrb_mean: float = float("nan")
    errors: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)
    bounds: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)
    trial_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int), repr=False)


@dataclass
class WmseReport:
    cells: dict[tuple[str, float, int], CellStats] = field(default_factory=dict)

    def sorted_keys(self) -> list[tuple[str, float, int]]:
        return sorted(self.cells)

    def __getitem__(self, key: tuple[str, float, int]) -> CellStats:
        return self.cells[key]


@dataclass
class TrialResult:
    """Per-trial output for every cell; ``error`` is None when the run failed."""

    trial: int
    key: tuple[str, float, int]
    error: float | None
    bound: float | None
    records: list[StageRecord] | None = None
    truth: np.ndarray | None = None
    estimate: np.ndarray | None = None
    failure: str | None = None


def draw_scene(seed: int, trial: int, config: SensingConfig, alpha_random: bool) -> SceneParams:
    """Angles uniform on the range; unit-magnitude coefficients unless ``alpha_random``."""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(trial, 0)))
    lo, hi = config.angle_range
    angles = np.sort(rng.uniform(lo, hi, config.n_targets))
    if alpha_random:
        coeffs = complex_normal(rng, (config.n_targets,))
    else:
        coeffs = np.exp(2j * np.pi * rng.uniform(size=config.n_targets))
    return SceneParams(angles, coeffs)


def trial_noise(seed: int, trial: int, config: SensingConfig) -> np.ndarray:
    """Stage-indexed noise shared by every strategy in a trial: ``(T, N_R, M_T)``."""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(trial, 2)))
    return complex_normal(rng, (config.stages, config.n_rx, config.m_tx))


def angle_error(truth: np.ndarray, estimate: np.ndarray, n_targets: int) -> float:
    """``(1/L) ||phi - phi_hat||^2`` with both angle vectors sorted."""
    phi = np.sort(truth[:n_targets])
    phi_hat = np.sort(estimate[:n_targets])
    return float(np.sum((phi - phi_hat) ** 2) / n_targets)


def run_trial(spec: ExperimentSpec, trial: int, keep_records: bool = False) -> list[TrialResult]:
    """Every (strategy, snr, t_explore) cell for one trial, with paired scene and noise."""
    base = spec.base
    scene = draw_scene(spec.seed, trial, base, spec.alpha_random)
    noise = trial_noise(spec.seed, trial, base)
    truth = scene.as_real_vector()
    out: list[TrialResult] = []
    for snr in spec.snr_grid:
        power = 10.0 ** (snr / 10.0)
        for name in spec.strategies:
            if name == "proposed":
                runs = [(t, (t,)) for t in spec.t_explore_values]
            else:
                # baselines ignore the schedule: run once, report under every value
                runs = [(spec.t_explore_values[0], spec.t_explore_values)]
            for t_exp, keys in runs:
                config = replace(base, power=power, t_explore=t_exp)
                rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(trial, 1)))
                try:
                    est, recs = RUNNERS[name](scene, config, rng, noise=noise, keep_posterior=keep_records)
                except (NonConverged, NonIdentifiable, np.linalg.LinAlgError) as exc:
                    logger.warning("trial %d %s snr=%g failed: %s", trial, name, snr, exc)
                    fail = f"{type(exc).__name__}: {exc}"
                    out.extend(TrialResult(trial, (name, snr, t), None, None, failure=fail) for t in keys)
                    continue
                err = angle_error(truth, est, base.n_targets)
                for t in keys:
                    out.append(
                        TrialResult(trial, (name, snr, t), err, recs[-1].bcrb, recs if keep_records else None, truth, est)
                    )
    return out


def _trial_worker(args):
    spec, trial = args
    return run_trial(spec, trial)


def aggregate(results: list[TrialResult]) -> WmseReport:
    """Deterministic reduction: values are ordered by trial index before summing."""
    by_key: dict[tuple[str, float, int], list[TrialResult]] = {}
    for r in results:
        by_key.setdefault(r.key, []).append(r)
    report = WmseReport()
    for key, rs in by_key.items():
        rs = sorted(rs, key=lambda r: r.trial)
        ok = [r for r in rs if r.error is not None]
        errs = np.array([r.error for r in ok], dtype=float)
        bounds = np.array([r.bound for r in ok], dtype=float)
        n = errs.size
        mean = float(np.mean(errs)) if n else float("nan")
        se = float(np.std(errs, ddof=1) / math.sqrt(n)) if n > 1 else float("nan")
        report.cells[key] = CellStats(
            trials=n,
            wmse_mean=mean,
            wmse_stderr=se,
            failures=len(rs) - n,
            bcrb_mean=float(np.mean(bounds)) if n else float("nan"),
            errors=errs,
            bounds=bounds,
            trial_ids=np.array([r.trial for r in ok], dtype=int),
        )
    return report


def run_experiment(
    spec: ExperimentSpec, workers: int = 1, return_results: bool = False
) -> WmseReport | tuple[WmseReport, list[TrialResult]]:
    """Run all trials (optionally in worker processes) and aggregate."""
    trials = range(spec.trials)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(_trial_worker, [(spec, t) for t in trials]))
    else:
        chunks = [run_trial(spec, t) for t in trials]
    results = [r for chunk in chunks for r in chunk]
    report = aggregate(results)
    bad = {k: c.failures for k, c in report.cells.items() if c.failures > FAILURE_LIMIT * spec.trials}
    if bad:
        raise ExperimentAborted(f"failure rate above {FAILURE_LIMIT:.0%} in cells {bad}", report)
    return (report, results) if return_results else report


def _fmt(x: float) -> str:
    return f"{x:.10g}"


def report_csv(report: WmseReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for key in report.sorted_keys():
        name, snr, t_exp = key
        c = report.cells[key]
        writer.writerow([name, _fmt(snr), t_exp, c.trials, _fmt(c.wmse_mean), _fmt(c.wmse_stderr), c.failures])
    return buf.getvalue()


def emit_csv(report: WmseReport, path: str | os.PathLike) -> Path:
    """Write the report with a fixed header, sorted rows and 10 significant digits."""
    path = Path(path)
    path.write_bytes(report_csv(report).encode("ascii"))
    return path


def read_csv(path: str | os.PathLike) -> WmseReport:
    report = WmseReport()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != CSV_HEADER:
            raise ValueError(f"unexpected header {header}")
        for row in reader:
            name, snr, t_exp, n, mean, se, fails = row
            report.cells[(name, float(snr), int(t_exp))] = CellStats(int(n), float(mean), float(se), int(fails))
    return report


def emit_trials_csv(results: list[TrialResult], path: str | os.PathLike) -> Path:
    """One row per successful run: final bound, squared error, certificate share."""
    path = Path(path)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["trial", "strategy", "snr_db", "t_explore", "final_bcrb", "sq_error", "failure"])
    for r in sorted(results, key=lambda r: (r.key, r.trial)):
        name, snr, t_exp = r.key
        writer.writerow(
            [
                r.trial,
                name,
                _fmt(snr),
                t_exp,
                _fmt(r.bound) if r.bound is not None else "",
                _fmt(r.error) if r.error is not None else "",
                r.failure or "",
            ]
        )
    path.write_bytes(buf.getvalue().encode("utf-8"))
    return path


def emit_stage_csv(records: list[StageRecord], path: str | os.PathLike) -> Path:
    """Per-stage record stream of one run."""
    path = Path(path)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["stage", "strategy", "bcrb", "certificates", "fallback", "explore", "entropy"])
    for rec in records:
        certs = ";".join(str(int(c)) for c in rec.certificates)
        writer.writerow(
            [rec.stage, rec.strategy, _fmt(rec.bcrb), certs, int(rec.fallback), int(rec.explore), _fmt(rec.entropy)]
        )
    path.write_bytes(buf.getvalue().encode("utf-8"))
    return path


PATTERN_POINTS = 512


def beampattern(w: np.ndarray, angles: np.ndarray) -> np.ndarray:
    """``|w_m^H a(phi)|^2`` for each column ``w_m``: shape ``(M, len(angles))``."""
    w = np.atleast_2d(np.asarray(w, dtype=complex))
    a = steering_vector(w.shape[0], angles)  # (P, N)
    return np.abs(a @ np.conj(w)).T ** 2


def emit_posterior_trace(
    records: list[StageRecord],
    grid_points: np.ndarray,
    posterior_path: str | os.PathLike,
    pattern_path: str | os.PathLike,
    angle_range: tuple[float, float],
) -> tuple[Path, Path]:
    """Grid weights per stage (stage 0 is the prior) and receive/transmit beampatterns.

    Requires records produced with ``keep_posterior=True``.
    """
    if not records or records[0].log_weights_before is None:
        raise ValueError("records carry no posterior weights; run with keep_posterior=True")
    n = grid_points.shape[1]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["stage", "grid_point_index"] + [f"angle_{i + 1}" for i in range(n)] + ["weight"])
    stages = [(0, records[0].log_weights_before)] + [(r.stage, r.log_weights_after) for r in records]
    for stage, lw in stages:
        w = np.exp(lw)
        for g in range(grid_points.shape[0]):
            writer.writerow([stage, g] + [_fmt(a) for a in grid_points[g]] + [_fmt(w[g])])
    Path(posterior_path).write_bytes(buf.getvalue().encode("utf-8"))

    angles = np.linspace(angle_range[0], angle_range[1], PATTERN_POINTS)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["stage", "side", "beam", "angle", "gain"])
    for rec in records:
        for side, mat in (("rx", rec.w), ("tx", rec.v)):
            gains = beampattern(mat, angles)
            for m in range(gains.shape[0]):
                for a, gval in zip(angles, gains[m]):
                    writer.writerow([rec.stage, side, m, _fmt(a), _fmt(gval)])
    Path(pattern_path).write_bytes(buf.getvalue().encode("utf-8"))
    return Path(posterior_path), Path(pattern_path)


def commit_hash() -> str:
    try:
        out = subprocess.run(
            ["git", "rev-parse", "HEAD"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def write_outputs(
    spec: ExperimentSpec,
    out_dir: str | os.PathLike,
    workers: int = 1,
    trace: bool = False,
) -> WmseReport:
    """Run an experiment and write ``wmse.csv``, ``trials.csv``, ``run_meta.json`` (and traces)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    aborted = None
    try:
        report, results = run_experiment(spec, workers=workers, return_results=True)
    except ExperimentAborted as exc:
        aborted = exc
        report, results = exc.report, []
    emit_csv(report, out / "wmse.csv")
    if results:
        emit_trials_csv(results, out / "trials.csv")
    meta = {
        "spec": spec.to_dict(),
        "seed": spec.seed,
        "commit": commit_hash(),
        "version": __version__,
        "bcrb_mean": {f"{k[0]}|{_fmt(k[1])}|{k[2]}": c.bcrb_mean for k, c in sorted(report.cells.items())},
        "aborted": str(aborted) if aborted else None,
    }
    (out / "run_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    if trace:
        write_trace(spec, out)
    if aborted:
        raise aborted
    return report


def write_trace(spec: ExperimentSpec, out: Path) -> None:
    """Trace trial 0 of the first strategy at the first SNR and schedule value."""
    from .posterior import init_posterior

    base = replace(spec.base, power=10.0 ** (spec.snr_grid[0] / 10.0), t_explore=spec.t_explore_values[0])
    scene = draw_scene(spec.seed, 0, base, spec.alpha_random)
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(0, 1)))
    _, recs = RUNNERS[spec.strategies[0]](
        scene, base, rng, noise=trial_noise(spec.seed, 0, base), keep_posterior=True
    )
    grid = init_posterior(base.angle_range, base.grid_k, base.n_targets).grid.points
    emit_posterior_trace(recs, grid, out / "posterior_trace.csv", out / "beampattern.csv", base.angle_range)
    emit_stage_csv(recs, out / "stages.csv")
