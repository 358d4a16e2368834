"""Monte Carlo batches over scenarios and the metric/CSV plumbing.

Every run is fully determined by one integer seed: the scenario generator
uses it directly and the calibration engine uses it shifted by a fixed prime,
so the two streams never overlap.  Runs are independent, which makes the
worker pool a plain map over seeds.
"""

from __future__ import annotations

import csv
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .nbp import CalibrationConfig, CalibrationResult, run_calibration
from .scenario import ScenarioConfig, make_scenario

CALIBRATION_SEED_OFFSET = 1_000_003


@dataclass
class RunConfig:
    """One experiment batch: scenario template plus calibration knobs."""

    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    window_start: int = 20
    window_length: int = 10
    n_particles: int = 100
    n_iterations: int = 16
    seeds: list[int] = field(default_factory=lambda: list(range(25)))
    variant: str = "quad"
    output_dir: str | None = None
    n_workers: int = 1
    dump_beliefs: bool = False

    def __post_init__(self) -> None:
        if self.window_length < 1:
            raise ValueError("window_length must be >= 1")
        if self.n_particles < 2:
            raise ValueError("n_particles must be >= 2")
        if self.n_iterations < 1:
            raise ValueError("n_iterations must be >= 1")
        if not self.seeds:
            raise ValueError("need at least one seed")
        if self.variant not in ("quad", "dual"):
            raise ValueError("variant must be 'quad' or 'dual'")
        if self.n_workers < 1:
            raise ValueError("n_workers must be >= 1")

    def calibration_config(self, seed: int) -> CalibrationConfig:
        return CalibrationConfig(
            window_start=self.window_start,
            window_length=self.window_length,
            n_particles=self.n_particles,
            n_iterations=self.n_iterations,
            variant=self.variant,
            seed=seed + CALIBRATION_SEED_OFFSET,
            keep_belief_history=self.dump_beliefs,
        )


@dataclass
class MetricsRow:
    """Per-run, per-iteration localization metrics."""

    run_id: int
    iteration: int
    network_mse: float
    mean_miss: float
    per_node_miss: dict[int, float]
    per_eval_ms: float

    def __post_init__(self) -> None:
        if self.network_mse < 0 or self.mean_miss < 0 or self.per_eval_ms < 0:
            raise ValueError("metrics must be non-negative")
        for v in self.per_node_miss.values():
            if v < 0:
                raise ValueError("miss distances must be non-negative")


def metrics_from_calibration(
    run_id: int, result: CalibrationResult, anchor: int
) -> list[MetricsRow]:
    """One row per iteration; mean miss excludes the anchor, whose error is
    pinned to zero by construction and would only dilute the average."""
    miss = result.miss_distances()  # (S, n)
    mse = result.network_mse()
    non_anchor = [i for i, node in enumerate(result.node_ids) if node != anchor]
    rows = []
    for s in range(miss.shape[0]):
        rows.append(
            MetricsRow(
                run_id=run_id,
                iteration=s + 1,
                network_mse=float(mse[s]),
                mean_miss=float(miss[s, non_anchor].mean()),
                per_node_miss={
                    node: float(miss[s, i]) for i, node in enumerate(result.node_ids)
                },
                per_eval_ms=result.per_eval_ms,
            )
        )
    return rows


def _run_single(args: tuple[int, int, RunConfig]) -> tuple[int, CalibrationResult]:
    run_id, seed, cfg = args
    scenario = make_scenario(replace(cfg.scenario, seed=seed))
    result = run_calibration(scenario, cfg.calibration_config(seed))
    return run_id, result


@dataclass
class ExperimentResult:
    config: RunConfig
    rows: list[MetricsRow]
    calibrations: list[CalibrationResult]

    def final_mean_miss(self) -> float:
        """Average of the last-iteration mean miss over runs."""
        last = max(r.iteration for r in self.rows)
        vals = [r.mean_miss for r in self.rows if r.iteration == last]
        return float(np.mean(vals))

    def total_filter_runs(self) -> int:
        return sum(c.filter_runs for c in self.calibrations)


def run_experiment(cfg: RunConfig) -> ExperimentResult:
    """Execute one calibration per seed and collect metrics; optionally write
    CSV artifacts under cfg.output_dir."""
    tasks = [(run_id, seed, cfg) for run_id, seed in enumerate(cfg.seeds)]
    if cfg.n_workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.n_workers) as pool:
            outcomes = list(pool.map(_run_single, tasks))
    else:
        outcomes = [_run_single(t) for t in tasks]

    rows: list[MetricsRow] = []
    calibrations: list[CalibrationResult] = []
    anchor = make_anchor_id(cfg)
    for run_id, result in outcomes:
        calibrations.append(result)
        rows.extend(metrics_from_calibration(run_id, result, anchor))

    result = ExperimentResult(config=cfg, rows=rows, calibrations=calibrations)
    if cfg.output_dir is not None:
        os.makedirs(cfg.output_dir, exist_ok=True)
        write_metrics_csv(os.path.join(cfg.output_dir, "metrics.csv"), rows)
        write_summary_csv(
            os.path.join(cfg.output_dir, "summary.csv"), summarize(rows)
        )
        write_estimates_csv(
            os.path.join(cfg.output_dir, "estimates.csv"), calibrations, cfg.seeds
        )
        if cfg.dump_beliefs:
            for run_id, calib in enumerate(calibrations):
                path = os.path.join(cfg.output_dir, f"beliefs_run{run_id}.csv")
                write_beliefs_csv(path, calib)
    return result


def make_anchor_id(cfg: RunConfig) -> int:
    # Grid scenarios always anchor at node 1.
    return 1


@dataclass
class SummaryRow:
    """Across-run quartiles at one iteration."""

    iteration: int
    n_runs: int
    miss_median: float
    miss_q1: float
    miss_q3: float
    mse_median: float
    mse_q1: float
    mse_q3: float


def _quartiles(values: list[float]) -> tuple[float, float, float]:
    arr = np.asarray(values, dtype=np.float64)
    q1, med, q3 = np.percentile(arr, [25.0, 50.0, 75.0])
    return float(med), float(q1), float(q3)


def summarize(rows: list[MetricsRow]) -> list[SummaryRow]:
    """Per-iteration median and quartiles of miss distance and network MSE."""
    if not rows:
        raise ValueError("no metrics to summarize")
    iterations = sorted({r.iteration for r in rows})
    out = []
    for it in iterations:
        misses = [r.mean_miss for r in rows if r.iteration == it]
        mses = [r.network_mse for r in rows if r.iteration == it]
        miss_med, miss_q1, miss_q3 = _quartiles(misses)
        mse_med, mse_q1, mse_q3 = _quartiles(mses)
        out.append(
            SummaryRow(
                iteration=it,
                n_runs=len(misses),
                miss_median=miss_med,
                miss_q1=miss_q1,
                miss_q3=miss_q3,
                mse_median=mse_med,
                mse_q1=mse_q1,
                mse_q3=mse_q3,
            )
        )
    return out


# --- CSV formats -------------------------------------------------------------
# metrics.csv   : run_id, iteration, network_mse, mean_miss, per_eval_ms,
#                 then one miss_<node> column per node id.
# summary.csv   : iteration, n_runs, miss_median, miss_q1, miss_q3,
#                 mse_median, mse_q1, mse_q3.
# estimates.csv : run_id, seed, iteration, node, est_x, est_y, true_x, true_y.
# beliefs_*.csv : iteration, node, particle, x, y.
# Floats are written with repr so parsing reproduces the values exactly.


def write_metrics_csv(path: str, rows: list[MetricsRow]) -> None:
    if not rows:
        raise ValueError("no metrics to write")
    node_ids = sorted(rows[0].per_node_miss)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["run_id", "iteration", "network_mse", "mean_miss", "per_eval_ms"]
            + [f"miss_{n}" for n in node_ids]
        )
        for r in rows:
            writer.writerow(
                [r.run_id, r.iteration, repr(r.network_mse), repr(r.mean_miss), repr(r.per_eval_ms)]
                + [repr(r.per_node_miss[n]) for n in node_ids]
            )


def read_metrics_csv(path: str) -> list[MetricsRow]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        node_ids = [int(c.split("_", 1)[1]) for c in header[5:]]
        rows = []
        for rec in reader:
            rows.append(
                MetricsRow(
                    run_id=int(rec[0]),
                    iteration=int(rec[1]),
                    network_mse=float(rec[2]),
                    mean_miss=float(rec[3]),
                    per_eval_ms=float(rec[4]),
                    per_node_miss={
                        n: float(v) for n, v in zip(node_ids, rec[5:])
                    },
                )
            )
    return rows


def write_summary_csv(path: str, rows: list[SummaryRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [
                "iteration",
                "n_runs",
                "miss_median",
                "miss_q1",
                "miss_q3",
                "mse_median",
                "mse_q1",
                "mse_q3",
            ]
        )
        for r in rows:
            writer.writerow(
                [
                    r.iteration,
                    r.n_runs,
                    repr(r.miss_median),
                    repr(r.miss_q1),
                    repr(r.miss_q3),
                    repr(r.mse_median),
                    repr(r.mse_q1),
                    repr(r.mse_q3),
                ]
            )


def write_estimates_csv(
    path: str, calibrations: list[CalibrationResult], seeds: list[int]
) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["run_id", "seed", "iteration", "node", "est_x", "est_y", "true_x", "true_y"]
        )
        for run_id, calib in enumerate(calibrations):
            for s in range(calib.estimates.shape[0]):
                for n_idx, node in enumerate(calib.node_ids):
                    est = calib.estimates[s, n_idx]
                    tru = calib.true_offsets[n_idx]
                    writer.writerow(
                        [
                            run_id,
                            seeds[run_id],
                            s + 1,
                            node,
                            repr(float(est[0])),
                            repr(float(est[1])),
                            repr(float(tru[0])),
                            repr(float(tru[1])),
                        ]
                    )


def write_beliefs_csv(path: str, calib: CalibrationResult) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "node", "particle", "x", "y"])
        for s, snapshot in enumerate(calib.belief_history):
            for node, samples in sorted(snapshot.items()):
                for l in range(samples.shape[0]):
                    writer.writerow(
                        [s + 1, node, l, repr(float(samples[l, 0])), repr(float(samples[l, 1]))]
                    )


# --- timing comparison -------------------------------------------------------


@dataclass
class TimingReport:
    """Per-edge-per-particle wall clock for both likelihood variants on one
    scenario, plus the filter-run counters that prove reuse."""

    quad_ms: float
    dual_ms: float
    quad_evals: int
    dual_evals: int
    filter_runs_quad: int
    filter_runs_dual: int
    n_sensors: int


def timing_comparison(scenario_cfg: ScenarioConfig, run_cfg: RunConfig) -> TimingReport:
    """Run one calibration per variant on the same scenario and report
    measured evaluation costs."""
    scenario = make_scenario(scenario_cfg)
    results = {}
    for variant in ("quad", "dual"):
        calib_cfg = replace_variant(run_cfg.calibration_config(scenario_cfg.seed), variant)
        results[variant] = run_calibration(scenario, calib_cfg)
    return TimingReport(
        quad_ms=results["quad"].per_eval_ms,
        dual_ms=results["dual"].per_eval_ms,
        quad_evals=results["quad"].eval_count,
        dual_evals=results["dual"].eval_count,
        filter_runs_quad=results["quad"].filter_runs,
        filter_runs_dual=results["dual"].filter_runs,
        n_sensors=len(scenario.network.node_ids),
    )


def replace_variant(cfg: CalibrationConfig, variant: str) -> CalibrationConfig:
    return replace(cfg, variant=variant)


def write_timing_csv(path: str, report: TimingReport) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [
                "variant",
                "per_eval_ms",
                "n_evals",
                "filter_runs",
                "n_sensors",
            ]
        )
        writer.writerow(
            ["quad", repr(report.quad_ms), report.quad_evals, report.filter_runs_quad, report.n_sensors]
        )
        writer.writerow(
            ["dual", repr(report.dual_ms), report.dual_evals, report.filter_runs_dual, report.n_sensors]
        )


# --- config files ------------------------------------------------------------

CONFIG_DOC = {
    "rows": "sensor grid rows (default 4)",
    "cols": "sensor grid columns (default 4)",
    "spacing": "grid spacing in metres (default 1000.0)",
    "n_objects": "number of tracked objects (default 4)",
    "n_steps": "simulated scenario length in steps (default 60)",
    "sigma_n": "measurement noise std in metres (default 10.0)",
    "initial_speed": "object speed scale in metres per step (default 10.0)",
    "window_start": "first step (0-based) of the estimation window (default 20)",
    "window_length": "window length t in steps (default 10)",
    "n_particles": "particles per belief L (default 100)",
    "n_iterations": "message-passing rounds S (default 16)",
    "seeds": "comma-separated run seeds (default 0..24)",
    "variant": "likelihood variant, quad or dual (default quad)",
    "output_dir": "artifact directory, empty for none (default empty)",
    "n_workers": "parallel worker processes (default 1)",
    "dump_beliefs": "write particle clouds per iteration, 0 or 1 (default 0)",
}


def write_config_file(path: str, cfg: RunConfig) -> None:
    """Key-value lines, every key documented in a comment."""
    s = cfg.scenario
    values = {
        "rows": s.rows,
        "cols": s.cols,
        "spacing": s.spacing,
        "n_objects": s.n_objects,
        "n_steps": s.n_steps,
        "sigma_n": s.sigma_n,
        "initial_speed": s.initial_speed,
        "window_start": cfg.window_start,
        "window_length": cfg.window_length,
        "n_particles": cfg.n_particles,
        "n_iterations": cfg.n_iterations,
        "seeds": ",".join(str(x) for x in cfg.seeds),
        "variant": cfg.variant,
        "output_dir": cfg.output_dir or "",
        "n_workers": cfg.n_workers,
        "dump_beliefs": int(cfg.dump_beliefs),
    }
    with open(path, "w") as fh:
        for key, value in values.items():
            fh.write(f"# {CONFIG_DOC[key]}\n{key} = {value}\n")


def read_config_file(path: str) -> RunConfig:
    values: dict[str, str] = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"bad config line: {line!r}")
            key, _, raw = line.partition("=")
            values[key.strip()] = raw.strip()

    def get(key: str, default):
        if key not in values:
            return default
        raw = values[key]
        if isinstance(default, bool):
            return bool(int(raw))
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw

    scenario = ScenarioConfig(
        rows=get("rows", 4),
        cols=get("cols", 4),
        spacing=get("spacing", 1000.0),
        n_objects=get("n_objects", 4),
        n_steps=get("n_steps", 60),
        sigma_n=get("sigma_n", 10.0),
        initial_speed=get("initial_speed", 10.0),
    )
    seeds_raw = values.get("seeds", "")
    seeds = [int(x) for x in seeds_raw.split(",") if x.strip()] or list(range(25))
    output_dir = values.get("output_dir", "") or None
    return RunConfig(
        scenario=scenario,
        window_start=get("window_start", 20),
        window_length=get("window_length", 10),
        n_particles=get("n_particles", 100),
        n_iterations=get("n_iterations", 16),
        seeds=seeds,
        variant=get("variant", "quad"),
        output_dir=output_dir,
        n_workers=get("n_workers", 1),
        dump_beliefs=get("dump_beliefs", False),
    )
