"""HTTP facade over scenario generation, calibration, diagnostics, summaries.

The service is stateless and writes nothing to disk: every endpoint maps a
request model onto core-library calls and returns plain JSON.  Config
mistakes surface as 400, numerical failures as 500 with a "numerical:"
detail prefix, so clients can tell the two apart.
"""

from __future__ import annotations

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from . import __version__
from .diagnostics import bound_sweep
from .experiment import (
    MetricsRow,
    RunConfig,
    SummaryRow,
    metrics_from_calibration,
    run_experiment,
    summarize,
)
from .gaussians import NumericalError
from .nbp import CalibrationConfig, run_calibration
from .scenario import ScenarioConfig, make_scenario, scenario_to_dict


class ScenarioParams(BaseModel):
    rows: int = Field(default=4, ge=1)
    cols: int = Field(default=4, ge=1)
    spacing: float = Field(default=1000.0, gt=0)
    n_objects: int = Field(default=4, ge=1)
    n_steps: int = Field(default=60, ge=1)
    sigma_n: float = Field(default=10.0, gt=0)
    initial_speed: float = Field(default=10.0, ge=0)
    seed: int = 0

    def to_config(self) -> ScenarioConfig:
        return ScenarioConfig(
            rows=self.rows,
            cols=self.cols,
            spacing=self.spacing,
            n_objects=self.n_objects,
            n_steps=self.n_steps,
            sigma_n=self.sigma_n,
            initial_speed=self.initial_speed,
            seed=self.seed,
        )


class SimulateResponse(BaseModel):
    scenario: dict
    n_sensors: int
    n_edges: int


class CalibrationParams(BaseModel):
    window_start: int = Field(default=20, ge=0)
    window_length: int = Field(default=10, ge=1)
    n_particles: int = Field(default=100, ge=2)
    n_iterations: int = Field(default=16, ge=1)
    variant: str = Field(default="quad", pattern="^(quad|dual)$")


class CalibrateRequest(BaseModel):
    scenario: ScenarioParams = ScenarioParams()
    calibration: CalibrationParams = CalibrationParams()
    calibration_seed: int = 0
    include_beliefs: bool = False


class CalibrateResponse(BaseModel):
    node_ids: list[int]
    true_offsets: list[list[float]]
    estimates: list[list[list[float]]]  # (S, n, 2)
    network_mse: list[float]
    final_mean_miss: float
    per_eval_ms: float
    filter_runs: int
    underflow_count: int
    beliefs: list[dict[int, list[list[float]]]] | None = None


class ExperimentRequest(BaseModel):
    scenario: ScenarioParams = ScenarioParams()
    calibration: CalibrationParams = CalibrationParams()
    seeds: list[int] = Field(default_factory=lambda: list(range(25)), min_length=1)
    n_workers: int = Field(default=1, ge=1)
    dump_beliefs: bool = False


class MetricsRowModel(BaseModel):
    run_id: int
    iteration: int = Field(ge=1)
    network_mse: float = Field(ge=0)
    mean_miss: float = Field(ge=0)
    per_node_miss: dict[int, float]
    per_eval_ms: float = Field(ge=0)

    @classmethod
    def from_row(cls, row: MetricsRow) -> "MetricsRowModel":
        return cls(
            run_id=row.run_id,
            iteration=row.iteration,
            network_mse=row.network_mse,
            mean_miss=row.mean_miss,
            per_node_miss=row.per_node_miss,
            per_eval_ms=row.per_eval_ms,
        )

    def to_row(self) -> MetricsRow:
        return MetricsRow(
            run_id=self.run_id,
            iteration=self.iteration,
            network_mse=self.network_mse,
            mean_miss=self.mean_miss,
            per_node_miss=dict(self.per_node_miss),
            per_eval_ms=self.per_eval_ms,
        )


class RunEstimates(BaseModel):
    run_id: int
    seed: int
    node_ids: list[int]
    estimates: list[list[list[float]]]
    true_offsets: list[list[float]]
    beliefs: list[dict[int, list[list[float]]]] | None = None


class ExperimentResponse(BaseModel):
    rows: list[MetricsRowModel]
    runs: list[RunEstimates]
    final_mean_miss: float
    total_filter_runs: int


class DiagnoseRequest(BaseModel):
    n_instances: int = Field(default=100, ge=1)
    base_seed: int = 0
    horizon: int = Field(default=6, ge=1)


class BoundReportModel(BaseModel):
    seed: int
    step: int
    d_p_q: float
    d_p_u: float
    mi_bound: float
    entropy_bound: float
    e_log_kappa: float
    chain_ok: bool
    quad_beats_dual: bool


class DiagnoseResponse(BaseModel):
    reports: list[BoundReportModel]
    all_chains_ok: bool
    quad_beats_dual_fraction: float


class SummarizeRequest(BaseModel):
    rows: list[MetricsRowModel] = Field(min_length=1)


class SummaryRowModel(BaseModel):
    iteration: int
    n_runs: int
    miss_median: float
    miss_q1: float
    miss_q3: float
    mse_median: float
    mse_q1: float
    mse_q3: float

    @classmethod
    def from_row(cls, row: SummaryRow) -> "SummaryRowModel":
        return cls(**row.__dict__)


class SummarizeResponse(BaseModel):
    summary: list[SummaryRowModel]


def _guard(fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except NumericalError as e:
        raise HTTPException(status_code=500, detail=f"numerical: {e}") from e
    except (ValueError, KeyError) as e:
        raise HTTPException(status_code=400, detail=f"config: {e}") from e


def create_app() -> FastAPI:
    app = FastAPI(title="fusioncal", version=__version__)

    @app.get("/health")
    def health() -> dict:
        return {"status": "ok", "version": __version__}

    @app.post("/simulate", response_model=SimulateResponse)
    def simulate(req: ScenarioParams) -> SimulateResponse:
        scenario = _guard(make_scenario, req.to_config())
        return SimulateResponse(
            scenario=scenario_to_dict(scenario),
            n_sensors=len(scenario.network.node_ids),
            n_edges=len(scenario.network.edges),
        )

    @app.post("/calibrate", response_model=CalibrateResponse)
    def calibrate(req: CalibrateRequest) -> CalibrateResponse:
        scenario = _guard(make_scenario, req.scenario.to_config())
        cfg = CalibrationConfig(
            window_start=req.calibration.window_start,
            window_length=req.calibration.window_length,
            n_particles=req.calibration.n_particles,
            n_iterations=req.calibration.n_iterations,
            variant=req.calibration.variant,
            seed=req.calibration_seed,
            keep_belief_history=req.include_beliefs,
        )
        result = _guard(run_calibration, scenario, cfg)
        rows = metrics_from_calibration(0, result, scenario.network.anchor)
        beliefs = None
        if req.include_beliefs:
            beliefs = [
                {node: cloud.tolist() for node, cloud in snap.items()}
                for snap in result.belief_history
            ]
        return CalibrateResponse(
            node_ids=result.node_ids,
            true_offsets=result.true_offsets.tolist(),
            estimates=result.estimates.tolist(),
            network_mse=result.network_mse().tolist(),
            final_mean_miss=rows[-1].mean_miss,
            per_eval_ms=result.per_eval_ms,
            filter_runs=result.filter_runs,
            underflow_count=len(result.underflow_edges),
            beliefs=beliefs,
        )

    @app.post("/experiment", response_model=ExperimentResponse)
    def experiment(req: ExperimentRequest) -> ExperimentResponse:
        cfg = RunConfig(
            scenario=req.scenario.to_config(),
            window_start=req.calibration.window_start,
            window_length=req.calibration.window_length,
            n_particles=req.calibration.n_particles,
            n_iterations=req.calibration.n_iterations,
            seeds=list(req.seeds),
            variant=req.calibration.variant,
            output_dir=None,
            n_workers=req.n_workers,
            dump_beliefs=req.dump_beliefs,
        )
        result = _guard(run_experiment, cfg)
        runs = []
        for run_id, calib in enumerate(result.calibrations):
            beliefs = None
            if req.dump_beliefs:
                beliefs = [
                    {node: cloud.tolist() for node, cloud in snap.items()}
                    for snap in calib.belief_history
                ]
            runs.append(
                RunEstimates(
                    run_id=run_id,
                    seed=req.seeds[run_id],
                    node_ids=calib.node_ids,
                    estimates=calib.estimates.tolist(),
                    true_offsets=calib.true_offsets.tolist(),
                    beliefs=beliefs,
                )
            )
        return ExperimentResponse(
            rows=[MetricsRowModel.from_row(r) for r in result.rows],
            runs=runs,
            final_mean_miss=result.final_mean_miss(),
            total_filter_runs=result.total_filter_runs(),
        )

    @app.post("/diagnose", response_model=DiagnoseResponse)
    def diagnose(req: DiagnoseRequest) -> DiagnoseResponse:
        reports = _guard(bound_sweep, req.n_instances, req.base_seed, req.horizon)
        models = [
            BoundReportModel(
                seed=r.seed,
                step=r.step,
                d_p_q=r.d_p_q,
                d_p_u=r.d_p_u,
                mi_bound=r.mi_bound,
                entropy_bound=r.entropy_bound,
                e_log_kappa=r.e_log_kappa,
                chain_ok=r.chain_ok,
                quad_beats_dual=r.quad_beats_dual,
            )
            for r in reports
        ]
        frac = sum(m.quad_beats_dual for m in models) / len(models)
        return DiagnoseResponse(
            reports=models,
            all_chains_ok=all(m.chain_ok for m in models),
            quad_beats_dual_fraction=frac,
        )

    @app.post("/summarize", response_model=SummarizeResponse)
    def summarize_endpoint(req: SummarizeRequest) -> SummarizeResponse:
        rows = [m.to_row() for m in req.rows]
        out = _guard(summarize, rows)
        return SummarizeResponse(summary=[SummaryRowModel.from_row(r) for r in out])

    return app


app = create_app()
