"""HTTP facade over the planning pipeline for the companion UI and scripts.

Stateless request handling: the estimator checkpoint and virtual-patient
configuration are loaded once at startup, every response is a pure function of
the request plus that configuration. The faulty planner mode is a research
baseline and is rejected at this interface.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from . import __version__
from .dynamics import InputSchedule, PlantState, Trace, simulate
from .estimator import FixedEstimator, NetworkEstimator, load_checkpoint
from .gate import (DEFAULT_PATIENT, LocalTracePredictor, PipelineStepError,
                   PlanRequest, RuleBasedMapper, Verdict, VirtualPatient,
                   forward_simulate, gate, run_pipeline)
from .planner import MealEvent, UsagePlan, make_controller
from .stl import outcome_metrics

__all__ = ["ServiceSettings", "create_app", "serve"]

MAX_TRACE_POINTS = 500


@dataclass
class ServiceSettings:
    patient: VirtualPatient = field(default_factory=lambda: DEFAULT_PATIENT)
    checkpoint_path: str | None = None
    cors_origins: tuple[str, ...] = ("*",)
    context_minutes: float = 60.0


class AdviseIn(BaseModel):
    carbs: float = Field(gt=0)
    cr: float = Field(gt=0)
    iob: float | None = Field(default=None, ge=0)
    mode: str = "exact"
    horizon_min: float = Field(default=360.0, gt=0)
    trace_csv: str | None = None      # inline trace file content, optional


class SimulateIn(BaseModel):
    setpoints: list[dict] = Field(default_factory=list)
    boluses: list[dict] = Field(default_factory=list)
    meal_carbs: float | None = Field(default=None, gt=0)
    meal_time_min: float = 0.0
    horizon_min: float = Field(default=360.0, gt=0)


class EstimateIn(BaseModel):
    trace_csv: str


def _error(code: str, step: int | None, message: str, status: int = 400) -> JSONResponse:
    return JSONResponse(status_code=status,
                        content={"code": code, "step": step, "message": message})


def _downsample(trace: Trace, limit: int = MAX_TRACE_POINTS) -> dict:
    n = len(trace)
    stride = max(1, -(-n // limit))
    idx = np.arange(0, n, stride)
    return {
        "t_min": [float(trace.times[i]) for i in idx],
        "glucose": [float(trace.glucose[i]) for i in idx],
        "iob": [float(trace.iob[i]) for i in idx],
        "stride": int(stride),
    }


def _parse_inline_trace(text: str) -> Trace:
    import io
    import tempfile

    with tempfile.NamedTemporaryFile("w", suffix=".csv", delete=False) as f:
        f.write(text)
        path = f.name
    try:
        return Trace.read_csv(path)
    finally:
        Path(path).unlink(missing_ok=True)


def create_app(settings: ServiceSettings | None = None) -> FastAPI:
    settings = settings or ServiceSettings()
    app = FastAPI(title="glucogate", version=__version__)
    if settings.cors_origins:
        app.add_middleware(CORSMiddleware, allow_origins=list(settings.cors_origins),
                           allow_methods=["*"], allow_headers=["*"])

    patient = settings.patient
    if settings.checkpoint_path:
        estimator = NetworkEstimator(load_checkpoint(settings.checkpoint_path))
    else:
        # no checkpoint configured: fall back to the virtual-patient coefficients
        estimator = FixedEstimator(patient.coeffs)
    predictor = LocalTracePredictor()

    def default_context() -> Trace:
        return simulate(patient.equilibrium(), patient.coeffs, patient.glucose,
                        InputSchedule(), make_controller(patient.controller),
                        horizon=settings.context_minutes, dt=1.0)

    @app.get("/v1/health")
    def health():
        return {"status": "ok", "version": __version__}

    @app.post("/v1/advise")
    def advise(body: AdviseIn):
        if body.mode not in ("exact", "linear"):
            return _error("invalid-mode", None,
                          f"planner mode {body.mode!r} is not available here "
                          "(the faulty research baseline is CLI-only)", 422)
        try:
            context = (_parse_inline_trace(body.trace_csv) if body.trace_csv
                       else default_context())
            req = PlanRequest(query=f"advise {body.carbs} g", context=context,
                              meal=MealEvent(0.0, body.carbs), t_f=body.horizon_min,
                              t_h=min(settings.context_minutes,
                                      context.t_end - context.t0),
                              iob_override=body.iob, cr=body.cr)
        except ValueError as exc:
            return _error("validation", None, str(exc), 422)
        try:
            decision = run_pipeline(req, estimator, predictor,
                                    RuleBasedMapper(body.mode), patient)
        except PipelineStepError as exc:
            return _error("pipeline", exc.step, str(exc), 500)
        dose = decision.plan.boluses[0][1] if decision.plan.boluses else 0.0
        return {
            "dose_units": dose,
            "plan": decision.plan.to_dict(),
            "verdict": decision.verdict.value,
            "rho": decision.robustness.rho,
            "feedback": decision.feedback,
            "predicted": _downsample(decision.predicted),
            "provenance": decision.provenance,
        }

    @app.post("/v1/simulate")
    def do_simulate(body: SimulateIn):
        try:
            plan = UsagePlan(
                setpoint_changes=tuple((e["t_min"], e["mgdl"]) for e in body.setpoints),
                boluses=tuple((e["t_min"], e["units"]) for e in body.boluses))
            meal = (MealEvent(body.meal_time_min, body.meal_carbs)
                    if body.meal_carbs else None)
            tr = forward_simulate(plan, patient.coeffs, patient.glucose,
                                  patient.equilibrium(), patient.controller,
                                  body.horizon_min, meal=meal)
        except (ValueError, KeyError) as exc:
            return _error("validation", None, str(exc), 422)
        verdict, rob, feedback = gate(tr)
        m = outcome_metrics(tr)
        return {
            "trace": _downsample(tr),
            "metrics": {"tir": m.tir, "tar": m.tar, "tbr": m.tbr,
                        "mean_cgm": m.mean_cgm},
            "verdict": verdict.value,
            "rho": rob.rho,
            "feedback": feedback,
        }

    @app.post("/v1/estimate")
    def estimate(body: EstimateIn):
        try:
            trace = _parse_inline_trace(body.trace_csv)
            coeffs = estimator.estimate(trace)
        except ValueError as exc:
            return _error("validation", None, str(exc), 422)
        return {"k1": coeffs.k1, "n": coeffs.n, "p1": coeffs.p1, "i_b": coeffs.i_b,
                "estimator": getattr(estimator, "name", "unknown")}

    @app.get("/v1/metrics")
    def metrics(trace: str):
        try:
            tr = Trace.read_csv(trace)
            m = outcome_metrics(tr)
        except (OSError, ValueError) as exc:
            return _error("validation", None, str(exc), 422)
        return {"tir": m.tir, "tar": m.tar, "tbr": m.tbr, "mean_cgm": m.mean_cgm}

    return app


def serve(host: str = "127.0.0.1", port: int = 8080,
          settings: ServiceSettings | None = None) -> None:
    import uvicorn

    uvicorn.run(create_app(settings), host=host, port=port, log_level="info")
