"""Deployment pipeline: estimate coefficients, predict, map to a plan, forward
simulate, and gate on the safety criterion; plus the multi-scenario harness.

The gate never trusts a text-model prediction: whatever predictor produced the
Step-2 trace, the verdict is always computed from a local forward simulation
of the actual plan under the estimated coefficients.

The stock virtual patient pairs the canonical coefficient set with the tuned
glucose extension so that, for the 45 g / CR 5 reference request, the correct
7 U bolus is accepted and the faulty 11 U bolus is rejected with a
time-below-range violation.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .dynamics import (Coefficients, GlucoseParams, InputSchedule, PlantState,
                       Trace, equilibrium_state, simulate)
from .planner import (ControllerConfig, MealEvent, UsagePlan, build_meal_plan,
                      compute_bolus, compute_bolus_faulty, config_hash,
                      exact_iob_estimator, fixed_iob_estimator, iob_linear,
                      linear_iob_estimator, make_controller)
from .stl import OutcomeMetrics, Robustness, StlFormula, ada_safety, outcome_metrics, robustness

__all__ = [
    "Verdict", "VirtualPatient", "PlanRequest", "PlanDecision",
    "PipelineStepError", "LocalTracePredictor", "LlmTracePredictor",
    "RuleBasedMapper", "forward_simulate", "gate", "run_pipeline",
    "SuiteConfig", "ScenarioResult", "SuiteReport", "run_scenario_suite",
    "DEFAULT_PATIENT",
]


class Verdict(str, Enum):
    SAFE = "Safe"
    UNSAFE = "Unsafe"


@dataclass(frozen=True)
class VirtualPatient:
    """Coefficients plus glucose extension plus controller configuration."""

    coeffs: Coefficients = Coefficients(k1=0.098, n=0.1406, p1=0.028, i_b=0.0)
    glucose: GlucoseParams = GlucoseParams()
    controller: ControllerConfig = ControllerConfig()

    def equilibrium(self) -> PlantState:
        """Closed-loop steady state with the proportional controller attached.

        Solves the scalar fixed point in glucose by bisection (the balance
        residual is strictly increasing in G above the suspend threshold).
        """
        gp, ctl, c = self.glucose, self.controller, self.coeffs

        def u_of(g: float) -> float:
            if g < ctl.suspend_below:
                return 0.0
            return min(max(ctl.basal_rate + ctl.gain * (g - ctl.set_point), 0.0), ctl.u_max)

        def residual(g: float) -> float:
            iob = c.p1 * (u_of(g) + c.i_b) / c.n
            return gp.p_g * (g - gp.g_b) + gp.s_i * iob * g

        lo, hi = 1.0, gp.g_b
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if residual(mid) > 0.0:
                hi = mid
            else:
                lo = mid
        g = 0.5 * (lo + hi)
        u = u_of(g)
        return PlantState(y=u, z=0.0, iob=c.p1 * (u + c.i_b) / c.n, glucose=g)


DEFAULT_PATIENT = VirtualPatient()


class PipelineStepError(RuntimeError):
    """A pipeline step failed; carries the step index and name."""

    def __init__(self, step: int, name: str, cause: Exception):
        super().__init__(f"step {step} ({name}) failed: {cause}")
        self.step = step
        self.name = name
        self.cause = cause


@dataclass(frozen=True)
class PlanRequest:
    """Planning request: query text, context trace, meal, and horizons."""

    query: str
    context: Trace
    meal: MealEvent | None
    t_f: float = 360.0          # future horizon, minutes
    t_h: float = 60.0           # required past-history span, minutes
    iob_override: float | None = None
    cr: float | None = None     # overrides the controller config CR

    def __post_init__(self):
        if self.t_f <= 0:
            raise ValueError("future horizon must be positive")
        span = self.context.t_end - self.context.t0
        if span + 1e-9 < self.t_h:
            raise ValueError(f"context trace spans {span} min but t_h={self.t_h}")
        if self.iob_override is not None and self.iob_override < 0:
            raise ValueError("IOB override must be nonnegative")


@dataclass(frozen=True)
class PlanDecision:
    plan: UsagePlan
    verdict: Verdict
    robustness: Robustness
    predicted: Trace
    feedback: str | None
    provenance: dict

    def __post_init__(self):
        if (self.verdict is Verdict.SAFE) != (self.robustness.rho >= 0):
            raise ValueError("verdict inconsistent with robustness sign")
        if (self.feedback is not None) != (self.verdict is Verdict.UNSAFE):
            raise ValueError("feedback must be present exactly when unsafe")


# ----------------------------------------------------------- step handles ---

class LocalTracePredictor:
    """Step-2 predictor: forward simulation under the estimated coefficients."""

    name = "local-simulation"

    def predict(self, coeffs: Coefficients, patient: VirtualPatient,
                initial: PlantState, t_f: float) -> Trace:
        controller = make_controller(patient.controller)
        return simulate(initial, coeffs, patient.glucose, InputSchedule(),
                        controller, horizon=t_f, dt=1.0)


class LlmTracePredictor:
    """Step-2 predictor backed by a chat endpoint or the local oracle.

    Produces an IOB forecast from the forward prompt; recorded in provenance
    only, since gating always re-simulates locally.
    """

    def __init__(self, client, spec=None):
        from .llm import SeriesSpec, format_forward_prompt, parse_series_response
        self._client = client
        self._spec = spec or SeriesSpec()
        self._format = format_forward_prompt
        self._parse = parse_series_response
        self.name = f"llm:{getattr(client, 'name', 'endpoint')}"

    def predict_iob_series(self, coeffs: Coefficients) -> list[float]:
        reply = self._client.query(self._format(coeffs.k1, self._spec))
        return self._parse(reply)

    def predict(self, coeffs: Coefficients, patient: VirtualPatient,
                initial: PlantState, t_f: float) -> Trace:
        series = np.asarray(self.predict_iob_series(coeffs), dtype=float)
        n = len(series)
        dt_min = self._spec.sample_period_s / 60.0
        zeros = np.zeros(n)
        return Trace(t0=0.0, dt=dt_min, y=zeros, z=zeros, iob=series,
                     glucose=np.full(n, initial.glucose), u=zeros, s=zeros)


class RuleBasedMapper:
    """Step-3 mapper: the clinical meal-plan rule with a chosen IOB source."""

    def __init__(self, mode: str = "exact"):
        if mode not in ("exact", "linear", "faulty"):
            raise ValueError(f"unknown planner mode {mode!r}")
        self.mode = mode
        self.name = f"rule-based:{mode}"

    def map(self, req: PlanRequest, config: ControllerConfig,
            dose_history: Sequence[tuple[float, float]] = ()) -> UsagePlan:
        if req.meal is None:
            return UsagePlan()
        cfg = config if req.cr is None else replace(config, cr=req.cr)
        if req.iob_override is not None:
            estimator = fixed_iob_estimator(req.iob_override)
        elif self.mode == "exact":
            estimator = exact_iob_estimator()
        else:
            estimator = linear_iob_estimator(dose_history, cfg.insulin_action_time)
        if self.mode == "faulty":
            # labeled research baseline: additive IOB error
            iob = estimator(req.context, req.meal.time)
            dose = compute_bolus_faulty(req.meal.carbs, cfg.cr, iob)
            plan = build_meal_plan(req.meal, cfg, fixed_iob_estimator(0.0), req.context)
            return UsagePlan(setpoint_changes=plan.setpoint_changes,
                             boluses=((req.meal.time, dose),))
        return build_meal_plan(req.meal, cfg, estimator, req.context)


# ------------------------------------------------------------ simulation ----

def forward_simulate(plan: UsagePlan, coeffs: Coefficients, gp: GlucoseParams,
                     initial: PlantState, controller_config: ControllerConfig,
                     t_f: float, meal: MealEvent | None = None,
                     dt: float = 1.0) -> Trace:
    """Simulate a plan: boluses become u_ex pulses, set-point changes retune
    the controller at their timestamps."""
    plan.check_horizon(t_f)
    schedule = InputSchedule(boluses=plan.boluses,
                             meals=((meal.time, meal.carbs),) if meal else ())
    controller = make_controller(controller_config, plan.setpoint_changes)
    return simulate(initial, coeffs, gp, schedule, controller, horizon=t_f, dt=dt)


def gate(predicted: Trace, criterion: StlFormula | None = None,
         window: float | None = None) -> tuple[Verdict, Robustness, str | None]:
    """Safety verdict from a predicted trace.

    Default criterion is the ADA sliding-window rule; a custom STL formula can
    be supplied instead. Safe iff rho >= 0; when unsafe the feedback names the
    criterion, the margin, and the first below-range time.
    """
    if criterion is not None:
        rob = robustness(criterion, predicted)
        label = "STL criterion"
    else:
        rob = ada_safety(predicted, window=window)
        label = "TBR < 4%"
    if rob.rho >= 0:
        return Verdict.SAFE, rob, None
    below = np.nonzero(predicted.glucose < 70.0)[0]
    first = predicted.t0 + predicted.dt * int(below[0]) if len(below) else None
    at = f"; first below-range sample at t={first:g} min" if first is not None else ""
    feedback = (f"plan violates {label}: robustness {rob.rho:.4f} < 0{at}. "
                f"The proposed dosing drives glucose below 70 mg/dl for more "
                f"than 4% of the horizon; reduce the bolus or raise the set point.")
    return Verdict.UNSAFE, rob, feedback


def run_pipeline(req: PlanRequest, estimator, predictor, mapper,
                 patient: VirtualPatient = DEFAULT_PATIENT,
                 criterion: StlFormula | None = None,
                 window: float | None = None,
                 dose_history: Sequence[tuple[float, float]] = ()) -> PlanDecision:
    """Execute deployment steps 1-5 and return the gated decision.

    1. estimate personalized coefficients from the context trace;
    2. predict the forward trace (recorded in provenance);
    3. map the request to a usage plan;
    4. forward simulate the plan locally under the estimated coefficients;
    5. gate: execute if safe, otherwise attach feedback.
    Each failure is wrapped in PipelineStepError with its step index; nothing
    partial is ever reported as success.
    """
    try:
        omega_p = estimator.estimate(req.context)
    except Exception as exc:
        raise PipelineStepError(1, "coefficient estimation", exc) from exc

    initial = req.context.state(len(req.context) - 1)
    try:
        baseline = predictor.predict(omega_p, patient, initial, req.t_f)
    except Exception as exc:
        raise PipelineStepError(2, "trace prediction", exc) from exc

    try:
        plan = mapper.map(req, patient.controller, dose_history)
    except Exception as exc:
        raise PipelineStepError(3, "plan mapping", exc) from exc

    try:
        predicted = forward_simulate(plan, omega_p, patient.glucose, initial,
                                     patient.controller, req.t_f, meal=req.meal)
    except Exception as exc:
        raise PipelineStepError(4, "forward simulation", exc) from exc

    try:
        verdict, rob, feedback = gate(predicted, criterion=criterion, window=window)
    except Exception as exc:
        raise PipelineStepError(5, "safety gating", exc) from exc

    provenance = {
        "omega_p": {"k1": omega_p.k1, "n": omega_p.n, "p1": omega_p.p1, "i_b": omega_p.i_b},
        "estimator": getattr(estimator, "name", type(estimator).__name__),
        "predictor": getattr(predictor, "name", type(predictor).__name__),
        "mapper": getattr(mapper, "name", type(mapper).__name__),
        "baseline_prediction_samples": len(baseline),
        "patient_config_hash": config_hash({
            "coeffs": config_hash(patient.coeffs),
            "glucose": config_hash(patient.glucose),
            "controller": config_hash(patient.controller),
        }),
    }
    return PlanDecision(plan=plan, verdict=verdict, robustness=rob,
                        predicted=predicted, feedback=feedback, provenance=provenance)


# ------------------------------------------------------------ suite ---------

@dataclass(frozen=True)
class SuiteConfig:
    """Seeded scenario distribution for the planner-mode comparison.

    Prior insulin is framed as a correction bolus: the scenario starts with
    glucose elevated by `correction_isf` mg/dl per prior unit, so correct
    dosing stays in range while the faulty additive formula produces lows.
    """

    count: int = 50
    seed: int = 7
    meal_carbs: tuple[float, float] = (7.0, 50.0)
    cr_range: tuple[float, float] = (10.0, 25.0)
    prior_offset: tuple[float, float] = (30.0, 180.0)
    prior_dose: tuple[float, float] = (3.0, 4.6)
    correction_isf: float = 32.0
    t_f: float = 360.0
    modes: tuple[str, ...] = ("exact", "linear", "faulty")
    workers: int = 1

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("scenario count must be >= 1")
        for name in ("meal_carbs", "cr_range", "prior_offset", "prior_dose"):
            lo, hi = getattr(self, name)
            if not (0 <= lo <= hi):
                raise ValueError(f"invalid range for {name}: [{lo}, {hi}]")


@dataclass(frozen=True)
class ScenarioResult:
    mode: str
    scenario_id: int
    metrics: OutcomeMetrics
    verdict: Verdict
    rho: float
    min_glucose: float
    dose: float
    error: str | None = None


@dataclass(frozen=True)
class SuiteReport:
    config: SuiteConfig
    results: tuple[ScenarioResult, ...]
    failures: int

    def aggregates(self) -> dict[str, dict[str, float]]:
        out: dict[str, dict[str, float]] = {}
        for mode in self.config.modes:
            rows = [r for r in self.results if r.mode == mode and r.error is None]
            if not rows:
                out[mode] = {}
                continue
            out[mode] = {
                "tir": float(np.mean([r.metrics.tir for r in rows])),
                "tar": float(np.mean([r.metrics.tar for r in rows])),
                "tbr": float(np.mean([r.metrics.tbr for r in rows])),
                "mean_cgm": float(np.mean([r.metrics.mean_cgm for r in rows])),
                "hypo_events": int(sum(r.min_glucose < 70.0 for r in rows)),
                "unsafe_count": int(sum(r.verdict is Verdict.UNSAFE for r in rows)),
            }
        return out

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["mode", "scenario_id", "tir", "tar", "tbr", "mean_cgm",
                        "verdict", "rho"])
            for r in self.results:
                w.writerow([r.mode, r.scenario_id,
                            repr(r.metrics.tir), repr(r.metrics.tar),
                            repr(r.metrics.tbr), repr(r.metrics.mean_cgm),
                            r.verdict.value, repr(r.rho)])

    def write_summary(self, path: str | Path) -> None:
        payload = {
            "aggregates": self.aggregates(),
            "failures": self.failures,
            "config_hash": config_hash(self.config),
            "count": self.config.count,
            "seed": self.config.seed,
        }
        with open(path, "w", encoding="utf-8") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
            f.write("\n")


@dataclass(frozen=True)
class _Scenario:
    scenario_id: int
    carbs: float
    cr: float
    offset: float
    prior: float


def _draw_scenarios(cfg: SuiteConfig) -> list[_Scenario]:
    rng = np.random.default_rng(cfg.seed)
    out = []
    for i in range(cfg.count):
        out.append(_Scenario(
            scenario_id=i,
            carbs=float(rng.uniform(*cfg.meal_carbs)),
            cr=float(rng.uniform(*cfg.cr_range)),
            offset=float(rng.uniform(*cfg.prior_offset)),
            prior=float(rng.uniform(*cfg.prior_dose)),
        ))
    return out


def _run_scenario(sc: _Scenario, cfg: SuiteConfig,
                  patient: VirtualPatient) -> list[ScenarioResult]:
    """All planner modes on one identical scenario draw (paired design)."""
    ctl = patient.controller
    eq = patient.equilibrium()
    start = PlantState(y=eq.y, z=eq.z, iob=eq.iob,
                       glucose=eq.glucose + cfg.correction_isf * sc.prior)
    pre_sched = InputSchedule(boluses=((0.0, sc.prior),))
    pre = simulate(start, patient.coeffs, patient.glucose, pre_sched,
                   make_controller(ctl), horizon=sc.offset, dt=1.0)
    at_meal = pre.state(len(pre) - 1)
    lin_iob = iob_linear([(0.0, sc.prior)], now=sc.offset,
                         action_time=ctl.insulin_action_time)
    results = []
    for mode in cfg.modes:
        try:
            if mode == "exact":
                dose = compute_bolus(sc.carbs, sc.cr, at_meal.iob)
            elif mode == "linear":
                dose = compute_bolus(sc.carbs, sc.cr, lin_iob)
            elif mode == "faulty":
                dose = compute_bolus_faulty(sc.carbs, sc.cr, lin_iob)
            else:
                raise ValueError(f"unknown mode {mode!r}")
            plan = UsagePlan(
                setpoint_changes=((0.0, ctl.meal_set_point),
                                  (ctl.revert_after, ctl.set_point)),
                boluses=((0.0, dose),))
            tr = forward_simulate(plan, patient.coeffs, patient.glucose, at_meal,
                                  ctl, cfg.t_f, meal=MealEvent(0.0, sc.carbs))
            verdict, rob, _ = gate(tr)
            results.append(ScenarioResult(
                mode=mode, scenario_id=sc.scenario_id, metrics=outcome_metrics(tr),
                verdict=verdict, rho=rob.rho, min_glucose=float(np.min(tr.glucose)),
                dose=dose))
        except Exception as exc:  # per-scenario failures recorded, suite continues
            results.append(ScenarioResult(
                mode=mode, scenario_id=sc.scenario_id,
                metrics=OutcomeMetrics(0.0, 0.0, 0.0, 0.0), verdict=Verdict.UNSAFE,
                rho=float("-inf"), min_glucose=float("nan"), dose=float("nan"),
                error=f"{type(exc).__name__}: {exc}"))
    return results


def run_scenario_suite(cfg: SuiteConfig,
                       patient: VirtualPatient = DEFAULT_PATIENT) -> SuiteReport:
    """Paired scenario comparison of the planner modes; deterministic per seed.

    Scenario evaluation may fan out over threads; results are always reduced
    in scenario-index order so worker count never changes the output.
    """
    scenarios = _draw_scenarios(cfg)
    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            nested = list(pool.map(lambda sc: _run_scenario(sc, cfg, patient), scenarios))
    else:
        nested = [_run_scenario(sc, cfg, patient) for sc in scenarios]
    results = tuple(r for group in nested for r in group)
    failures = sum(1 for r in results if r.error is not None)
    return SuiteReport(config=cfg, results=results, failures=failures)
