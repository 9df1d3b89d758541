"""Meal-bolus planning: IOB estimators, the clinical bolus formula, set-point
schedules, and a reference suspend-capable proportional controller.

The bolus rule is the standard clinical one, carbohydrates divided by carb
ratio minus insulin on board, clamped at zero. A deliberately faulty additive
variant (carbs/CR + IOB) is kept as a labeled research baseline reproducing a
known failure mode of untuned language models; it is never selectable in the
advising path.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from .dynamics import PlantState, Trace

__all__ = [
    "MealEvent", "ControllerConfig", "UsagePlan",
    "iob_linear", "iob_exact", "compute_bolus", "compute_bolus_faulty",
    "reference_controller", "make_controller", "build_meal_plan",
    "exact_iob_estimator", "linear_iob_estimator", "fixed_iob_estimator",
]

# An IOB estimator maps (context trace, time) -> IOB in insulin units.
IobEstimator = Callable[[Trace, float], float]


@dataclass(frozen=True)
class MealEvent:
    time: float       # minutes
    carbs: float      # grams

    def __post_init__(self):
        if not (self.carbs > 0):
            raise ValueError(f"meal carbs must be positive, got {self.carbs}")


@dataclass(frozen=True)
class ControllerConfig:
    """Configuration of the controller and of meal-plan building."""

    set_point: float = 90.0            # mg/dl
    cr: float = 10.0                   # grams per unit
    insulin_action_time: float = 240.0  # minutes (linear IOB model)
    basal_rate: float = 0.01           # U/min
    meal_set_point: float = 110.0      # mg/dl
    revert_after: float = 120.0        # minutes after the meal
    gain: float = 0.0004               # U/min per mg/dl above set point
    u_max: float = 0.08                # U/min clamp
    suspend_below: float = 70.0        # mg/dl, full suspension threshold

    def __post_init__(self):
        if not (1.0 <= self.cr <= 50.0):
            raise ValueError(f"carb ratio must lie in [1, 50], got {self.cr}")
        for name in ("set_point", "meal_set_point"):
            v = getattr(self, name)
            if not (80.0 <= v <= 140.0):
                raise ValueError(f"{name} must lie in [80, 140], got {v}")
        if self.insulin_action_time <= 0:
            raise ValueError("insulin_action_time must be positive")
        if self.basal_rate < 0 or self.gain < 0 or self.u_max <= 0:
            raise ValueError("basal_rate and gain must be >= 0, u_max > 0")


@dataclass(frozen=True)
class UsagePlan:
    """Personalized plan: timed set-point changes plus timed external boluses."""

    setpoint_changes: tuple[tuple[float, float], ...] = ()
    boluses: tuple[tuple[float, float], ...] = ()

    def __post_init__(self):
        sp = tuple((float(t), float(v)) for t, v in self.setpoint_changes)
        bo = tuple((float(t), float(u)) for t, u in self.boluses)
        times = [t for t, _ in sp]
        if len(set(times)) != len(times):
            raise ValueError("at most one set-point value per timestamp")
        for _, u in bo:
            if u < 0:
                raise ValueError("bolus doses must be nonnegative")
        object.__setattr__(self, "setpoint_changes", tuple(sorted(sp)))
        object.__setattr__(self, "boluses", tuple(sorted(bo)))

    def check_horizon(self, horizon: float) -> "UsagePlan":
        for t, _ in self.setpoint_changes + self.boluses:
            if not (0.0 <= t <= horizon):
                raise ValueError(f"plan timestamp {t} outside horizon [0, {horizon}]")
        return self

    def to_dict(self, provenance: dict | None = None) -> dict:
        d = {
            "setpoints": [{"t_min": t, "mgdl": v} for t, v in self.setpoint_changes],
            "boluses": [{"t_min": t, "units": u} for t, u in self.boluses],
        }
        if provenance is not None:
            d["provenance"] = provenance
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "UsagePlan":
        return cls(
            setpoint_changes=tuple((e["t_min"], e["mgdl"]) for e in d.get("setpoints", ())),
            boluses=tuple((e["t_min"], e["units"]) for e in d.get("boluses", ())),
        )

    def write_json(self, path: str | Path, provenance: dict | None = None) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(provenance), f, indent=2, sort_keys=True)
            f.write("\n")


# -------------------------------------------------------------- IOB models --

def iob_linear(dose_history: Sequence[tuple[float, float]], now: float,
               action_time: float) -> float:
    """Bolus-Wizard style IOB: each dose decays linearly to zero over action_time."""
    if action_time <= 0:
        raise ValueError("action_time must be positive")
    total = 0.0
    for t, dose in dose_history:
        elapsed = now - t
        if elapsed < 0:
            continue
        total += dose * max(0.0, 1.0 - elapsed / action_time)
    return total


def iob_exact(state: PlantState, reference_dose: float | None = None,
              mode: str = "units") -> float:
    """Convert the simulated iob state to insulin units.

    In "units" mode the state is already in U and passes through. In
    "percentage" mode the state is a fraction of a reference dose, which must
    be supplied.
    """
    if mode == "units":
        if reference_dose is not None:
            raise ValueError("reference_dose only applies to percentage mode")
        return state.iob
    if mode == "percentage":
        if reference_dose is None or reference_dose <= 0:
            raise ValueError("percentage mode requires a positive reference_dose")
        return state.iob * reference_dose
    raise ValueError(f"unknown IOB mode {mode!r}")


def compute_bolus(carbs: float, cr: float, iob: float,
                  step: float | None = None) -> float:
    """Meal bolus: carbs/CR minus IOB, clamped at zero.

    `step` quantizes the advice to a deliverable increment (e.g. 1.0 for
    whole-unit advice, matching the reference Q&A transcripts where 0.4 U
    rounds down to 0 U); None returns the raw clamped value.
    """
    if cr <= 0:
        raise ValueError("carb ratio must be positive")
    if carbs < 0 or iob < 0:
        raise ValueError("carbs and iob must be nonnegative")
    dose = max(0.0, carbs / cr - iob)
    if step is not None:
        if step <= 0:
            raise ValueError("dose step must be positive")
        dose = round(dose / step) * step
    return dose


def compute_bolus_faulty(carbs: float, cr: float, iob: float) -> float:
    """Additive failure mode (carbs/CR + IOB): research baseline only.

    Reproduces the overdosing formula an untuned language model produced; it
    exists for comparative experiments and is rejected by the advising API.
    """
    if cr <= 0:
        raise ValueError("carb ratio must be positive")
    return carbs / cr + iob


# -------------------------------------------------------------- controller --

def reference_controller(state: PlantState, config: ControllerConfig,
                         set_point: float | None = None) -> float:
    """Suspend-capable proportional basal controller (black-box stand-in).

    Output is basal_rate plus a proportional correction on (glucose - set
    point), clamped to [0, u_max]; delivery fully suspends below 70 mg/dl.
    """
    if state.glucose < config.suspend_below:
        return 0.0
    sp = config.set_point if set_point is None else set_point
    u = config.basal_rate + config.gain * (state.glucose - sp)
    return min(max(u, 0.0), config.u_max)


def make_controller(config: ControllerConfig,
                    setpoint_changes: Sequence[tuple[float, float]] = ()):
    """Controller handle for dynamics.simulate honoring timed set-point changes."""
    changes = sorted((float(t), float(v)) for t, v in setpoint_changes)

    def controller(state: PlantState, t: float) -> tuple[float, float]:
        sp = config.set_point
        for tc, v in changes:
            if t >= tc - 1e-9:
                sp = v
            else:
                break
        return reference_controller(state, config, set_point=sp), sp

    return controller


# ------------------------------------------------------------ plan building --

def exact_iob_estimator(reference_dose: float | None = None,
                        mode: str = "units") -> IobEstimator:
    """Estimator reading the plant iob state at the trace's final sample."""

    def estimate(context: Trace, now: float) -> float:
        return iob_exact(context.state(len(context) - 1), reference_dose, mode)

    return estimate


def linear_iob_estimator(dose_history: Sequence[tuple[float, float]],
                         action_time: float) -> IobEstimator:
    """Estimator applying the linear decay model to a known dose history."""

    def estimate(context: Trace, now: float) -> float:
        return iob_linear(dose_history, now, action_time)

    return estimate


def fixed_iob_estimator(iob: float) -> IobEstimator:
    """Estimator returning a user-supplied IOB value (explicit override)."""
    if iob < 0:
        raise ValueError("IOB override must be nonnegative")

    def estimate(context: Trace, now: float) -> float:
        return iob

    return estimate


def build_meal_plan(meal: MealEvent, config: ControllerConfig,
                    iob_estimator: IobEstimator, context: Trace,
                    horizon: float | None = None) -> UsagePlan:
    """Meal plan: raise the set point at meal time, revert later, and bolus.

    The plan contains exactly two set-point changes (meal_set_point at the
    meal, set_point at meal + revert_after) and one bolus computed with the
    chosen IOB estimate at meal time.
    """
    if horizon is not None and not (0.0 <= meal.time <= horizon):
        raise ValueError(f"meal time {meal.time} outside horizon [0, {horizon}]")
    iob = iob_estimator(context, meal.time)
    dose = compute_bolus(meal.carbs, config.cr, iob)
    plan = UsagePlan(
        setpoint_changes=((meal.time, config.meal_set_point),
                          (meal.time + config.revert_after, config.set_point)),
        boluses=((meal.time, dose),),
    )
    if horizon is not None:
        plan.check_horizon(horizon)
    return plan


def config_hash(obj) -> str:
    """Stable short hash of a configuration object for provenance fields."""
    if hasattr(obj, "__dataclass_fields__"):
        payload = {k: getattr(obj, k) for k in obj.__dataclass_fields__}
    else:
        payload = obj
    blob = json.dumps(payload, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:12]
