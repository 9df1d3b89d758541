"""glucogate: safety-gated meal planning for automated insulin delivery.

The package couples an insulin/glucose plant simulator, a quantitative
signal-temporal-logic monitor, a coefficient estimator (liquid-time-constant
encoder with a simulator decoder), meal-bolus planners, and a forward-simulation
safety gate that accepts or rejects every proposed usage plan.
"""

__version__ = "0.1.0"

from .dynamics import (Coefficients, GlucoseParams, InputSchedule, PlantState,
                       Trace, simulate)
from .planner import ControllerConfig, MealEvent, UsagePlan, compute_bolus
from .stl import ada_safety, outcome_metrics, parse_formula, robustness

__all__ = [
    "Coefficients", "GlucoseParams", "InputSchedule", "PlantState", "Trace",
    "simulate", "ControllerConfig", "MealEvent", "UsagePlan", "compute_bolus",
    "ada_safety", "outcome_metrics", "parse_formula", "robustness",
]
