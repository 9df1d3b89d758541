"""Insulin/glucose plant model and fixed-step RK4 simulation.

The insulin side is the critically damped subcutaneous chain feeding an
insulin-on-board (IOB) pool:

    dy/dt   = z
    dz/dt   = -2*k1*z - k1^2*y + k1^2*u_ex
    diob/dt = -n*iob + p1*(y + i_b)

Blood glucose is a deliberately minimal extension used only for forward
simulation of meal plans (proportional return to basal, insulin-dependent
uptake, first-order meal absorption):

    dG/dt = -p_g*(G - g_b) - s_i*iob*G + meal_appearance(t)

Time is expressed in minutes throughout the control-simulation paths; the
equations are unit-agnostic as long as rates and dt share one time base
(the percentage-mode series generator in :mod:`glucogate.llm` runs them in
seconds).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Coefficients",
    "PlantState",
    "GlucoseParams",
    "InputSchedule",
    "Trace",
    "CoefficientRanges",
    "DEFAULT_RANGES",
    "SimulationBlowupError",
    "bmm_derivative",
    "glucose_derivative",
    "rk4_step",
    "simulate",
    "closed_form_insulin",
    "equilibrium_state",
]

# Controller handle: maps (state, t_min) -> (insulin rate U/min, set point mg/dl).
Controller = Callable[["PlantState", float], tuple[float, float]]


class SimulationBlowupError(RuntimeError):
    """Raised when integration produces a non-finite state.

    Carries the first offending timestamp so callers can report where the
    model blew up instead of silently clamping.
    """

    def __init__(self, message: str, t: float):
        super().__init__(message)
        self.t = t


@dataclass(frozen=True)
class CoefficientRanges:
    """Physiological bounds used for validation and for the estimator's range map."""

    k1: tuple[float, float] = (0.005, 0.2)
    n: tuple[float, float] = (0.01, 0.3)
    p1: tuple[float, float] = (0.001, 0.1)

    def as_array(self) -> np.ndarray:
        return np.array([self.k1, self.n, self.p1], dtype=float)


DEFAULT_RANGES = CoefficientRanges()


@dataclass(frozen=True)
class Coefficients:
    """Plant-dynamics coefficient set: diffusion k1, IOB clearance n, appearance gain p1.

    `i_b` is the basal insulin level entering the IOB pool; it is carried with
    the coefficient set but never estimated.
    """

    k1: float
    n: float
    p1: float
    i_b: float = 0.0

    def __post_init__(self):
        for name in ("k1", "n", "p1", "i_b"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValueError(f"coefficient {name} must be finite, got {v!r}")
        if self.k1 <= 0 or self.n <= 0:
            raise ValueError(f"k1 and n must be positive (k1={self.k1}, n={self.n})")
        if self.p1 < 0 or self.i_b < 0:
            raise ValueError(f"p1 and i_b must be nonnegative (p1={self.p1}, i_b={self.i_b})")

    def validate_ranges(self, ranges: CoefficientRanges = DEFAULT_RANGES) -> "Coefficients":
        for name in ("k1", "n", "p1"):
            lo, hi = getattr(ranges, name)
            v = getattr(self, name)
            if not (lo <= v <= hi):
                raise ValueError(f"{name}={v} outside configured range [{lo}, {hi}]")
        return self


@dataclass(frozen=True)
class PlantState:
    """State vector: subcutaneous compartment y, its rate z, IOB, and glucose."""

    y: float = 0.0
    z: float = 0.0
    iob: float = 0.0
    glucose: float = 110.0

    def __post_init__(self):
        for name in ("y", "z", "iob", "glucose"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"state component {name} must be finite")
        if self.glucose <= 0:
            raise ValueError(f"glucose must be positive, got {self.glucose}")


@dataclass(frozen=True)
class GlucoseParams:
    """Parameters of the minimal glucose extension (forward-simulation stand-in).

    Defaults were tuned so the stock virtual patient discriminates correct
    and faulty meal boluses; see the safety-gate module.
    """

    p_g: float = 0.015        # glucose effectiveness, 1/min
    s_i: float = 1.7          # insulin sensitivity scaling, 1/min per IOB unit
    g_b: float = 195.0        # basal glucose, mg/dl
    k_abs: float = 0.04       # meal absorption rate, 1/min
    carb_gain: float = 4.0    # mg/dl rise per gram of carbohydrate

    def __post_init__(self):
        for name in ("p_g", "s_i", "g_b", "k_abs", "carb_gain"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"glucose parameter {name} must be strictly positive, got {v!r}")


def _check_event_times(events: Sequence[tuple[float, float]], what: str) -> tuple[tuple[float, float], ...]:
    out = tuple((float(t), float(v)) for t, v in events)
    for (t0, v0), (t1, _) in zip(out, out[1:]):
        if t1 < t0:
            raise ValueError(f"{what} times must be nondecreasing")
    for t, v in out:
        if v < 0:
            raise ValueError(f"{what} values must be nonnegative, got {v} at t={t}")
    return out


@dataclass(frozen=True)
class InputSchedule:
    """External inputs: bolus impulses, piecewise-constant basal, and meals.

    Boluses are (time min, dose U) and are applied as rectangular pulses of
    `bolus_width` minutes (rate = dose/width), because the plant takes u_ex as
    a rate. Basal is a sequence of (time, rate U/min) segments, each holding
    until the next. Meals are (time, grams).
    """

    boluses: tuple[tuple[float, float], ...] = ()
    basal: tuple[tuple[float, float], ...] = ()
    meals: tuple[tuple[float, float], ...] = ()
    bolus_width: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "boluses", _check_event_times(self.boluses, "bolus"))
        object.__setattr__(self, "basal", _check_event_times(self.basal, "basal"))
        object.__setattr__(self, "meals", _check_event_times(self.meals, "meal"))
        if self.bolus_width <= 0:
            raise ValueError("bolus_width must be positive")

    def u_ex(self, t: float) -> float:
        """External insulin rate (U/min) at time t."""
        rate = 0.0
        for tb, dose in self.boluses:
            if tb - 1e-9 <= t < tb + self.bolus_width - 1e-9:
                rate += dose / self.bolus_width
        basal = 0.0
        for ts, r in self.basal:
            if t >= ts - 1e-9:
                basal = r
            else:
                break
        return rate + basal

    def meal_appearance(self, t: float, gp: GlucoseParams) -> float:
        """Glucose appearance rate (mg/dl/min) from all meals up to time t."""
        rate = 0.0
        for tm, carbs in self.meals:
            if t >= tm - 1e-9:
                rate += carbs * gp.carb_gain * gp.k_abs * math.exp(-gp.k_abs * (t - tm))
        return rate


@dataclass(frozen=True)
class Trace:
    """Uniformly sampled record of plant states, applied input u, and set point s.

    Channels are column arrays of equal length; sample i is at t0 + i*dt.
    """

    t0: float
    dt: float
    y: np.ndarray
    z: np.ndarray
    iob: np.ndarray
    glucose: np.ndarray
    u: np.ndarray
    s: np.ndarray

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        n = len(self.y)
        if n == 0:
            raise ValueError("trace must contain at least one sample")
        for name in ("z", "iob", "glucose", "u", "s"):
            if len(getattr(self, name)) != n:
                raise ValueError("trace channels must have equal length")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(len(self))

    @property
    def t_end(self) -> float:
        return self.t0 + self.dt * (len(self) - 1)

    def state(self, i: int) -> PlantState:
        return PlantState(y=float(self.y[i]), z=float(self.z[i]),
                          iob=float(self.iob[i]), glucose=float(self.glucose[i]))

    def signal(self, name: str) -> np.ndarray:
        key = {"cgm": "glucose"}.get(name.lower(), name.lower())
        if key not in ("y", "z", "iob", "glucose", "u", "s"):
            raise KeyError(f"unknown trace signal {name!r}")
        return getattr(self, key)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write("t_min,y,z,iob,glucose,u,s\n")
            for i, t in enumerate(self.times):
                f.write(f"{float(t)!r},{float(self.y[i])!r},{float(self.z[i])!r},"
                        f"{float(self.iob[i])!r},{float(self.glucose[i])!r},"
                        f"{float(self.u[i])!r},{float(self.s[i])!r}\n")

    @classmethod
    def read_csv(cls, path: str | Path) -> "Trace":
        rows = []
        with open(path, "r", encoding="utf-8") as f:
            header = f.readline().strip()
            if header != "t_min,y,z,iob,glucose,u,s":
                raise ValueError(f"unexpected trace header in {path}: {header!r}")
            for line in f:
                line = line.strip()
                if line:
                    rows.append([float(v) for v in line.split(",")])
        if len(rows) < 1:
            raise ValueError(f"trace file {path} contains no samples")
        arr = np.asarray(rows, dtype=float)
        t = arr[:, 0]
        dt = float(t[1] - t[0]) if len(t) > 1 else 1.0
        if len(t) > 2 and not np.allclose(np.diff(t), dt, rtol=0, atol=1e-6):
            raise ValueError(f"trace file {path} is not uniformly sampled")
        return cls(t0=float(t[0]), dt=dt, y=arr[:, 1], z=arr[:, 2], iob=arr[:, 3],
                   glucose=arr[:, 4], u=arr[:, 5], s=arr[:, 6])


# ----------------------------------------------------------------- dynamics --

def bmm_derivative(state: PlantState, coeffs: Coefficients, u_ex: float) -> tuple[float, float, float]:
    """Time derivative (dy, dz, diob) of the insulin subsystem."""
    k1, n, p1, i_b = coeffs.k1, coeffs.n, coeffs.p1, coeffs.i_b
    dy = state.z
    dz = -2.0 * k1 * state.z - k1 * k1 * state.y + k1 * k1 * u_ex
    diob = -n * state.iob + p1 * (state.y + i_b)
    return dy, dz, diob


def glucose_derivative(state: PlantState, gp: GlucoseParams, meal_appearance: float) -> float:
    """Glucose rate of change under the minimal extension."""
    return -gp.p_g * (state.glucose - gp.g_b) - gp.s_i * state.iob * state.glucose + meal_appearance


def _deriv4(y: float, z: float, iob: float, g: float,
            coeffs: Coefficients, gp: GlucoseParams,
            u: float, meal: float) -> tuple[float, float, float, float]:
    k1, n, p1, i_b = coeffs.k1, coeffs.n, coeffs.p1, coeffs.i_b
    return (z,
            -2.0 * k1 * z - k1 * k1 * y + k1 * k1 * u,
            -n * iob + p1 * (y + i_b),
            -gp.p_g * (g - gp.g_b) - gp.s_i * iob * g + meal)


def rk4_step(state: PlantState, coeffs: Coefficients, gp: GlucoseParams,
             u: float, meal_appearance: float, dt: float,
             max_step: float = 1.0) -> PlantState:
    """One classical RK4 advance of (y, z, iob, glucose) with inputs held constant.

    Inputs are zero-order held over the step: the stage evaluations reuse the
    rates supplied for the step's start time.
    """
    if not (dt > 0):
        raise ValueError(f"dt must be positive, got {dt}")
    if dt > max_step + 1e-12:
        raise ValueError(f"dt={dt} exceeds configured maximum step {max_step}")
    s = (state.y, state.z, state.iob, state.glucose)
    if not all(math.isfinite(v) for v in s):
        raise SimulationBlowupError("non-finite state passed to rk4_step", t=float("nan"))
    try:
        a = _deriv4(*s, coeffs, gp, u, meal_appearance)
        b = _deriv4(*(si + 0.5 * dt * ai for si, ai in zip(s, a)), coeffs, gp, u, meal_appearance)
        c = _deriv4(*(si + 0.5 * dt * bi for si, bi in zip(s, b)), coeffs, gp, u, meal_appearance)
        d = _deriv4(*(si + dt * ci for si, ci in zip(s, c)), coeffs, gp, u, meal_appearance)
        y, z, iob, g = (si + dt / 6.0 * (ai + 2.0 * bi + 2.0 * ci + di)
                        for si, ai, bi, ci, di in zip(s, a, b, c, d))
    except OverflowError:
        raise SimulationBlowupError("state overflowed during rk4_step", t=float("nan")) from None
    if not all(math.isfinite(v) for v in (y, z, iob, g)) or g <= 0:
        raise SimulationBlowupError("state left the valid domain during rk4_step", t=float("nan"))
    return PlantState(y=y, z=z, iob=iob, glucose=g)


def simulate(initial: PlantState, coeffs: Coefficients, gp: GlucoseParams,
             schedule: InputSchedule, controller: Controller | None,
             horizon: float, dt: float = 1.0, t0: float = 0.0,
             max_step: float = 1.0) -> Trace:
    """Fixed-step forward simulation; returns a trace of ceil(horizon/dt)+1 samples.

    At each step the applied input is controller output plus scheduled u_ex;
    the recorded u channel is that total, and s is the controller's set point
    (0 when no controller is attached). Raises SimulationBlowupError with the
    first offending time if the state leaves the finite range.
    """
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    nsteps = int(math.ceil(horizon / dt - 1e-9))
    y = np.empty(nsteps + 1)
    z = np.empty(nsteps + 1)
    iob = np.empty(nsteps + 1)
    glucose = np.empty(nsteps + 1)
    u_rec = np.empty(nsteps + 1)
    s_rec = np.empty(nsteps + 1)
    state = initial
    for i in range(nsteps + 1):
        t = t0 + i * dt
        if controller is not None:
            u_pi, sp = controller(state, t)
        else:
            u_pi, sp = 0.0, 0.0
        u_total = u_pi + schedule.u_ex(t)
        y[i], z[i] = state.y, state.z
        iob[i], glucose[i] = state.iob, state.glucose
        u_rec[i], s_rec[i] = u_total, sp
        if i == nsteps:
            break
        try:
            state = rk4_step(state, coeffs, gp, u_total,
                             schedule.meal_appearance(t, gp), dt, max_step=max_step)
        except SimulationBlowupError as exc:
            raise SimulationBlowupError(f"simulation blew up at t={t + dt}: {exc}",
                                        t=t + dt) from None
    return Trace(t0=t0, dt=dt, y=y, z=z, iob=iob, glucose=glucose, u=u_rec, s=s_rec)


def closed_form_insulin(coeffs: Coefficients, u_step: float, t: float) -> tuple[float, float]:
    """Analytic (y, z) response to a constant step input from zero initial state.

    The subcutaneous chain is critically damped with a double pole at -k1:
    y(t) = U*(1 - (1 + k1*t)*exp(-k1*t)), z(t) = U*k1^2*t*exp(-k1*t).
    """
    k1 = coeffs.k1
    e = math.exp(-k1 * t)
    y = u_step * (1.0 - (1.0 + k1 * t) * e)
    z = u_step * k1 * k1 * t * e
    return y, z


def equilibrium_state(coeffs: Coefficients, gp: GlucoseParams, basal_rate: float) -> PlantState:
    """Analytic steady state under a constant basal infusion rate."""
    y = basal_rate
    iob = coeffs.p1 * (y + coeffs.i_b) / coeffs.n
    glucose = gp.p_g * gp.g_b / (gp.p_g + gp.s_i * iob)
    return PlantState(y=y, z=0.0, iob=iob, glucose=glucose)
