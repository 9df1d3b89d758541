"""Quantitative STL robustness over sampled traces and glycemic outcome metrics.

Semantics are sample-based (no interpolation between samples): atoms evaluate
at sample times, temporal operators take min/max over the sample times falling
inside the shifted interval. The safety criterion used by the gate is the
ADA rule "time below range stays under 4%", evaluated as a sliding-window
aggregate with rho = 0.04 - max_window_tbr (rho >= 0 counts as satisfied).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np

from .dynamics import Trace

__all__ = [
    "Atom", "Not", "And", "Or", "Globally", "Eventually", "StlFormula",
    "Robustness", "OutcomeMetrics", "WindowError", "FormulaParseError",
    "robustness", "outcome_metrics", "ada_safety", "parse_formula", "format_formula",
]

_COMPARATORS = ("<", ">", "<=", ">=")


class WindowError(ValueError):
    """An operator interval (or evaluation time) falls outside the trace."""


class FormulaParseError(ValueError):
    """Malformed formula text; carries the character position."""

    def __init__(self, message: str, pos: int):
        super().__init__(f"{message} (at position {pos})")
        self.pos = pos


@dataclass(frozen=True)
class Atom:
    signal: str
    op: str
    threshold: float

    def __post_init__(self):
        if self.op not in _COMPARATORS:
            raise ValueError(f"comparator must be one of {_COMPARATORS}, got {self.op!r}")
        if not math.isfinite(self.threshold):
            raise ValueError("threshold must be finite")


@dataclass(frozen=True)
class Not:
    child: "StlFormula"


@dataclass(frozen=True)
class And:
    left: "StlFormula"
    right: "StlFormula"


@dataclass(frozen=True)
class Or:
    left: "StlFormula"
    right: "StlFormula"


def _check_interval(a: float, b: float):
    if not (0 <= a <= b):
        raise ValueError(f"interval must satisfy 0 <= a <= b, got [{a}, {b}]")


@dataclass(frozen=True)
class Globally:
    a: float
    b: float
    child: "StlFormula"

    def __post_init__(self):
        _check_interval(self.a, self.b)


@dataclass(frozen=True)
class Eventually:
    a: float
    b: float
    child: "StlFormula"

    def __post_init__(self):
        _check_interval(self.a, self.b)


StlFormula = Union[Atom, Not, And, Or, Globally, Eventually]


@dataclass(frozen=True)
class Robustness:
    """Signed satisfaction margin rho at a given evaluation time."""

    rho: float
    evaluated_at: float

    @property
    def satisfied(self) -> bool:
        # rho == 0 counts as satisfied (non-strict acceptance, documented).
        return self.rho >= 0.0


@dataclass(frozen=True)
class OutcomeMetrics:
    """Percent time in/above/below range plus mean CGM over a trace."""

    tir: float
    tar: float
    tbr: float
    mean_cgm: float


def _sample_index(trace: Trace, t: float) -> int:
    pos = (t - trace.t0) / trace.dt
    i = int(round(pos))
    if abs(pos - i) > 1e-6:
        raise WindowError(f"time {t} does not align with the trace sampling grid "
                          f"(t0={trace.t0}, dt={trace.dt})")
    if i < 0 or i >= len(trace):
        raise WindowError(f"time {t} outside trace span [{trace.t0}, {trace.t_end}]")
    return i


def _window_indices(trace: Trace, lo: float, hi: float) -> range:
    if lo < trace.t0 - 1e-9 or hi > trace.t_end + 1e-9:
        raise WindowError(f"interval [{lo}, {hi}] outside trace span "
                          f"[{trace.t0}, {trace.t_end}]")
    first = int(math.ceil((lo - trace.t0) / trace.dt - 1e-9))
    last = int(math.floor((hi - trace.t0) / trace.dt + 1e-9))
    if last < first:
        raise WindowError(f"interval [{lo}, {hi}] contains no sample times")
    return range(first, last + 1)


def _rho(formula: StlFormula, trace: Trace, t: float) -> float:
    if isinstance(formula, Atom):
        x = float(trace.signal(formula.signal)[_sample_index(trace, t)])
        if formula.op in (">", ">="):
            return x - formula.threshold
        return formula.threshold - x
    if isinstance(formula, Not):
        return -_rho(formula.child, trace, t)
    if isinstance(formula, And):
        return min(_rho(formula.left, trace, t), _rho(formula.right, trace, t))
    if isinstance(formula, Or):
        return max(_rho(formula.left, trace, t), _rho(formula.right, trace, t))
    if isinstance(formula, (Globally, Eventually)):
        idx = _window_indices(trace, t + formula.a, t + formula.b)
        values = [_rho(formula.child, trace, trace.t0 + i * trace.dt) for i in idx]
        return min(values) if isinstance(formula, Globally) else max(values)
    raise TypeError(f"not an STL formula node: {formula!r}")


def robustness(formula: StlFormula, trace: Trace, t: float | None = None) -> Robustness:
    """Quantitative robustness of `formula` on `trace` at time t (default t0)."""
    t_eval = trace.t0 if t is None else float(t)
    return Robustness(rho=_rho(formula, trace, t_eval), evaluated_at=t_eval)


def outcome_metrics(trace: Trace) -> OutcomeMetrics:
    """TIR/TAR/TBR (percent of samples) and mean CGM over the glucose channel."""
    g = trace.glucose
    if len(g) == 0:
        raise ValueError("cannot compute metrics on an empty trace")
    n = len(g)
    tbr = float(np.count_nonzero(g < 70.0)) / n * 100.0
    tar = float(np.count_nonzero(g > 180.0)) / n * 100.0
    tir = 100.0 - tbr - tar
    return OutcomeMetrics(tir=tir, tar=tar, tbr=tbr, mean_cgm=float(np.mean(g)))


def ada_safety(trace: Trace, window: float | None = None) -> Robustness:
    """Safety margin of the ADA criterion: every window keeps TBR below 4%.

    `window` is the sliding-window length in minutes; None (the default) uses a
    single window covering the whole trace. Returns rho = 0.04 - max_w tbr_w
    with TBR expressed as a fraction; rho >= 0 means the plan satisfies the
    criterion (the 4% boundary counts as safe).
    """
    span = trace.t_end - trace.t0
    if window is None:
        window = span
    if window > span + 1e-9:
        raise WindowError(f"window {window} exceeds trace span {span}")
    per_window = max(1, int(math.floor(window / trace.dt + 1e-9)) + 1)
    below = trace.glucose < 70.0
    worst = 0.0
    for start in range(0, len(trace) - per_window + 1):
        tbr = float(np.count_nonzero(below[start:start + per_window])) / per_window
        if tbr > worst:
            worst = tbr
    return Robustness(rho=0.04 - worst, evaluated_at=trace.t0)


# ---------------------------------------------------------------- text form --

def format_formula(formula: StlFormula) -> str:
    if isinstance(formula, Atom):
        return f"({formula.op} {formula.signal} {formula.threshold!r})"
    if isinstance(formula, Not):
        return f"(not {format_formula(formula.child)})"
    if isinstance(formula, And):
        return f"(and {format_formula(formula.left)} {format_formula(formula.right)})"
    if isinstance(formula, Or):
        return f"(or {format_formula(formula.left)} {format_formula(formula.right)})"
    if isinstance(formula, Globally):
        return f"(G {formula.a!r} {formula.b!r} {format_formula(formula.child)})"
    if isinstance(formula, Eventually):
        return f"(F {formula.a!r} {formula.b!r} {format_formula(formula.child)})"
    raise TypeError(f"not an STL formula node: {formula!r}")


class _Parser:
    """Prefix s-expression parser, e.g. (G 0 1440 (> cgm 70))."""

    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def error(self, msg: str) -> FormulaParseError:
        return FormulaParseError(msg, self.pos)

    def skip_ws(self):
        while self.pos < len(self.text) and self.text[self.pos].isspace():
            self.pos += 1

    def expect(self, ch: str):
        self.skip_ws()
        if self.pos >= len(self.text) or self.text[self.pos] != ch:
            raise self.error(f"expected {ch!r}")
        self.pos += 1

    def token(self) -> str:
        self.skip_ws()
        start = self.pos
        while self.pos < len(self.text) and not self.text[self.pos].isspace() \
                and self.text[self.pos] not in "()":
            self.pos += 1
        if self.pos == start:
            raise self.error("expected a token")
        return self.text[start:self.pos]

    def number(self) -> float:
        tok = self.token()
        try:
            return float(tok)
        except ValueError:
            raise self.error(f"expected a number, got {tok!r}") from None

    def formula(self) -> StlFormula:
        self.expect("(")
        head = self.token()
        if head in _COMPARATORS:
            signal = self.token()
            threshold = self.number()
            node: StlFormula = Atom(signal=signal, op=head, threshold=threshold)
        elif head == "not":
            node = Not(self.formula())
        elif head in ("and", "or"):
            left = self.formula()
            right = self.formula()
            node = And(left, right) if head == "and" else Or(left, right)
        elif head in ("G", "F"):
            a = self.number()
            b = self.number()
            child = self.formula()
            try:
                node = Globally(a, b, child) if head == "G" else Eventually(a, b, child)
            except ValueError as exc:
                raise self.error(str(exc)) from None
        else:
            raise self.error(f"unknown operator {head!r}")
        self.expect(")")
        return node


def parse_formula(text: str) -> StlFormula:
    """Parse the prefix text format; raises FormulaParseError with position."""
    p = _Parser(text)
    node = p.formula()
    p.skip_ws()
    if p.pos != len(text):
        raise FormulaParseError("trailing input after formula", p.pos)
    return node
