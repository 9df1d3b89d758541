"""Embodied prompt generation, a chat-completion client, and a local oracle.

Forward prompts carry a diffusion parameter and ask for the percentage IOB
series; inverse records pair a serialized series with the parameter that
generated it (instruction-tuning data). The series regime is fixed and
documented: 40 samples at 10-second spacing, IOB starting at 1.0 from a
stationary state, settling toward a plateau of 0.898 with rate 0.225/s, all
rate constants per second. One numeric formatting rule (5 significant digits,
decimal point, at least one decimal place) is used for serialization, parsing,
and RMSE evaluation so the three stay consistent.

The chat client speaks a chat-completions-style JSON protocol over HTTP; the
local oracle answers forward prompts offline by running the same simulator
that generates the datasets.
"""

from __future__ import annotations

import json
import math
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import httpx
import numpy as np

from .dynamics import Coefficients, GlucoseParams, InputSchedule, PlantState, simulate

__all__ = [
    "AlpacaRecord", "SeriesSpec", "ChatEndpointConfig",
    "SeriesParseError", "ChatClientError", "ChatTimeoutError",
    "ChatTransportError", "ChatStatusError", "ChatPayloadError",
    "format_number", "percentage_iob_series", "format_forward_prompt",
    "format_inverse_record", "generate_dataset", "parse_series_response",
    "LocalOracle", "ChatClient", "evaluate_rmse",
]

# Percentage-mode series regime (rates per second). The plateau and settle
# rate were fitted once against the reference 40-sample series; stationary
# start means p1*(y0 + i_b) = n * iob0 so the series begins flat at 1.0.
SERIES_PLATEAU = 0.898
SERIES_SETTLE_RATE = 0.23      # 1/s
SERIES_Y0 = 1.0

SYSTEM_PREAMBLE_FORWARD = (
    "Below is an instruction that describes the task of finding the Insulin On "
    "Board of a type 1 diabetic patient paired with a diffusion parameter of the "
    "Bergman Minimal Model for an insulin intake. Write a corresponding output "
    "that is the Insulin On Board timeseries."
)
SYSTEM_PREAMBLE_INVERSE = (
    "Below is an instruction that describes the task of finding the diffusion "
    "parameter of the Bergman Minimal Model paired with a time series of 40 "
    "Insulin on Board."
)


class SeriesParseError(ValueError):
    """Response text did not contain a usable numeric series."""


class ChatClientError(RuntimeError):
    """Base class for chat transport failures."""


class ChatTimeoutError(ChatClientError):
    pass


class ChatTransportError(ChatClientError):
    pass


class ChatStatusError(ChatClientError):
    def __init__(self, status_code: int, body: str):
        super().__init__(f"endpoint returned HTTP {status_code}: {body[:200]}")
        self.status_code = status_code


class ChatPayloadError(ChatClientError):
    pass


def format_number(x: float, precision: int = 5) -> str:
    """5-significant-digit decimal rendering with at least one decimal place."""
    if not math.isfinite(x):
        raise ValueError(f"cannot serialize non-finite value {x!r}")
    s = f"{x:.{precision}g}"
    if "e" in s or "E" in s:
        # fall back to positional notation for extreme magnitudes
        s = f"{x:.{precision + 6}f}".rstrip("0")
        if s.endswith("."):
            s += "0"
    if "." not in s:
        s += ".0"
    return s


@dataclass(frozen=True)
class SeriesSpec:
    """Shape of the percentage IOB series carried in prompts."""

    sample_count: int = 40
    sample_period_s: float = 10.0
    initial_iob: float = 1.0
    precision: int = 5

    def __post_init__(self):
        if self.sample_count < 2:
            raise ValueError("sample_count must be at least 2")
        if self.sample_period_s <= 0:
            raise ValueError("sample_period must be positive")


@dataclass(frozen=True)
class AlpacaRecord:
    """Instruction-tuning record with the canonical three section markers."""

    instruction: str
    input: str
    output: str

    def __post_init__(self):
        if not self.instruction.strip():
            raise ValueError("instruction must be nonempty")

    def render(self, preamble: str | None = None) -> str:
        parts = []
        if preamble:
            parts.append(preamble)
        parts.append(f"### Instruction: {self.instruction}")
        parts.append(f"### Input:\n{self.input}")
        parts.append(f"### Response: {self.output}")
        return "\n".join(parts)

    def to_json(self) -> str:
        return json.dumps({"instruction": self.instruction, "input": self.input,
                           "output": self.output}, sort_keys=True)


def percentage_iob_series(k1_per_s: float, spec: SeriesSpec = SeriesSpec()) -> np.ndarray:
    """Simulate the percentage-mode IOB series for a diffusion parameter.

    Integrates the plant in seconds at a 1 s internal step (the plateau rate
    is too fast for 10 s RK4 steps), then samples every `sample_period_s`.
    """
    if k1_per_s <= 0:
        raise ValueError("diffusion parameter must be positive")
    n = SERIES_SETTLE_RATE
    p1 = n * (1.0 - SERIES_PLATEAU) / SERIES_Y0
    i_b = SERIES_PLATEAU * SERIES_Y0 / (1.0 - SERIES_PLATEAU)
    coeffs = Coefficients(k1=k1_per_s, n=n, p1=p1, i_b=i_b)
    horizon = (spec.sample_count - 1) * spec.sample_period_s
    # neutral glucose channel; this regime only reads the iob channel
    gp = GlucoseParams(p_g=1e-9, s_i=1e-12, g_b=110.0, k_abs=1e-9, carb_gain=1e-9)
    initial = PlantState(y=SERIES_Y0, z=0.0, iob=spec.initial_iob, glucose=110.0)
    trace = simulate(initial, coeffs, gp, InputSchedule(), None,
                     horizon=horizon, dt=1.0, max_step=1.0)
    stride = int(round(spec.sample_period_s))
    if abs(stride - spec.sample_period_s) > 1e-9 or stride < 1:
        raise ValueError("sample_period must be a whole number of seconds")
    return np.asarray(trace.iob[::stride][:spec.sample_count])


def serialize_series(series: Sequence[float], spec: SeriesSpec = SeriesSpec()) -> str:
    return " ".join(format_number(float(v), spec.precision) for v in series)


def format_forward_prompt(k1: float, spec: SeriesSpec = SeriesSpec()) -> str:
    """Prompt asking for the IOB series given a diffusion parameter."""
    record = AlpacaRecord(
        instruction="I took an insulin dosage now. What is my Insulin On Board "
                    "percentage timeseries?",
        input=f"diffusion_parameter = {format_number(k1, spec.precision)}",
        output="",
    )
    text = record.render(SYSTEM_PREAMBLE_FORWARD)
    # strip the empty response payload, keeping the marker for completion
    return text.rstrip()


def format_inverse_record(series: Sequence[float], k1: float,
                          spec: SeriesSpec = SeriesSpec()) -> AlpacaRecord:
    """Instruction-tuning record: serialized series in, coefficient out."""
    if len(series) != spec.sample_count:
        raise ValueError(f"series has {len(series)} samples, spec wants {spec.sample_count}")
    period_total = int(round(spec.sample_count * spec.sample_period_s))
    return AlpacaRecord(
        instruction="Find out the diffusion parameter from the Bergman Minimal "
                    f"Model with the following time series. The {spec.sample_count} "
                    f"values corresponding to {period_total} seconds of IOB values",
        input=serialize_series(series, spec),
        output=format_number(k1, spec.precision),
    )


def generate_dataset(n: int, k1_sampler: Callable[[np.random.Generator], float] | None,
                     spec: SeriesSpec, seed: int, path: str | Path) -> Path:
    """Write n inverse records as JSON lines; seeded and byte-reproducible."""
    if n < 1:
        raise ValueError("dataset size must be at least 1")
    rng = np.random.default_rng(seed)
    if k1_sampler is None:
        k1_sampler = lambda r: float(r.uniform(0.008, 0.04))
    path = Path(path)
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for _ in range(n):
                k1 = k1_sampler(rng)
                series = percentage_iob_series(k1, spec)
                f.write(format_inverse_record(series, k1, spec).to_json())
                f.write("\n")
    except OSError as exc:
        raise OSError(f"cannot write dataset to {path}: {exc}") from exc
    return path


_NUMBER_RE = re.compile(r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?")


def parse_series_response(text: str) -> list[float]:
    """Extract the numeric series following the last Response marker.

    Falls back to scanning the whole text when no marker is present. Raises
    SeriesParseError when no numbers are found or a literal is non-finite.
    """
    marker = "Response:"
    idx = text.rfind(marker)
    payload = text[idx + len(marker):] if idx >= 0 else text
    values = [float(m.group(0)) for m in _NUMBER_RE.finditer(payload)]
    if not values:
        raise SeriesParseError("no numeric literals found in response")
    for v in values:
        if not math.isfinite(v):
            raise SeriesParseError(f"non-finite literal {v!r} in response")
    return values


class LocalOracle:
    """Deterministic offline responder: answers forward prompts via simulation."""

    name = "local-oracle"

    def __init__(self, spec: SeriesSpec = SeriesSpec()):
        self.spec = spec

    def query(self, prompt: str) -> str:
        m = re.search(r"diffusion_parameter\s*=\s*([-+0-9.eE]+)", prompt)
        if m is None:
            raise SeriesParseError(
                "oracle can only answer forward prompts carrying a "
                "'diffusion_parameter = <value>' input field")
        k1 = float(m.group(1))
        series = percentage_iob_series(k1, self.spec)
        body = ", ".join(format_number(float(v), self.spec.precision) for v in series)
        return f"### Response: Your timeseries is {body}"


@dataclass(frozen=True)
class ChatEndpointConfig:
    """Remote chat-completion endpoint; the auth token is read from the
    environment variable named here and never persisted."""

    base_url: str
    model: str = "insulin-ft"
    timeout_s: float = 30.0
    max_retries: int = 2
    auth_env_var: str | None = None

    def __post_init__(self):
        if self.timeout_s <= 0:
            raise ValueError("timeout must be positive")
        if self.max_retries < 0:
            raise ValueError("retries must be nonnegative")


class ChatClient:
    """Minimal chat-completions client with bounded retries.

    `transport` is injectable for testing (httpx.BaseTransport).
    """

    name = "chat-endpoint"

    def __init__(self, config: ChatEndpointConfig,
                 transport: httpx.BaseTransport | None = None):
        self.config = config
        self._transport = transport

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.config.auth_env_var:
            token = os.environ.get(self.config.auth_env_var, "")
            if token:
                headers["Authorization"] = f"Bearer {token}"
        return headers

    def query(self, prompt: str) -> str:
        payload = {"model": self.config.model,
                   "messages": [{"role": "user", "content": prompt}]}
        last: Exception | None = None
        for _ in range(self.config.max_retries + 1):
            try:
                with httpx.Client(timeout=self.config.timeout_s,
                                  transport=self._transport) as client:
                    resp = client.post(self.config.base_url, json=payload,
                                       headers=self._headers())
            except httpx.TimeoutException as exc:
                last = ChatTimeoutError(f"request timed out after {self.config.timeout_s}s")
                continue
            except httpx.TransportError as exc:
                last = ChatTransportError(str(exc))
                continue
            if resp.status_code < 200 or resp.status_code >= 300:
                last = ChatStatusError(resp.status_code, resp.text)
                continue
            try:
                data = resp.json()
                return data["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise ChatPayloadError(f"malformed chat payload: {exc}") from exc
        assert last is not None
        raise last


def evaluate_rmse(generated: Sequence[float], reference: Sequence[float],
                  initial_iob: float = 1.0) -> float:
    """Percentage RMSE between two series, normalized by the initial IOB.

    Series of unequal length are truncated to the shorter one (documented
    concession to free-text generators that may stop early or run long).
    """
    a = np.asarray(generated, dtype=float)
    b = np.asarray(reference, dtype=float)
    m = min(len(a), len(b))
    if m == 0:
        raise ValueError("cannot evaluate RMSE of an empty series")
    d = a[:m] - b[:m]
    return float(np.sqrt(np.mean(d * d)) / initial_iob * 100.0)
