"""Per-case SpO2 time series: synthetic generation and the trace CSV format.

A trace is a gap-free minute grid starting at minute 0.  Missing readings are
stored as NaN in memory and as an empty field on disk.
"""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np

SPO2_MIN = 50.0
SPO2_MAX = 100.0
TRACE_HEADER = ("case_id", "minute", "spo2")


class TraceError(ValueError):
    """Base class for trace parsing and validation failures."""


class TraceParseError(TraceError):
    def __init__(self, line: int, message: str) -> None:
        super().__init__(f"line {line}: {message}")
        self.line = line


class TraceValidationError(TraceError):
    pass


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending parameter."""

    def __init__(self, field_name: str, message: str) -> None:
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


def case_rng(seed: int, index: int) -> np.random.Generator:
    """Independent PCG64 stream keyed by ``(seed, index)``.

    Streams do not depend on the order in which cases are generated.
    """
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=(int(index),))
    return np.random.Generator(np.random.PCG64(ss))


@dataclass(frozen=True, eq=False)
class SpO2Trace:
    case_id: str
    values: np.ndarray

    def __post_init__(self) -> None:
        arr = np.array(self.values, dtype=np.float64).reshape(-1)
        present = arr[~np.isnan(arr)]
        if present.size and (present.min() < SPO2_MIN or present.max() > SPO2_MAX):
            raise TraceValidationError(
                f"case {self.case_id!r}: SpO2 values must lie in [{SPO2_MIN:g}, {SPO2_MAX:g}]"
            )
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @property
    def duration(self) -> int:
        return int(self.values.shape[0])

    @property
    def missing(self) -> np.ndarray:
        return np.isnan(self.values)

    @property
    def samples(self) -> list[tuple[int, float | None]]:
        return [(t, None if math.isnan(v) else float(v)) for t, v in enumerate(self.values)]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SpO2Trace):
            return NotImplemented
        return self.case_id == other.case_id and np.array_equal(
            self.values, other.values, equal_nan=True
        )

    def __hash__(self) -> int:
        return hash((self.case_id, self.values.tobytes()))


@dataclass(frozen=True)
class SynthConfig:
    """Synthetic case generator parameters.

    Ranges are inclusive ``(low, high)`` pairs.  Beyond the core parameters:

    * ``ar_coef``: mean-reversion coefficient of the background wander.
    * ``event_rate_cv``: per-case event rate is gamma distributed with this
      coefficient of variation (mean ``event_rate``); 0 gives every case the
      same rate.
    * ``onset_lead_minutes``: minutes from event onset to nadir.
    * ``noise_spread``: per-case noise scale is ``noise_std * exp(spread * z)``.
    * ``precursor_std``: extra white noise during ``precursor_minutes`` before
      each onset and through the descent (unstable readings ahead of an event).

    The defaults land near a 1.7% positive rate after labeling and exclusion.
    """

    n_cases: int = 500
    duration_minutes: tuple[int, int] = (90, 240)
    baseline_spo2: tuple[float, float] = (95.0, 100.0)
    event_rate: float = 0.9
    event_depth: tuple[float, float] = (80.0, 94.0)
    event_halflife_minutes: float = 3.0
    noise_std: float = 0.5
    missing_rate: float = 0.02
    seed: int = 0
    ar_coef: float = 0.9
    event_rate_cv: float = 1.5
    onset_lead_minutes: tuple[int, int] = (4, 15)
    noise_spread: float = 0.5
    precursor_std: float = 1.0
    precursor_minutes: tuple[int, int] = (10, 25)

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        def rng_ok(name: str, lo_bound: float, hi_bound: float) -> None:
            lo, hi = getattr(self, name)
            if not (lo <= hi):
                raise ConfigError(name, f"empty range ({lo}, {hi})")
            if lo < lo_bound or hi > hi_bound:
                raise ConfigError(name, f"range must lie within [{lo_bound}, {hi_bound}]")

        if int(self.n_cases) != self.n_cases or self.n_cases < 0:
            raise ConfigError("n_cases", "must be a non-negative integer")
        rng_ok("duration_minutes", 1, 10**7)
        rng_ok("baseline_spo2", 94.0, 100.0)
        rng_ok("event_depth", 70.0, 95.0)
        rng_ok("onset_lead_minutes", 2, 10**4)
        if not (self.event_rate >= 0 and math.isfinite(self.event_rate)):
            raise ConfigError("event_rate", "must be finite and >= 0")
        if not (self.event_halflife_minutes > 0):
            raise ConfigError("event_halflife_minutes", "must be > 0")
        if not (self.noise_std >= 0):
            raise ConfigError("noise_std", "must be >= 0")
        if not (0 <= self.missing_rate < 1):
            raise ConfigError("missing_rate", "must lie in [0, 1)")
        if not (0 <= self.ar_coef < 1):
            raise ConfigError("ar_coef", "must lie in [0, 1)")
        rng_ok("precursor_minutes", 0, 10**4)
        if not (self.noise_spread >= 0):
            raise ConfigError("noise_spread", "must be >= 0")
        if not (self.precursor_std >= 0):
            raise ConfigError("precursor_std", "must be >= 0")
        if not (self.event_rate_cv >= 0):
            raise ConfigError("event_rate_cv", "must be >= 0")
        if not (0 <= int(self.seed) < 2**64):
            raise ConfigError("seed", "must be a 64-bit unsigned integer")


@dataclass(frozen=True)
class DesaturationEvent:
    onset: int
    nadir_minute: int
    depth: float


def _quantize(values: np.ndarray) -> np.ndarray:
    # Values must survive a text round trip exactly.
    return np.array([float(f"{v:.2f}") for v in values.tolist()], dtype=np.float64)


def simulate_case(config: SynthConfig, index: int) -> tuple[SpO2Trace, list[DesaturationEvent]]:
    """Generate case ``index`` together with the events that shaped it."""
    rng = case_rng(config.seed, index)
    d_lo, d_hi = config.duration_minutes
    duration = int(rng.integers(d_lo, d_hi + 1))
    baseline = float(rng.uniform(*config.baseline_spo2))

    rate = config.event_rate
    if config.event_rate_cv > 0 and rate > 0:
        shape = 1.0 / config.event_rate_cv**2
        rate = float(rng.gamma(shape, rate / shape))
    n_events = int(rng.poisson(rate * duration / 60.0))
    onsets = np.sort(rng.uniform(0.0, duration, size=n_events))
    leads = rng.integers(config.onset_lead_minutes[0], config.onset_lead_minutes[1] + 1, size=n_events)
    depths = rng.uniform(*config.event_depth, size=n_events)

    t = np.arange(duration, dtype=np.float64)
    dip = np.zeros(duration)
    events = []
    decay = math.log(2.0) / config.event_halflife_minutes
    for onset, lead, depth in zip(onsets, leads, depths):
        amp = max(baseline - depth, 0.0)
        nadir = onset + lead
        # Accelerating descent: a shallow early decline precedes the steep fall.
        s = np.clip((t - onset) / lead, 0.0, 1.0)
        down = np.expm1(2.5 * s) / math.expm1(2.5)
        up = np.exp(-decay * np.clip(t - nadir, 0.0, None))
        dip += np.where(t < onset, 0.0, amp * np.where(t <= nadir, down, up))
        events.append(DesaturationEvent(int(math.floor(onset)), int(math.floor(nadir)), float(depth)))

    wander = np.zeros(duration)
    if config.noise_std > 0:
        phi = config.ar_coef
        sd = config.noise_std * math.exp(config.noise_spread * rng.standard_normal())
        innov = rng.normal(0.0, sd * math.sqrt(1.0 - phi * phi), size=duration)
        wander[0] = rng.normal(0.0, sd)
        for k in range(1, duration):
            wander[k] = phi * wander[k - 1] + innov[k]
        wander += rng.normal(0.0, 0.5 * sd, size=duration)

    level = baseline + wander - dip
    if config.precursor_std > 0:
        # signal instability in the run-up to an event
        unstable = np.zeros(duration, dtype=bool)
        spans = rng.integers(config.precursor_minutes[0], config.precursor_minutes[1] + 1, size=n_events)
        for ev, span in zip(events, spans):
            unstable[max(ev.onset - span, 0) : ev.nadir_minute + 1] = True
        level = level + unstable * rng.normal(0.0, config.precursor_std, size=duration)
    values = _quantize(np.clip(level, SPO2_MIN, SPO2_MAX))
    if config.missing_rate > 0:
        values[rng.random(duration) < config.missing_rate] = np.nan
    return SpO2Trace(f"c{index}", values), events


def generate_synthetic_cases(config: SynthConfig) -> list[SpO2Trace]:
    config.validate()
    return [simulate_case(config, i)[0] for i in range(config.n_cases)]


def _format_value(v: float) -> str:
    if math.isnan(v):
        return ""
    text = f"{v:.2f}".rstrip("0").rstrip(".")
    return text


def dumps_traces(traces: Iterable[SpO2Trace]) -> str:
    buf = io.StringIO()
    buf.write(",".join(TRACE_HEADER) + "\n")
    for trace in traces:
        cid = trace.case_id
        if not cid or any(c in cid for c in ',"\n\r'):
            raise TraceValidationError(f"case id {cid!r} cannot be written to CSV")
        for minute, v in enumerate(trace.values.tolist()):
            buf.write(f"{cid},{minute},{_format_value(v)}\n")
    return buf.getvalue()


def save_traces(traces: Iterable[SpO2Trace], path: str | os.PathLike) -> None:
    data = dumps_traces(traces).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(data)


def _parse_rows(lines: Iterator[str]) -> Iterator[tuple[int, str, int, float]]:
    reader = csv.reader(lines)
    try:
        header = next(reader)
    except StopIteration:
        return
    if tuple(h.strip() for h in header) != TRACE_HEADER:
        raise TraceParseError(1, f"expected header {','.join(TRACE_HEADER)!r}")
    for row in reader:
        lineno = reader.line_num
        if not row:
            continue
        if len(row) != 3:
            raise TraceParseError(lineno, f"expected 3 fields, got {len(row)}")
        cid, minute_s, value_s = row
        if not cid:
            raise TraceParseError(lineno, "empty case_id")
        try:
            minute = int(minute_s)
        except ValueError:
            raise TraceParseError(lineno, f"bad minute {minute_s!r}") from None
        if value_s.strip() == "":
            value = math.nan
        else:
            try:
                value = float(value_s)
            except ValueError:
                raise TraceParseError(lineno, f"bad spo2 value {value_s!r}") from None
            if not math.isfinite(value):
                raise TraceParseError(lineno, f"non-finite spo2 value {value_s!r}")
        yield lineno, cid, minute, value


def loads_traces(text: str) -> list[SpO2Trace]:
    traces: list[SpO2Trace] = []
    seen: set[str] = set()
    cur_id: str | None = None
    cur: list[float] = []

    def flush() -> None:
        if cur_id is not None:
            traces.append(SpO2Trace(cur_id, np.array(cur, dtype=np.float64)))

    for lineno, cid, minute, value in _parse_rows(iter(text.splitlines())):
        if cid != cur_id:
            if cid in seen:
                raise TraceValidationError(f"line {lineno}: rows for case {cid!r} are not contiguous")
            flush()
            seen.add(cid)
            cur_id, cur = cid, []
        if minute != len(cur):
            raise TraceValidationError(
                f"line {lineno}: case {cid!r} minute {minute} out of sequence (expected {len(cur)})"
            )
        if not math.isnan(value) and not (SPO2_MIN <= value <= SPO2_MAX):
            raise TraceValidationError(f"line {lineno}: spo2 {value} outside [50, 100]")
        cur.append(value)
    flush()
    return traces


def load_traces(path: str | os.PathLike) -> list[SpO2Trace]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        return loads_traces(fh.read())


def trace_index(traces: Sequence[SpO2Trace]) -> dict[str, SpO2Trace]:
    return {t.case_id: t for t in traces}
