"""Labeling, windowing, normalization, case splits and balanced batching."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from typing import Iterator, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .traces import ConfigError, SpO2Trace, case_rng

WINDOW = 60
FALLBACK_SPO2 = 97.0
SPLITS = ("train", "validation", "test")


@dataclass(frozen=True)
class LabelingConfig:
    hypoxemia_threshold: float = 92.0
    horizon_minutes: int = 5
    exclusion_threshold: float = 95.0
    exclusion_lookback_minutes: int = 10
    extended_horizon_minutes: int = 10

    def __post_init__(self) -> None:
        for name in (
            "hypoxemia_threshold",
            "horizon_minutes",
            "exclusion_threshold",
            "exclusion_lookback_minutes",
            "extended_horizon_minutes",
        ):
            if not getattr(self, name) > 0:
                raise ConfigError(name, "must be positive")
        if not self.exclusion_threshold > self.hypoxemia_threshold:
            raise ConfigError("exclusion_threshold", "must exceed hypoxemia_threshold")
        if not self.extended_horizon_minutes > self.horizon_minutes:
            raise ConfigError("extended_horizon_minutes", "must exceed horizon_minutes")


@dataclass(frozen=True)
class LabeledPoints:
    """Column-oriented ``(t, label, included)`` records for one trace."""

    t: np.ndarray
    label: np.ndarray
    included: np.ndarray

    def __len__(self) -> int:
        return int(self.t.shape[0])

    def __iter__(self) -> Iterator[tuple[int, int, bool]]:
        for t, y, inc in zip(self.t.tolist(), self.label.tolist(), self.included.tolist()):
            yield t, y, inc

    def select(self, mask: np.ndarray) -> "LabeledPoints":
        return LabeledPoints(self.t[mask], self.label[mask], self.included[mask])


def _any_in_windows(hit: np.ndarray, starts: np.ndarray, stops: np.ndarray) -> np.ndarray:
    """``hit[starts[i]:stops[i]].any()`` for every i, via prefix counts."""
    csum = np.concatenate([[0], np.cumsum(hit, dtype=np.int64)])
    starts = np.clip(starts, 0, hit.shape[0])
    stops = np.clip(stops, 0, hit.shape[0])
    return (csum[stops] - csum[np.minimum(starts, stops)]) > 0


def label_timepoints(trace: SpO2Trace, cfg: LabelingConfig = LabelingConfig()) -> LabeledPoints:
    """Label every minute that has a full prediction horizon ahead of it.

    A point is positive when an observed value in ``(t, t + horizon]`` is at
    or below the hypoxemia threshold, and excluded when an observed value in
    ``[t - lookback, t]`` is strictly below the exclusion threshold.
    """
    v = trace.values
    n = trace.duration
    h = cfg.horizon_minutes
    t = np.arange(max(n - h, 0), dtype=np.int64)
    observed = ~np.isnan(v)
    low = observed & (np.nan_to_num(v, nan=np.inf) <= cfg.hypoxemia_threshold)
    dropped = observed & (np.nan_to_num(v, nan=np.inf) < cfg.exclusion_threshold)
    label = _any_in_windows(low, t + 1, t + h + 1).astype(np.int8)
    excluded = _any_in_windows(dropped, t - cfg.exclusion_lookback_minutes, t + 1)
    return LabeledPoints(t, label, ~excluded)


def apply_doctor_filter(
    points: LabeledPoints, trace: SpO2Trace, cfg: LabelingConfig = LabelingConfig()
) -> LabeledPoints:
    """Drop negatives that turn hypoxemic between the horizon and the extended horizon."""
    v = trace.values
    low = ~np.isnan(v) & (np.nan_to_num(v, nan=np.inf) <= cfg.hypoxemia_threshold)
    late = _any_in_windows(
        low, points.t + cfg.horizon_minutes + 1, points.t + cfg.extended_horizon_minutes + 1
    )
    return points.select(~((points.label == 0) & late))


def impute_windows(raw: np.ndarray) -> np.ndarray:
    """Fill NaNs row-wise: carry forward, back-fill the leading gap, 97.0 if empty."""
    raw = np.atleast_2d(np.asarray(raw, dtype=np.float64))
    rows, width = raw.shape
    obs = ~np.isnan(raw)
    idx = np.where(obs, np.arange(width)[None, :], -1)
    np.maximum.accumulate(idx, axis=1, out=idx)
    first = np.argmax(obs, axis=1)
    has_any = obs.any(axis=1)
    idx = np.where(idx < 0, first[:, None], idx)
    out = np.take_along_axis(raw, idx, axis=1)
    out[~has_any] = FALLBACK_SPO2
    return out


def extract_windows(trace: SpO2Trace, ts: Sequence[int] | np.ndarray, width: int = WINDOW) -> np.ndarray:
    """Raw imputed windows ending at each minute in ``ts`` (index -1 = now)."""
    ts = np.asarray(ts, dtype=np.int64).reshape(-1)
    if ts.size and ts.min() < 0:
        raise ValueError("prediction minute must be >= 0")
    v = trace.values
    hi = int(ts.max()) + 1 if ts.size else 0
    padded = np.full(width - 1 + max(hi, v.shape[0]), np.nan)
    padded[width - 1 : width - 1 + v.shape[0]] = v
    if not ts.size:
        return np.empty((0, width))
    views = sliding_window_view(padded, width)
    return impute_windows(views[ts])


def extract_window(trace: SpO2Trace, t: int, width: int = WINDOW) -> np.ndarray:
    return extract_windows(trace, [t], width)[0]


@dataclass(frozen=True, eq=False)
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self) -> None:
        mean = np.array(self.mean, dtype=np.float64).reshape(-1)
        std = np.array(self.std, dtype=np.float64).reshape(-1)
        if mean.shape != std.shape:
            raise ValueError("mean and std lengths differ")
        if not np.all(std > 0):
            raise ValueError("std must be strictly positive")
        mean.setflags(write=False)
        std.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @property
    def width(self) -> int:
        return int(self.mean.shape[0])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, NormalizationStats):
            return NotImplemented
        return np.array_equal(self.mean, other.mean) and np.array_equal(self.std, other.std)

    def dumps(self) -> str:
        lines = [
            "# spo2warn normalization stats v1",
            "# per-column mean and population std of training windows;",
            "# column 0 is 59 minutes ago, the last column is the prediction minute",
            f"width = {self.width}",
        ]
        lines += [f"mean.{i} = {float(m)!r}" for i, m in enumerate(self.mean)]
        lines += [f"std.{i} = {float(s)!r}" for i, s in enumerate(self.std)]
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "NormalizationStats":
        kv: dict[str, str] = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            kv[key] = value
        width = int(kv.pop("width"))
        mean = [float(kv.pop(f"mean.{i}")) for i in range(width)]
        std = [float(kv.pop(f"std.{i}")) for i in range(width)]
        if kv:
            raise ValueError(f"unknown keys: {sorted(kv)}")
        return cls(np.array(mean), np.array(std))

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.dumps())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "NormalizationStats":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.loads(fh.read())


def fit_normalization(windows: np.ndarray) -> NormalizationStats:
    windows = np.asarray(windows, dtype=np.float64)
    if windows.ndim != 2 or windows.shape[0] < 2:
        raise ValueError("need at least 2 training windows")
    mean = windows.mean(axis=0)
    std = windows.std(axis=0)
    std = np.where(std < 1e-9, 1.0, std)
    return NormalizationStats(mean, std)


def apply_normalization(window: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    window = np.asarray(window, dtype=np.float64)
    if window.shape[-1] != stats.width:
        raise ValueError(f"window length {window.shape[-1]} != {stats.width}")
    return (window - stats.mean) / stats.std


def invert_normalization(features: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if features.shape[-1] != stats.width:
        raise ValueError(f"feature length {features.shape[-1]} != {stats.width}")
    return features * stats.std + stats.mean


def split_cases(
    case_ids: Sequence[str],
    fractions: tuple[float, float, float] = (0.81, 0.09, 0.10),
    seed: int = 0,
) -> dict[str, str]:
    """Assign each case to train / validation / test.

    Test takes its share of the shuffled cases first, validation takes its
    share of the original total from the remainder, train gets the rest.
    """
    if len(fractions) != 3 or any(f < 0 for f in fractions) or not math.isclose(sum(fractions), 1.0):
        raise ValueError("fractions must be three non-negative values summing to 1")
    ids = list(case_ids)
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate case ids")
    n = len(ids)
    if n < 3:
        raise ValueError("need at least 3 cases to split")
    order = case_rng(seed, 2**32).permutation(n)
    n_test = max(1, int(round(fractions[2] * n)))
    n_val = max(1, int(round(fractions[1] * n)))
    n_test = min(n_test, n - 2)
    n_val = min(n_val, n - n_test - 1)
    tags = {}
    for rank, i in enumerate(order.tolist()):
        tags[ids[i]] = "test" if rank < n_test else "validation" if rank < n_test + n_val else "train"
    return tags


def balanced_batches(labels: np.ndarray, batch_size: int, seed: int) -> Iterator[np.ndarray]:
    """Endless stream of index batches, half positive and half negative.

    The majority class is walked through shuffled epochs without
    replacement; the minority class is sampled with replacement.
    """
    labels = np.asarray(labels).reshape(-1)
    if batch_size <= 0 or batch_size % 2:
        raise ValueError("batch_size must be a positive even number")
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    if pos.size == 0 or neg.size == 0:
        raise ValueError("balanced batches need at least one positive and one negative example")
    rng = case_rng(seed, 2**32 + 1)
    major, minor = (neg, pos) if neg.size >= pos.size else (pos, neg)
    half = batch_size // 2
    perm = rng.permutation(major)
    cursor = 0
    while True:
        take = np.empty(half, dtype=np.int64)
        filled = 0
        while filled < half:
            if cursor == perm.size:
                perm = rng.permutation(major)
                cursor = 0
            k = min(half - filled, perm.size - cursor)
            take[filled : filled + k] = perm[cursor : cursor + k]
            filled += k
            cursor += k
        drawn = minor[rng.integers(0, minor.size, size=half)]
        pos_part, neg_part = (drawn, take) if major is neg else (take, drawn)
        yield np.concatenate([pos_part, neg_part])


@dataclass
class Dataset:
    """Windowed examples for one split, in cache row order."""

    case_id: np.ndarray
    t: np.ndarray
    raw: np.ndarray
    label: np.ndarray

    def __len__(self) -> int:
        return int(self.label.shape[0])

    @property
    def prevalence(self) -> float:
        return float(self.label.mean()) if len(self) else float("nan")


@dataclass(frozen=True)
class CacheRow:
    case_id: str
    minute: int
    label: int
    included: bool
    split: str


CACHE_HEADER = ("case_id", "minute", "label", "included", "split")


def build_cache_rows(
    traces: Sequence[SpO2Trace],
    assignment: Mapping[str, str],
    cfg: LabelingConfig = LabelingConfig(),
    doctor_filter: bool = False,
) -> list[CacheRow]:
    rows: list[CacheRow] = []
    for trace in traces:
        pts = label_timepoints(trace, cfg)
        if doctor_filter:
            pts = apply_doctor_filter(pts, trace, cfg)
        split = assignment[trace.case_id]
        rows.extend(CacheRow(trace.case_id, t, y, inc, split) for t, y, inc in pts)
    return rows


def dumps_cache(rows: Sequence[CacheRow]) -> str:
    out = [",".join(CACHE_HEADER)]
    out += [f"{r.case_id},{r.minute},{r.label},{int(r.included)},{r.split}" for r in rows]
    return "\n".join(out) + "\n"


def loads_cache(text: str) -> list[CacheRow]:
    lines = text.splitlines()
    if not lines or tuple(lines[0].split(",")) != CACHE_HEADER:
        raise ValueError(f"line 1: expected header {','.join(CACHE_HEADER)!r}")
    rows = []
    for lineno, line in enumerate(lines[1:], 2):
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 5:
            raise ValueError(f"line {lineno}: expected 5 fields")
        cid, minute, label, inc, split = parts
        if label not in ("0", "1") or inc not in ("0", "1") or split not in SPLITS:
            raise ValueError(f"line {lineno}: bad label/included/split field")
        rows.append(CacheRow(cid, int(minute), int(label), inc == "1", split))
    return rows


def build_dataset(
    traces: Mapping[str, SpO2Trace], rows: Sequence[CacheRow], split: str, included_only: bool = True
) -> Dataset:
    """Materialize raw windows for the cache rows tagged ``split``."""
    chosen = [r for r in rows if r.split == split and (r.included or not included_only)]
    by_case: dict[str, list[int]] = {}
    for i, r in enumerate(chosen):
        by_case.setdefault(r.case_id, []).append(i)
    raw = np.empty((len(chosen), WINDOW))
    for cid, idx in by_case.items():
        ts = [chosen[i].minute for i in idx]
        raw[idx] = extract_windows(traces[cid], ts)
    return Dataset(
        case_id=np.array([r.case_id for r in chosen], dtype=object),
        t=np.array([r.minute for r in chosen], dtype=np.int64),
        raw=raw,
        label=np.array([r.label for r in chosen], dtype=np.int8),
    )
