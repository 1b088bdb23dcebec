from __future__ import annotations

import math
from itertools import islice

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import brute_force_doctor_keep, brute_force_labels, two_pass_stats
from spo2warn.pipeline import (
    CacheRow,
    LabelingConfig,
    NormalizationStats,
    apply_doctor_filter,
    apply_normalization,
    balanced_batches,
    build_cache_rows,
    build_dataset,
    dumps_cache,
    extract_window,
    extract_windows,
    fit_normalization,
    impute_windows,
    invert_normalization,
    label_timepoints,
    loads_cache,
    split_cases,
)
from spo2warn.traces import ConfigError, SpO2Trace, SynthConfig, generate_synthetic_cases


def _trace(values, cid="c"):
    return SpO2Trace(cid, np.asarray(values, dtype=np.float64))


def _point(points, t):
    return next(p for p in points if p[0] == t)


# labeling


def test_drop_to_91_within_horizon_is_positive():
    v = np.full(40, 98.0)
    v[20 + 3] = 91.0
    pts = label_timepoints(_trace(v))
    assert _point(pts, 20) == (20, 1, True)


def test_constant_trace_all_negative_and_included():
    pts = label_timepoints(_trace(np.full(30, 98.0)))
    assert len(pts) == 25
    assert all(y == 0 and inc for _, y, inc in pts)


def test_recent_dip_below_95_excludes():
    v = np.full(40, 98.0)
    v[20 - 4] = 94.0
    assert _point(label_timepoints(_trace(v)), 20) == (20, 0, False)


def test_thresholds_are_inclusive_for_label_and_strict_for_exclusion():
    v = np.full(40, 98.0)
    v[23] = 92.0
    v[10] = 95.0
    pts = label_timepoints(_trace(v))
    assert _point(pts, 20)[1] == 1
    assert _point(pts, 12)[2] is True


def test_missing_future_values_do_not_label():
    v = np.full(30, 98.0)
    v[12:17] = np.nan
    assert _point(label_timepoints(_trace(v)), 11)[1] == 0


def test_short_history_uses_available_minutes():
    v = np.full(20, 98.0)
    v[0] = 94.0
    pts = label_timepoints(_trace(v))
    assert _point(pts, 3)[2] is False
    assert _point(pts, 10)[2] is False
    assert _point(pts, 11)[2] is True


def test_trace_shorter_than_horizon_has_no_points():
    assert len(label_timepoints(_trace([98, 97, 96]))) == 0


def test_labels_match_brute_force_on_synthetic_traces():
    for trace in generate_synthetic_cases(SynthConfig(n_cases=60, seed=21, missing_rate=0.05)):
        assert list(label_timepoints(trace)) == brute_force_labels(trace.values)


_spo2 = st.one_of(st.just(math.nan), st.floats(85, 100))


@given(st.lists(_spo2, min_size=0, max_size=50))
def test_labels_match_brute_force_property(values):
    trace = _trace(values)
    assert list(label_timepoints(trace)) == brute_force_labels(trace.values)


@pytest.mark.parametrize(
    "kwargs, field",
    [
        ({"hypoxemia_threshold": 96.0}, "exclusion_threshold"),
        ({"extended_horizon_minutes": 5}, "extended_horizon_minutes"),
        ({"horizon_minutes": 0}, "horizon_minutes"),
        ({"exclusion_lookback_minutes": -2}, "exclusion_lookback_minutes"),
    ],
)
def test_labeling_config_validation(kwargs, field):
    with pytest.raises(ConfigError) as info:
        LabelingConfig(**kwargs)
    assert info.value.field == field


# doctor filter


def test_doctor_filter_removes_late_hypoxemia_negative():
    v = np.full(40, 98.0)
    v[20 + 8] = 90.0
    trace = _trace(v)
    pts = label_timepoints(trace)
    assert _point(pts, 20)[1] == 0
    kept = {t for t, _, _ in apply_doctor_filter(pts, trace)}
    assert 20 not in kept
    assert 23 in kept  # minute 28 is inside its horizon, so it is a positive


def test_doctor_filter_keeps_positives():
    trace = _trace(np.r_[np.full(30, 98.0), np.full(10, 88.0)])
    pts = label_timepoints(trace)
    kept = apply_doctor_filter(pts, trace)
    assert set(zip(kept.t.tolist(), kept.label.tolist())) >= {(t, 1) for t, y, _ in pts if y == 1}


def test_doctor_filter_is_identity_without_hypoxemia():
    trace = _trace(np.linspace(93, 99, 50))
    pts = label_timepoints(trace)
    assert list(apply_doctor_filter(pts, trace)) == list(pts)


@given(st.lists(_spo2, min_size=6, max_size=50))
def test_doctor_filter_matches_oracle(values):
    trace = _trace(values)
    pts = label_timepoints(trace)
    kept = list(apply_doctor_filter(pts, trace))
    expected = [p for p in pts if brute_force_doctor_keep(trace.values, p[0], p[1])]
    assert kept == expected


# windows


def test_fully_observed_window_is_raw():
    v = np.linspace(90, 99, 80)
    assert np.array_equal(extract_window(_trace(v), 70), v[11:71])


def test_carry_forward_at_window_end():
    v = np.r_[np.full(57, 98.0), [98.0, np.nan, 96.0]]
    w = extract_window(_trace(v), 59)
    assert w[-3:].tolist() == [98.0, 98.0, 96.0]


def test_prehistory_filled_with_earliest_observation():
    v = np.r_[[np.nan, 96.0], np.full(20, 98.0)]
    w = extract_window(_trace(v), 10)
    assert w.shape == (60,)
    assert np.all(w[:51] == 96.0)
    assert np.all(w[51:] == 98.0)


def test_fully_missing_window_uses_fallback():
    assert np.all(extract_window(_trace([math.nan] * 5), 3) == 97.0)


def test_negative_minute_rejected():
    with pytest.raises(ValueError):
        extract_window(_trace([98.0]), -1)


def _impute_oracle(row):
    out = []
    last = None
    first = next((x for x in row if not math.isnan(x)), None)
    for x in row:
        if not math.isnan(x):
            last = x
        out.append(last if last is not None else first if first is not None else 97.0)
    return out


@given(st.lists(st.lists(_spo2, min_size=8, max_size=8), min_size=1, max_size=5))
def test_imputation_matches_oracle_and_has_no_gaps(rows):
    raw = np.array(rows, dtype=np.float64)
    out = impute_windows(raw)
    assert not np.isnan(out).any()
    assert out.tolist() == [_impute_oracle(r) for r in raw.tolist()]


@given(st.lists(_spo2, min_size=1, max_size=90), st.data())
def test_windows_are_causal(values, data):
    trace = _trace(values)
    t = data.draw(st.integers(0, len(values) - 1))
    tail = np.r_[trace.values[: t + 1], np.full(30, 99.0)]
    assert np.array_equal(extract_window(trace, t), extract_window(_trace(tail), t))


def test_batch_extraction_matches_single():
    trace = generate_synthetic_cases(SynthConfig(n_cases=1, seed=3, missing_rate=0.2))[0]
    ts = [0, 5, 59, 60, trace.duration - 1]
    batch = extract_windows(trace, ts)
    for row, t in zip(batch, ts):
        assert np.array_equal(row, extract_window(trace, t))


# normalization


def test_identical_windows_guard_std_to_one():
    w = np.tile(np.linspace(95, 99, 60), (5, 1))
    stats = fit_normalization(w)
    assert np.array_equal(stats.mean, w[0])
    assert np.all(stats.std == 1.0)
    assert np.all(apply_normalization(w, stats) == 0.0)


def test_normalized_training_columns_are_standard(rng):
    w = 96 + 2 * rng.standard_normal((500, 60))
    stats = fit_normalization(w)
    z = apply_normalization(w, stats)
    assert np.abs(z.mean(axis=0)).max() < 1e-9
    assert np.abs(z.var(axis=0) - 1).max() < 1e-6


def test_stats_match_two_pass_oracle(rng):
    w = 97 + rng.standard_normal((300, 60)) * rng.uniform(0.1, 3, 60)
    stats = fit_normalization(w)
    mean, std = two_pass_stats(w)
    np.testing.assert_allclose(stats.mean, mean, rtol=1e-12)
    np.testing.assert_allclose(stats.std, std, rtol=1e-12)


def test_fit_needs_two_windows():
    with pytest.raises(ValueError):
        fit_normalization(np.empty((0, 60)))
    with pytest.raises(ValueError):
        fit_normalization(np.ones((1, 60)))


def test_mean_window_maps_to_zero_and_unit_stats_are_identity(rng):
    stats = fit_normalization(rng.normal(96, 1, (10, 60)))
    assert np.all(apply_normalization(stats.mean, stats) == 0.0)
    unit = NormalizationStats(np.zeros(60), np.ones(60))
    x = rng.normal(96, 1, 60)
    assert np.array_equal(apply_normalization(x, unit), x)


def test_length_mismatch_rejected():
    stats = NormalizationStats(np.zeros(60), np.ones(60))
    with pytest.raises(ValueError):
        apply_normalization(np.zeros(59), stats)


@given(st.lists(st.floats(50, 100), min_size=60, max_size=60))
def test_normalization_round_trip(window):
    rng = np.random.default_rng(len(window))
    stats = NormalizationStats(rng.normal(96, 2, 60), rng.uniform(0.5, 3, 60))
    x = np.array(window)
    back = invert_normalization(apply_normalization(x, stats), stats)
    np.testing.assert_allclose(back, x, rtol=1e-12)


def test_stats_text_round_trip_is_exact(rng, tmp_path):
    stats = fit_normalization(rng.normal(96, 2, (50, 60)))
    stats.save(tmp_path / "n.txt")
    assert NormalizationStats.load(tmp_path / "n.txt") == stats
    text = stats.dumps()
    assert "width = 60" in text and "mean.59 = " in text and "std.0 = " in text


def test_fit_uses_only_the_windows_it_is_given(rng):
    train = rng.normal(97, 1, (100, 60))
    test = rng.normal(93, 2, (40, 60))
    assert fit_normalization(train) != fit_normalization(np.vstack([train, test]))


# splits


def test_split_is_deterministic_partition():
    ids = [f"c{i}" for i in range(10)]
    a = split_cases(ids, seed=4)
    assert a == split_cases(ids, seed=4)
    assert set(a) == set(ids)
    assert set(a.values()) == {"train", "validation", "test"}


def test_split_fractions_at_scale():
    ids = [f"c{i}" for i in range(10_000)]
    tags = list(split_cases(ids, seed=1).values())
    assert 0.08 <= tags.count("test") / len(ids) <= 0.12
    assert abs(tags.count("validation") / len(ids) - 0.09) <= 0.02
    assert abs(tags.count("train") / len(ids) - 0.81) <= 0.02


@given(st.integers(100, 600), st.integers(0, 2**31))
def test_split_fractions_within_two_points(n, seed):
    tags = list(split_cases([str(i) for i in range(n)], seed=seed).values())
    for name, target in (("train", 0.81), ("validation", 0.09), ("test", 0.10)):
        assert abs(tags.count(name) / n - target) <= 0.02


def test_split_errors():
    with pytest.raises(ValueError):
        split_cases(["a", "b"])
    with pytest.raises(ValueError):
        split_cases(["a", "b", "c"], fractions=(0.5, 0.5, 0.5))
    with pytest.raises(ValueError):
        split_cases(["a", "a", "b"])


def test_points_never_cross_splits():
    traces = generate_synthetic_cases(SynthConfig(n_cases=30, seed=6))
    assignment = split_cases([t.case_id for t in traces], seed=6)
    rows = build_cache_rows(traces, assignment)
    seen: dict[str, set[str]] = {}
    for r in rows:
        seen.setdefault(r.case_id, set()).add(r.split)
    assert all(len(s) == 1 for s in seen.values())


# balanced batches


def test_batches_are_exactly_half_positive():
    labels = np.array([1] * 7 + [0] * 300)
    for batch in islice(balanced_batches(labels, 32, seed=0), 50):
        assert batch.size == 32
        assert (labels[batch] == 1).sum() == 16


def test_batches_require_both_classes_and_even_size():
    with pytest.raises(ValueError):
        next(balanced_batches(np.zeros(10), 4, 0))
    with pytest.raises(ValueError):
        next(balanced_batches(np.array([0, 1, 0]), 3, 0))


def test_majority_epoch_covers_every_negative():
    labels = np.array([1] * 5 + [0] * 160)
    negatives = set(np.flatnonzero(labels == 0).tolist())
    seen: set[int] = set()
    for batch in islice(balanced_batches(labels, 32, seed=3), 10):
        seen |= {i for i in batch.tolist() if labels[i] == 0}
    assert seen == negatives


def test_batches_are_deterministic():
    labels = np.array([1] * 9 + [0] * 90)
    a = list(islice(balanced_batches(labels, 8, seed=5), 20))
    b = list(islice(balanced_batches(labels, 8, seed=5), 20))
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


# cache


def test_cache_round_trip_and_dataset():
    traces = generate_synthetic_cases(SynthConfig(n_cases=12, seed=13))
    assignment = split_cases([t.case_id for t in traces], seed=13)
    rows = build_cache_rows(traces, assignment, doctor_filter=True)
    text = dumps_cache(rows)
    assert text.splitlines()[0] == "case_id,minute,label,included,split"
    assert loads_cache(text) == rows
    by_id = {t.case_id: t for t in traces}
    ds = build_dataset(by_id, rows, "train")
    assert ds.raw.shape == (len(ds), 60)
    assert not np.isnan(ds.raw).any()
    chosen = [r for r in rows if r.split == "train" and r.included]
    assert ds.t.tolist() == [r.minute for r in chosen]
    i = len(ds) // 2
    assert np.array_equal(ds.raw[i], extract_window(by_id[ds.case_id[i]], int(ds.t[i])))


def test_cache_rejects_bad_rows():
    with pytest.raises(ValueError, match="line 2"):
        loads_cache("case_id,minute,label,included,split\na,0,2,1,train\n")
    with pytest.raises(ValueError, match="line 1"):
        loads_cache("x\n")
    assert loads_cache(dumps_cache([CacheRow("a", 0, 1, False, "test")])) == [CacheRow("a", 0, 1, False, "test")]
