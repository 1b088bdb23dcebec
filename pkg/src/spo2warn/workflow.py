"""End-to-end operations shared by the CLI and the HTTP service.

A *prepared directory* holds ``examples.csv`` (the labeled example cache with
split tags), ``normalization.txt`` (training-window stats) and
``manifest.txt`` (trace file, its sha256 and the labeling settings).
"""

from __future__ import annotations

import dataclasses
import hashlib
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .artifact import ModelArtifact, fingerprint, sample_background
from .eval import (
    BootstrapResult,
    DominanceResult,
    EvalReport,
    EvaluationError,
    bootstrap_compare,
    check_dominance,
    comparison_table,
    evaluate_scores,
    pr_csv,
    roc_csv,
)
from .explain import Attribution, explain, render_explanation
from .models.base import Predictor, log_loss
from .models.baseline import fit_ar1, train_base_rate, train_logistic
from .models.boosting import GBTConfig, train_gbt
from .models.neural import CNNConfig, CNNModel, LSTMConfig, LSTMModel, train_net
from .pipeline import (
    WINDOW,
    CacheRow,
    Dataset,
    LabelingConfig,
    NormalizationStats,
    apply_normalization,
    balanced_batches,
    build_cache_rows,
    build_dataset,
    dumps_cache,
    fit_normalization,
    impute_windows,
    loads_cache,
    split_cases,
)
from .traces import ConfigError, SpO2Trace, loads_traces, trace_index

EXAMPLES_FILE = "examples.csv"
NORMALIZATION_FILE = "normalization.txt"
MANIFEST_FILE = "manifest.txt"
SCALES = ("desk", "paper")
MODEL_CHOICES = ("base-rate", "ar1", "logistic", "gbt", "cnn", "lstm")

_LOGISTIC_DEFAULTS = {"learning_rate": 1.0, "epochs": 300, "l2": 1e-4}


class WorkflowError(RuntimeError):
    """A failure while running a pipeline step (as opposed to bad input)."""


# -- key-value text ---------------------------------------------------------------


def parse_key_values(text: str, source: str = "config") -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment, blank lines are skipped."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(source, f"line {lineno}: expected 'key = value'")
        key = key.strip()
        if key in out:
            raise ConfigError(source, f"line {lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def dump_key_values(items: Mapping[str, Any], title: str) -> str:
    return f"# {title}\n" + "".join(f"{k} = {v}\n" for k, v in items.items())


# -- prepare ----------------------------------------------------------------------


@dataclass
class Prepared:
    path: Path
    traces: dict[str, SpO2Trace]
    rows: list[CacheRow]
    stats: NormalizationStats
    labeling: LabelingConfig
    manifest: dict[str, str]

    def dataset(self, split: str) -> Dataset:
        return build_dataset(self.traces, self.rows, split)

    def features(self, ds: Dataset) -> np.ndarray:
        return apply_normalization(ds.raw, self.stats)

    def fingerprint(self) -> str:
        return self.manifest["data_fingerprint"]


@dataclass(frozen=True)
class PrepareSummary:
    n_cases: int
    n_points: int
    n_included: int
    n_positive: int
    split_counts: dict[str, tuple[int, int]]

    @property
    def prevalence(self) -> float:
        return self.n_positive / self.n_included if self.n_included else float("nan")


def prepare(
    traces_path: str | Path,
    out_dir: str | Path,
    labeling: LabelingConfig = LabelingConfig(),
    doctor_filter: bool = False,
    seed: int = 0,
) -> PrepareSummary:
    """Label every time point, split cases, fit normalization on training windows."""
    data = Path(traces_path).read_bytes()
    traces = loads_traces(data.decode("utf-8"))
    assignment = split_cases([t.case_id for t in traces], seed=seed)
    rows = build_cache_rows(traces, assignment, labeling, doctor_filter)
    train = build_dataset(trace_index(traces), rows, "train")
    if len(train) < 2:
        raise WorkflowError("training split has fewer than 2 included windows")
    stats = fit_normalization(train.raw)
    cache_text = dumps_cache(rows)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / EXAMPLES_FILE).write_bytes(cache_text.encode())
    (out / NORMALIZATION_FILE).write_bytes(stats.dumps().encode())
    manifest = {
        "traces": str(Path(traces_path).resolve()),
        "traces_sha256": hashlib.sha256(data).hexdigest(),
        "data_fingerprint": fingerprint(data, cache_text.encode()),
        "split_seed": seed,
        "doctor_filter": int(doctor_filter),
        **{f.name: getattr(labeling, f.name) for f in dataclasses.fields(labeling)},
    }
    (out / MANIFEST_FILE).write_bytes(dump_key_values(manifest, "spo2warn prepared data v1").encode())

    split_counts = {}
    for split in ("train", "validation", "test"):
        inc = [r for r in rows if r.split == split and r.included]
        split_counts[split] = (len(inc), sum(r.label for r in inc))
    included = [r for r in rows if r.included]
    return PrepareSummary(
        n_cases=len(traces),
        n_points=len(rows),
        n_included=len(included),
        n_positive=sum(r.label for r in included),
        split_counts=split_counts,
    )


def load_prepared(path: str | Path) -> Prepared:
    root = Path(path)
    for name in (EXAMPLES_FILE, NORMALIZATION_FILE, MANIFEST_FILE):
        if not (root / name).is_file():
            raise FileNotFoundError(f"prepared directory {root} is missing {name}")
    manifest = parse_key_values((root / MANIFEST_FILE).read_text(), MANIFEST_FILE)
    trace_path = Path(manifest["traces"])
    if not trace_path.is_absolute() and not trace_path.exists():
        trace_path = root / trace_path
    data = trace_path.read_bytes()
    if hashlib.sha256(data).hexdigest() != manifest["traces_sha256"]:
        raise WorkflowError(f"trace file {trace_path} changed since prepare")
    labeling = LabelingConfig(
        hypoxemia_threshold=float(manifest["hypoxemia_threshold"]),
        horizon_minutes=int(manifest["horizon_minutes"]),
        exclusion_threshold=float(manifest["exclusion_threshold"]),
        exclusion_lookback_minutes=int(manifest["exclusion_lookback_minutes"]),
        extended_horizon_minutes=int(manifest["extended_horizon_minutes"]),
    )
    return Prepared(
        path=root,
        traces=trace_index(loads_traces(data.decode("utf-8"))),
        rows=loads_cache((root / EXAMPLES_FILE).read_text()),
        stats=NormalizationStats.loads((root / NORMALIZATION_FILE).read_text()),
        labeling=labeling,
        manifest=manifest,
    )


# -- train ------------------------------------------------------------------------


def _coerce(value: Any, like: Any, key: str) -> Any:
    """Convert a config-file string to the type of the default ``like``."""
    if not isinstance(value, str):
        return value
    try:
        if isinstance(like, bool):
            if value.lower() not in ("true", "false", "1", "0"):
                raise ValueError(value)
            return value.lower() in ("true", "1")
        if isinstance(like, int):
            return int(value)
        if isinstance(like, float):
            return float(value)
        if isinstance(like, tuple):
            return tuple(int(v) for v in value.replace("[", "").replace("]", "").split(",") if v.strip())
    except ValueError:
        raise ConfigError(key, f"cannot parse {value!r}") from None
    return value


def model_config(kind: str, scale: str = "desk", overrides: Mapping[str, Any] | None = None, seed: int = 0):
    """Hyperparameter object for ``kind`` at the given scale; unknown keys are rejected."""
    if kind not in MODEL_CHOICES:
        raise ConfigError("model", f"unknown model kind {kind!r}; choose from {', '.join(MODEL_CHOICES)}")
    if scale not in SCALES:
        raise ConfigError("scale", f"must be one of {', '.join(SCALES)}")
    overrides = dict(overrides or {})
    classes = {"gbt": GBTConfig, "cnn": CNNConfig, "lstm": LSTMConfig}
    if kind in classes:
        cls = classes[kind]
        base = cls.paper() if scale == "paper" else cls()
        known = {f.name: getattr(base, f.name) for f in dataclasses.fields(cls)}
        unknown = sorted(set(overrides) - set(known))
        if unknown:
            raise ConfigError(unknown[0], f"unknown hyperparameter for {kind}")
        values = {k: _coerce(v, known[k], k) for k, v in overrides.items()}
        values.setdefault("seed", seed)
        try:
            return dataclasses.replace(base, **values)
        except ValueError as exc:
            raise ConfigError(kind, str(exc)) from None
    known = dict(_LOGISTIC_DEFAULTS) if kind == "logistic" else {}
    unknown = sorted(set(overrides) - set(known))
    if unknown:
        raise ConfigError(unknown[0], f"unknown hyperparameter for {kind}")
    known.update({k: _coerce(v, known[k], k) for k, v in overrides.items()})
    return known


@dataclass(frozen=True)
class TrainSummary:
    model: str
    final_loss: float
    validation_au_prc: float | None
    n_train: int
    losses: tuple[float, ...] = ()


def _val_au_prc(model: Predictor, prepared: Prepared) -> float | None:
    val = prepared.dataset("validation")
    if len(val) == 0 or val.label.min() == val.label.max():
        return None
    return evaluate_scores(model.kind, model.predict_risk(prepared.features(val)), val.label).au_prc


def train(
    prepared: Prepared,
    kind: str,
    scale: str = "desk",
    overrides: Mapping[str, Any] | None = None,
    seed: int = 0,
) -> tuple[ModelArtifact, TrainSummary]:
    cfg = model_config(kind, scale, overrides, seed)
    ds = prepared.dataset("train")
    X = prepared.features(ds)
    y = ds.label.astype(np.float64)
    if len(ds) == 0 or y.min() == y.max():
        raise EvaluationError("training split must contain both classes")

    losses: Sequence[float] = ()
    if kind == "base-rate":
        model: Predictor = train_base_rate(ds.label)
        final_loss = log_loss(model.logit(X), y)
    elif kind == "ar1":
        model = fit_ar1(
            ds.raw, ds.label, prepared.stats,
            prepared.labeling.horizon_minutes, prepared.labeling.hypoxemia_threshold,
        )
        final_loss = log_loss(model.logit(X), y)
    elif kind == "logistic":
        fit = train_logistic(X, y, **cfg)
        model, final_loss, losses = fit.model, fit.losses[-1], fit.losses
    elif kind == "gbt":
        gfit = train_gbt(X, y, cfg)
        model, final_loss, losses = gfit.model, gfit.losses[-1], gfit.losses
    else:
        cls = CNNModel if kind == "cnn" else LSTMModel
        nfit = train_net(cls, cfg, X, y, balanced_batches(ds.label, cfg.batch_size, cfg.seed))
        model, final_loss, losses = nfit.model, nfit.smoothed[-1], nfit.losses

    val = _val_au_prc(model, prepared)
    summary = TrainSummary(kind, float(final_loss), val, len(ds), tuple(float(v) for v in losses))
    artifact = ModelArtifact(
        model=model,
        stats=prepared.stats,
        seed=seed,
        data_fingerprint=prepared.fingerprint(),
        background=sample_background(X, seed),
        metadata={
            "scale": scale,
            "final_train_loss": summary.final_loss,
            "validation_au_prc": val,
        },
    )
    return artifact, summary


# -- evaluate / compare -------------------------------------------------------------


def score_split(artifact: ModelArtifact, prepared: Prepared, split: str = "test") -> tuple[np.ndarray, np.ndarray]:
    ds = prepared.dataset(split)
    if len(ds) == 0:
        raise EvaluationError(f"{split} split is empty")
    return artifact.model.predict_risk(apply_normalization(ds.raw, artifact.stats)), ds.label


def evaluate(
    prepared: Prepared,
    artifacts: Sequence[tuple[str, ModelArtifact]],
    out_dir: str | Path,
    split: str = "test",
) -> tuple[list[EvalReport], str]:
    """Score each artifact; write the table, per-model reports and curve CSVs."""
    names = [n for n, _ in artifacts]
    if len(set(names)) != len(names):
        raise ConfigError("artifacts", "model names must be unique")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    reports = []
    for name, art in artifacts:
        scores, labels = score_split(art, prepared, split)
        rep = evaluate_scores(name, scores, labels)
        reports.append(rep)
        (out / f"{name}.report.txt").write_bytes(rep.dumps().encode())
        (out / f"{name}.roc.csv").write_bytes(roc_csv(rep).encode())
        (out / f"{name}.pr.csv").write_bytes(pr_csv(rep).encode())
    table = comparison_table(reports)
    (out / "table.txt").write_bytes(table.encode())
    return reports, table


@dataclass(frozen=True)
class CompareResult:
    name_a: str
    name_b: str
    bootstrap: BootstrapResult
    dominance_ab: DominanceResult
    dominance_ba: DominanceResult

    def dumps(self) -> str:
        b = self.bootstrap
        lines = {
            "model_a": self.name_a,
            "model_b": self.name_b,
            "delta_au_roc": repr(b.delta_auc),
            "p_value": repr(b.p_value),
            "ci_low": repr(b.ci_low),
            "ci_high": repr(b.ci_high),
            "n_resamples": b.n_resamples,
            "n_degenerate": b.n_degenerate,
            "a_dominates_b": str(self.dominance_ab.dominant).lower(),
            "a_max_violation": repr(self.dominance_ab.max_violation),
            "b_dominates_a": str(self.dominance_ba.dominant).lower(),
            "b_max_violation": repr(self.dominance_ba.max_violation),
        }
        return dump_key_values(lines, "spo2warn comparison v1")


def compare(
    prepared: Prepared,
    a: tuple[str, ModelArtifact],
    b: tuple[str, ModelArtifact],
    n_resamples: int = 10_000,
    seed: int = 0,
    split: str = "test",
) -> CompareResult:
    sa, labels = score_split(a[1], prepared, split)
    sb, _ = score_split(b[1], prepared, split)
    boot = bootstrap_compare(sa, sb, labels, n_resamples=n_resamples, seed=seed)
    ra = evaluate_scores(a[0], sa, labels).roc
    rb = evaluate_scores(b[0], sb, labels).roc
    return CompareResult(a[0], b[0], boot, check_dominance(ra, rb), check_dominance(rb, ra))


# -- predict / explain --------------------------------------------------------------


def predict_trace(artifact: ModelArtifact, trace: SpO2Trace) -> np.ndarray:
    """Risk at every minute of ``trace`` from the window ending there."""
    from .pipeline import extract_windows

    ts = np.arange(trace.duration)
    return artifact.model.predict_risk(artifact.features(extract_windows(trace, ts)))


def read_window_file(path: str | Path) -> np.ndarray:
    """60 SpO2 values, comma- or newline-separated, oldest first; empty = missing."""
    text = Path(path).read_text()
    fields = [f.strip() for f in text.replace("\n", ",").split(",")]
    while fields and fields[-1] == "":
        fields.pop()
    if len(fields) != WINDOW:
        raise ConfigError("window", f"expected {WINDOW} values, found {len(fields)}")
    try:
        return np.array([float(f) if f else math.nan for f in fields])
    except ValueError as exc:
        raise ConfigError("window", str(exc)) from None


@dataclass(frozen=True)
class Explanation:
    attribution: Attribution
    raw_window: np.ndarray
    risk: float
    files: tuple[Path, Path]


def explain_window(
    artifact: ModelArtifact,
    raw_window: np.ndarray,
    out_dir: str | Path,
    case_id: str,
    minute: int,
    model_name: str,
    steps: int = 300,
) -> Explanation:
    features = artifact.features(raw_window.reshape(1, -1))
    attribution = explain(artifact.model, features[0], artifact.background, steps)
    risk = float(artifact.model.predict_risk(features)[0])
    shown = impute_windows(raw_window.reshape(1, -1))[0]
    files = render_explanation(attribution, shown, risk, out_dir, case_id, minute, model_name)
    return Explanation(attribution, shown, risk, files)


def window_for(traces: Mapping[str, SpO2Trace], case_id: str, minute: int) -> np.ndarray:
    if case_id not in traces:
        raise ConfigError("case", f"no case {case_id!r} in trace file")
    trace = traces[case_id]
    if not 0 <= minute < trace.duration:
        raise ConfigError("minute", f"case {case_id} has minutes 0..{trace.duration - 1}")
    raw = np.full(WINDOW, np.nan)
    lo = max(0, minute - WINDOW + 1)
    raw[WINDOW - (minute - lo + 1) :] = trace.values[lo : minute + 1]
    return raw


__all__ = [
    "CompareResult",
    "Explanation",
    "MODEL_CHOICES",
    "PrepareSummary",
    "Prepared",
    "TrainSummary",
    "WorkflowError",
    "compare",
    "evaluate",
    "explain_window",
    "load_prepared",
    "model_config",
    "parse_key_values",
    "predict_trace",
    "prepare",
    "read_window_file",
    "train",
    "window_for",
]
