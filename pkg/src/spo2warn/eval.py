"""ROC and precision-recall curves, their areas, paired bootstrap, ROC dominance.

Identical scores always form a single threshold step.  ROC area uses the
trapezoid rule, which makes it equal to the tie-adjusted Mann-Whitney
statistic.  PR area is the step-wise sum ``sum_k (R_k - R_{k-1}) * P_k`` with
no interpolation of precision.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .traces import case_rng


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class ScoredSet:
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        s = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        y = np.asarray(self.labels).reshape(-1)
        if s.shape != y.shape:
            raise EvaluationError(f"{s.size} scores but {y.size} labels")
        if not np.all(np.isin(y, (0, 1))):
            raise EvaluationError("labels must be 0 or 1")
        if not np.all(np.isfinite(s)):
            raise EvaluationError("scores must be finite")
        object.__setattr__(self, "scores", s)
        object.__setattr__(self, "labels", y.astype(np.int8))

    @property
    def n_pos(self) -> int:
        return int(np.sum(self.labels == 1))

    @property
    def n_neg(self) -> int:
        return int(np.sum(self.labels == 0))


def _threshold_counts(s: ScoredSet) -> tuple[np.ndarray, np.ndarray]:
    """Cumulative (TP, FP) after admitting each distinct score, highest first."""
    order = np.argsort(-s.scores, kind="mergesort")
    sc = s.scores[order]
    y = s.labels[order]
    last_of_group = np.r_[np.flatnonzero(np.diff(sc) != 0), sc.size - 1]
    tp = np.cumsum(y == 1)[last_of_group]
    fp = np.cumsum(y == 0)[last_of_group]
    return tp, fp


@dataclass(frozen=True)
class Curve:
    x: np.ndarray
    y: np.ndarray
    area: float

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.x.tolist(), self.y.tolist()))


def roc_curve(s: ScoredSet) -> Curve:
    """ROC points from (0, 0) to (1, 1) and the trapezoid area."""
    if s.n_pos == 0 or s.n_neg == 0:
        raise EvaluationError("ROC needs both classes")
    tp, fp = _threshold_counts(s)
    tpr = np.r_[0.0, tp / s.n_pos]
    fpr = np.r_[0.0, fp / s.n_neg]
    # integrate on raw counts, then scale once: keeps the area an exact rational
    tpc = np.r_[0, tp].astype(np.float64)
    fpc = np.r_[0, fp].astype(np.float64)
    area = float(np.sum(np.diff(fpc) * (tpc[1:] + tpc[:-1])) / (2.0 * s.n_pos * s.n_neg))
    return Curve(fpr, tpr, area)


def pr_curve(s: ScoredSet) -> Curve:
    """(recall, precision) at each distinct threshold and the step-wise area."""
    if s.n_pos == 0:
        raise EvaluationError("precision-recall needs at least one positive")
    tp, fp = _threshold_counts(s)
    recall = tp / s.n_pos
    precision = tp / (tp + fp)
    area = float(np.sum(np.diff(np.r_[0, tp]) * precision) / s.n_pos)
    return Curve(recall, precision, area)


def _weighted_auc(order_scores: np.ndarray, order_labels: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Tie-adjusted AU-ROC for each row of example weights (examples pre-sorted ascending)."""
    breaks = np.r_[0, np.flatnonzero(np.diff(order_scores) != 0) + 1]
    wpos = np.add.reduceat(weights * (order_labels == 1), breaks, axis=1)
    wneg = np.add.reduceat(weights * (order_labels == 0), breaks, axis=1)
    neg_below = np.cumsum(wneg, axis=1) - wneg
    num = np.sum(wpos * (neg_below + 0.5 * wneg), axis=1)
    den = wpos.sum(axis=1) * wneg.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return num / den


@dataclass(frozen=True)
class BootstrapResult:
    delta_auc: float
    p_value: float
    ci_low: float
    ci_high: float
    n_resamples: int
    n_degenerate: int


def bootstrap_compare(
    scores_a: Sequence[float],
    scores_b: Sequence[float],
    labels: Sequence[int],
    n_resamples: int = 10_000,
    seed: int = 0,
    chunk: int = 500,
) -> BootstrapResult:
    """Paired bootstrap of the AU-ROC difference A - B.

    Example indices are resampled with replacement, keeping each example's
    label and both scores together.  Resample chunks draw from independent
    ``(seed, chunk)`` streams, so the result does not depend on the order in
    which chunks are evaluated.  The two-sided p-value counts resamples on
    the far side of zero from the observed difference, with +1 smoothing.
    Resamples that lose a class are dropped and counted in ``n_degenerate``.
    """
    a = np.asarray(scores_a, dtype=np.float64).reshape(-1)
    b = np.asarray(scores_b, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if not (a.shape == b.shape == y.shape):
        raise EvaluationError("scores_a, scores_b and labels must have equal lengths")
    if n_resamples < 1:
        raise EvaluationError("n_resamples must be >= 1")
    delta = roc_curve(ScoredSet(a, y)).area - roc_curve(ScoredSet(b, y)).area

    oa = np.argsort(a, kind="mergesort")
    ob = np.argsort(b, kind="mergesort")
    n = y.size
    diffs = []
    for c, start in enumerate(range(0, n_resamples, chunk)):
        size = min(chunk, n_resamples - start)
        rng = case_rng(seed, c)
        draws = rng.integers(0, n, size=(size, n))
        flat = (draws + (np.arange(size) * n)[:, None]).ravel()
        w = np.bincount(flat, minlength=size * n).reshape(size, n).astype(np.float64)
        da = _weighted_auc(a[oa], y[oa], w[:, oa])
        db = _weighted_auc(b[ob], y[ob], w[:, ob])
        diffs.append(da - db)
    d = np.concatenate(diffs)
    ok = np.isfinite(d)
    d = d[ok]
    if d.size == 0:
        raise EvaluationError("every resample lost a class")
    flips = np.sum(d <= 0) if delta >= 0 else np.sum(d >= 0)
    p = min(1.0, 2.0 * (flips + 1) / (d.size + 1))
    lo, hi = np.quantile(d, [0.025, 0.975])
    return BootstrapResult(float(delta), float(p), float(lo), float(hi), int(d.size), int((~ok).sum()))


@dataclass(frozen=True)
class DominanceResult:
    dominant: bool
    max_violation: float
    at_fpr: float


def _side_limits(fpr: np.ndarray, tpr: np.ndarray, xs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Left and right limits of a piecewise-linear ROC path at each x in ``xs``.

    Vertical runs (several points at one FPR) make the path multivalued there;
    the path arrives at the run's lowest TPR and leaves from its highest.
    """
    order = np.lexsort((tpr, fpr))
    fpr, tpr = fpr[order], tpr[order]
    uniq, first = np.unique(fpr, return_index=True)
    lo = np.minimum.reduceat(tpr, first)
    hi = np.maximum.reduceat(tpr, first)
    at = np.searchsorted(uniq, xs)
    exact = (at < uniq.size) & (uniq[np.minimum(at, uniq.size - 1)] == xs)
    # between breakpoints the path is the segment from hi[k] to lo[k+1]
    k = np.clip(np.searchsorted(uniq, xs, side="right") - 1, 0, uniq.size - 1)
    k1 = np.minimum(k + 1, uniq.size - 1)
    span = np.where(uniq[k1] > uniq[k], uniq[k1] - uniq[k], 1.0)
    t = (xs - uniq[k]) / span
    between = hi[k] + t * (lo[k1] - hi[k])
    left = np.where(exact, lo[np.minimum(at, uniq.size - 1)], between)
    right = np.where(exact, hi[np.minimum(at, uniq.size - 1)], between)
    return left, right


def check_dominance(roc_a: Curve | tuple, roc_b: Curve | tuple) -> DominanceResult:
    """Does curve A reach at least curve B's TPR at every FPR in [0, 1]?

    Both paths are linear between breakpoints, so comparing the one-sided
    limits at the union of breakpoints covers the whole interval.
    """
    fa, ta = (roc_a.x, roc_a.y) if isinstance(roc_a, Curve) else map(np.asarray, roc_a)
    fb, tb = (roc_b.x, roc_b.y) if isinstance(roc_b, Curve) else map(np.asarray, roc_b)
    xs = np.union1d(fa, fb)
    la, ra = _side_limits(np.asarray(fa, float), np.asarray(ta, float), xs)
    lb, rb = _side_limits(np.asarray(fb, float), np.asarray(tb, float), xs)
    gap = np.maximum(lb - la, rb - ra)
    k = int(np.argmax(gap))
    worst = float(max(gap[k], 0.0))
    return DominanceResult(worst == 0.0, worst, float(xs[k]) if worst > 0 else float("nan"))


@dataclass(frozen=True)
class EvalReport:
    model: str
    roc: Curve
    pr: Curve
    n_pos: int
    n_neg: int

    @property
    def au_roc(self) -> float:
        return self.roc.area

    @property
    def au_prc(self) -> float:
        return self.pr.area

    def dumps(self) -> str:
        """Key-value record; curve points live in the CSV exports."""
        lines = [
            "# spo2warn evaluation report v1",
            f"model = {self.model}",
            f"n_pos = {self.n_pos}",
            f"n_neg = {self.n_neg}",
            f"prevalence = {self.n_pos / (self.n_pos + self.n_neg)!r}",
            f"au_prc = {self.au_prc!r}",
            f"au_roc = {self.au_roc!r}",
            f"roc_points = {self.roc.x.size}",
            f"pr_points = {self.pr.x.size}",
        ]
        return "\n".join(lines) + "\n"


def evaluate_scores(model: str, scores: np.ndarray, labels: np.ndarray) -> EvalReport:
    s = ScoredSet(scores, labels)
    return EvalReport(model, roc_curve(s), pr_curve(s), s.n_pos, s.n_neg)


def curve_csv(curve: Curve, header: str) -> str:
    buf = io.StringIO()
    buf.write(header + "\n")
    for x, y in zip(curve.x.tolist(), curve.y.tolist()):
        buf.write(f"{x!r},{y!r}\n")
    return buf.getvalue()


def roc_csv(report: EvalReport) -> str:
    return curve_csv(report.roc, "fpr,tpr")


def pr_csv(report: EvalReport) -> str:
    return curve_csv(report.pr, "recall,precision")


def comparison_table(reports: Sequence[EvalReport]) -> str:
    """Model / AU-PRC / AU-ROC table sorted ascending by AU-PRC, plus a ranking check."""
    rows = sorted(reports, key=lambda r: (r.au_prc, r.model))
    width = max([len("Model")] + [len(r.model) for r in rows])
    out = [f"{'Model':<{width}}  {'AU-PRC':>8}  {'AU-ROC':>8}"]
    out += [f"{r.model:<{width}}  {r.au_prc:8.5f}  {r.au_roc:8.5f}" for r in rows]
    by_prc = [r.model for r in sorted(reports, key=lambda r: (-r.au_prc, r.model))]
    by_roc = [r.model for r in sorted(reports, key=lambda r: (-r.au_roc, r.model))]
    if by_prc == by_roc:
        out.append("ranking: AU-PRC and AU-ROC agree (" + " > ".join(by_prc) + ")")
    else:
        out.append("ranking: AU-PRC and AU-ROC DISAGREE")
        out.append("  by AU-PRC: " + " > ".join(by_prc))
        out.append("  by AU-ROC: " + " > ".join(by_roc))
    return "\n".join(out) + "\n"


def rankings_agree(reports: Sequence[EvalReport]) -> bool:
    by_prc = [r.model for r in sorted(reports, key=lambda r: (-r.au_prc, r.model))]
    by_roc = [r.model for r in sorted(reports, key=lambda r: (-r.au_roc, r.model))]
    return by_prc == by_roc


def ks_uniform_distance(samples: np.ndarray) -> float:
    """Kolmogorov-Smirnov distance between an empirical sample and U(0, 1)."""
    x = np.sort(np.asarray(samples, dtype=np.float64))
    n = x.size
    i = np.arange(1, n + 1)
    return float(max(np.max(i / n - x), np.max(x - (i - 1) / n)))
