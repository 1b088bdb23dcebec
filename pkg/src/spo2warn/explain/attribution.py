"""Per-minute attributions: interventional Tree SHAP, Integrated Gradients, brute-force Shapley."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from ..models.base import Predictor, sigmoid
from ..models.boosting import LEAF, GBTModel, RegressionTree
from ..models.neural import _NetModel

MAX_BRUTE_FORCE_FEATURES = 12


class UnsupportedAttributionError(TypeError):
    pass


@dataclass(frozen=True)
class Attribution:
    per_minute: np.ndarray
    base_value: float
    model_output: float
    space_tag: str = "log-odds"

    @property
    def residual(self) -> float:
        """``base_value + sum(per_minute) - model_output``; zero under local accuracy."""
        return float(self.base_value + self.per_minute.sum() - self.model_output)

    def to_probability(self) -> "Attribution":
        """Rescale into probability space, preserving the summation identity there."""
        if self.space_tag == "probability":
            return self
        p_out = float(sigmoid(np.array([self.model_output]))[0])
        p_base = float(sigmoid(np.array([self.base_value]))[0])
        total = self.per_minute.sum()
        scale = (p_out - p_base) / total if total != 0 else 0.0
        return Attribution(self.per_minute * scale, p_base, p_out, "probability")

    def top(self, k: int = 3) -> list[tuple[int, float]]:
        """The ``k`` minutes with largest absolute attribution, as (index, value)."""
        order = np.argsort(-np.abs(self.per_minute), kind="mergesort")[:k]
        return [(int(i), float(self.per_minute[i])) for i in order]


def _check_background(background: np.ndarray, width: int) -> np.ndarray:
    bg = np.atleast_2d(np.asarray(background, dtype=np.float64))
    if bg.shape[0] == 0:
        raise ValueError("background set is empty")
    if bg.shape[1] != width:
        raise ValueError(f"background windows must have length {width}")
    return bg


# -- Tree SHAP -------------------------------------------------------------------


def _shap_weights(max_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Shapley values of g(S) = [A subset of S and B disjoint from S] for |A| = a, |B| = b.

    Members of A receive (a-1)! b! / (a+b)!, members of B receive
    -a! (b-1)! / (a+b)!.
    """
    wa = np.zeros((max_len + 1, max_len + 1))
    wb = np.zeros((max_len + 1, max_len + 1))
    f = math.factorial
    for a in range(max_len + 1):
        for b in range(max_len + 1 - a):
            if a:
                wa[a, b] = f(a - 1) * f(b) / f(a + b)
            if b:
                wb[a, b] = f(a) * f(b - 1) / f(a + b)
    return wa, wb


def _tree_shap_pairs(tree: RegressionTree, X: np.ndarray, Z: np.ndarray, phi: np.ndarray) -> None:
    """Accumulate sum over background rows of the exact interventional Shapley values.

    Each (foreground, background) pair walks the tree once.  Where the two
    rows disagree at a split, the branch taken by the foreground row needs
    the feature present (set A), the background row's branch needs it absent
    (set B); a pair that would need a feature in both sets is dropped.
    """
    nx, nz = X.shape[0], Z.shape[0]
    px = np.repeat(np.arange(nx), nz)
    pz = np.tile(np.arange(nz), nx)
    max_len = max(tree.depth(), 1)
    wa, wb = _shap_weights(max_len)
    one = np.uint64(1)

    def walk(node, px, pz, ma, mb, path):
        if px.size == 0:
            return
        j = int(tree.feature[node])
        if j == LEAF:
            v = float(tree.value[node])
            a = np.bitwise_count(ma).astype(np.int64)
            b = np.bitwise_count(mb).astype(np.int64)
            ca = v * wa[a, b]
            cb = v * wb[a, b]
            for f in set(path):
                bit = np.uint64(f)
                ina = ((ma >> bit) & one).astype(np.float64)
                inb = ((mb >> bit) & one).astype(np.float64)
                phi[:, f] += np.bincount(px, weights=ca * ina - cb * inb, minlength=nx)
            return
        thr = tree.threshold[node]
        xl = X[px, j] < thr
        zl = Z[pz, j] < thr
        bit = one << np.uint64(j)
        has_a = (ma & bit) != 0
        has_b = (mb & bit) != 0
        for child, x_goes, z_goes in ((tree.left[node], xl, zl), (tree.right[node], ~xl, ~zl)):
            same = x_goes & z_goes
            need_in = x_goes & ~z_goes & ~has_b
            need_out = ~x_goes & z_goes & ~has_a
            keep = same | need_in | need_out
            new_a = np.where(need_in[keep], ma[keep] | bit, ma[keep])
            new_b = np.where(need_out[keep], mb[keep] | bit, mb[keep])
            walk(int(child), px[keep], pz[keep], new_a, new_b, path + (j,))

    zeros = np.zeros(px.size, dtype=np.uint64)
    walk(0, px, pz, zeros, zeros.copy(), ())


def tree_shap(
    model: GBTModel, features: np.ndarray, background: np.ndarray, chunk_pairs: int = 200_000
) -> list[Attribution]:
    """Exact interventional Shapley values of the margin for each row of ``features``.

    The value of a coalition S is the margin averaged over background rows
    with the features outside S taken from the background row.
    """
    X = np.atleast_2d(np.asarray(features, dtype=np.float64))
    d = X.shape[1]
    if d > 64:
        raise ValueError("tree_shap supports at most 64 features")
    Z = _check_background(background, d)
    base = float(model.margin(Z).mean())
    out_margin = model.margin(X)
    phi = np.zeros((X.shape[0], d))
    step = max(1, chunk_pairs // Z.shape[0])
    for start in range(0, X.shape[0], step):
        part = np.zeros((min(step, X.shape[0] - start), d))
        for tree in model.trees:
            _tree_shap_pairs(tree, X[start : start + step], Z, part)
        phi[start : start + step] = part / Z.shape[0]
    return [Attribution(phi[i], base, float(out_margin[i]), "log-odds") for i in range(X.shape[0])]


# -- brute force -------------------------------------------------------------------


def shapley_bruteforce(
    predict: Callable[[np.ndarray], np.ndarray],
    x: np.ndarray,
    background: np.ndarray,
    active: Sequence[int],
) -> Attribution:
    """Exact Shapley values over ``active`` features by enumerating every coalition.

    Absent active features take each background row's values in turn and
    the predictions are averaged; features outside ``active`` stay at ``x``.
    Inactive features get attribution 0.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    Z = _check_background(background, x.shape[0])
    active = list(dict.fromkeys(int(a) for a in active))
    k = len(active)
    if k > MAX_BRUTE_FORCE_FEATURES:
        raise ValueError(f"at most {MAX_BRUTE_FORCE_FEATURES} active features, got {k}")
    n_sub = 1 << k
    masks = ((np.arange(n_sub)[:, None] >> np.arange(k)[None, :]) & 1).astype(bool)
    rows = np.broadcast_to(x, (n_sub, Z.shape[0], x.size)).copy()
    for pos, f in enumerate(active):
        rows[~masks[:, pos], :, f] = Z[None, :, f]
    vals = np.asarray(predict(rows.reshape(-1, x.size)), dtype=np.float64).reshape(n_sub, Z.shape[0]).mean(axis=1)
    sizes = masks.sum(axis=1)
    fact = [math.factorial(i) for i in range(k + 1)]
    phi = np.zeros(x.size)
    for pos, f in enumerate(active):
        without = ~masks[:, pos]
        s = sizes[without]
        w = np.array([fact[si] * fact[k - si - 1] / fact[k] for si in s.tolist()])
        idx = np.flatnonzero(without)
        phi[f] = float(np.sum(w * (vals[idx | (1 << pos)] - vals[idx])))
    return Attribution(phi, float(vals[0]), float(vals[-1]), "log-odds")


# -- Integrated Gradients --------------------------------------------------------------


def integrated_gradients(
    model: _NetModel, features: np.ndarray, baseline: np.ndarray, steps: int = 300
) -> Attribution:
    """Midpoint-rule path integral of d(logit)/d(input) from ``baseline`` to ``features``.

    ``model`` only needs ``logit_and_input_grad(batch) -> (logits, grads)``;
    every point on the path is evaluated in one batch.  Endpoint logits come
    from ``model.logit`` when it exists, so they match served predictions
    bit for bit.
    """
    x = np.asarray(features, dtype=np.float64).reshape(-1)
    b = np.asarray(baseline, dtype=np.float64).reshape(-1)
    if x.shape != b.shape:
        raise ValueError("features and baseline lengths differ")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    alphas = (np.arange(1, steps + 1) - 0.5) / steps
    path = b[None, :] + alphas[:, None] * (x - b)[None, :]
    _, grads = model.logit_and_input_grad(path)
    if not np.all(np.isfinite(grads)):
        raise FloatingPointError("non-finite gradients along the integration path")
    # averaging offsets from the first gradient keeps a constant gradient exact
    avg = grads[0] + (grads - grads[0]).mean(axis=0)
    ends = model.logit(np.stack([b, x])) if hasattr(model, "logit") else model.logit_and_input_grad(np.stack([b, x]))[0]
    return Attribution((x - b) * avg, float(ends[0]), float(ends[1]), "log-odds")


def baseline_window(background: np.ndarray) -> np.ndarray:
    return _check_background(background, np.atleast_2d(background).shape[1]).mean(axis=0)


def explain(model: Predictor, features: np.ndarray, background: np.ndarray, steps: int = 300) -> Attribution:
    """Route to the attribution method that fits the model kind."""
    if isinstance(model, GBTModel):
        return tree_shap(model, features, background)[0]
    if isinstance(model, _NetModel):
        return integrated_gradients(model, features, baseline_window(background), steps)
    raise UnsupportedAttributionError(f"attribution is not supported for model kind {model.kind!r}")
