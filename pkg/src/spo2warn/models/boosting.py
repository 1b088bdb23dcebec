"""Gradient boosted regression trees for logistic loss.

Second-order (Newton) leaf weights, exact greedy split search.  Every
distinct feature value is its own histogram bin, so per-node gradient sums
come from ``np.bincount`` while the set of candidate thresholds stays exactly
the set of midpoints between consecutive distinct values present in the node.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Any, ClassVar

import numpy as np

from .base import Predictor, log_loss, sigmoid

logger = logging.getLogger(__name__)

LEAF = -1


@dataclass(frozen=True)
class GBTConfig:
    eta: float = 0.1
    n_trees: int = 200
    max_depth: int = 4
    min_child_weight: float = 1.0
    reg_lambda: float = 1.0
    gamma: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0 < self.eta <= 1:
            raise ValueError("eta must lie in (0, 1]")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if self.n_trees < 0:
            raise ValueError("n_trees must be >= 0")
        if self.min_child_weight < 0 or self.reg_lambda < 0 or self.gamma < 0:
            raise ValueError("min_child_weight, reg_lambda and gamma must be >= 0")

    @classmethod
    def paper(cls, **overrides: Any) -> "GBTConfig":
        return cls(**{"eta": 0.01, "n_trees": 4400, "max_depth": 6, **overrides})


@dataclass
class RegressionTree:
    """Flat binary tree.  Internal nodes send ``x[feature] < threshold`` left."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    cover: np.ndarray

    @property
    def n_nodes(self) -> int:
        return int(self.feature.shape[0])

    def depth(self, node: int = 0) -> int:
        if self.feature[node] == LEAF:
            return 0
        return 1 + max(self.depth(int(self.left[node])), self.depth(int(self.right[node])))

    def predict(self, x: np.ndarray) -> np.ndarray:
        node = np.zeros(x.shape[0], dtype=np.int64)
        rows = np.arange(x.shape[0])
        while True:
            feat = self.feature[node]
            inner = feat != LEAF
            if not inner.any():
                return self.value[node]
            r = rows[inner]
            n = node[inner]
            go_left = x[r, feat[inner]] < self.threshold[n]
            node[inner] = np.where(go_left, self.left[n], self.right[n])

    @classmethod
    def leaf(cls, value: float, cover: float) -> "RegressionTree":
        return cls(
            np.array([LEAF]), np.array([0.0]), np.array([LEAF]), np.array([LEAF]),
            np.array([float(value)]), np.array([float(cover)]),
        )


class GBTModel(Predictor):
    kind: ClassVar[str] = "gbt"

    def __init__(self, base_score: float, trees: list[RegressionTree], config: GBTConfig) -> None:
        self.base_score = float(base_score)
        self.trees = list(trees)
        self.config = config

    def margin(self, features: np.ndarray) -> np.ndarray:
        return self.logit(features)

    def _logit_block(self, x: np.ndarray) -> np.ndarray:
        out = np.full(x.shape[0], self.base_score)
        for tree in self.trees:
            out += tree.predict(x)
        return out

    def hyperparameters(self) -> dict[str, Any]:
        return asdict(self.config)

    def to_payload(self) -> dict[str, np.ndarray]:
        sizes = np.array([t.n_nodes for t in self.trees], dtype=np.int64)
        cat = lambda name, dt: (
            np.concatenate([getattr(t, name) for t in self.trees]).astype(dt)
            if self.trees else np.zeros(0, dtype=dt)
        )
        return {
            "base_score": np.array([self.base_score]),
            "tree_sizes": sizes,
            "feature": cat("feature", np.int64),
            "threshold": cat("threshold", np.float64),
            "left": cat("left", np.int64),
            "right": cat("right", np.int64),
            "value": cat("value", np.float64),
            "cover": cat("cover", np.float64),
        }

    @classmethod
    def from_payload(cls, hyper: dict[str, Any], arrays: dict[str, np.ndarray]) -> "GBTModel":
        trees = []
        start = 0
        for size in arrays["tree_sizes"].tolist():
            sl = slice(start, start + size)
            trees.append(RegressionTree(*(np.array(arrays[k][sl]) for k in
                                          ("feature", "threshold", "left", "right", "value", "cover"))))
            start += size
        if start != arrays["feature"].shape[0]:
            raise ValueError("tree sizes do not match node arrays")
        return cls(float(arrays["base_score"][0]), trees, GBTConfig(**hyper))


def gbt_margin(model: GBTModel, features: np.ndarray) -> np.ndarray:
    return model.margin(features)


@dataclass
class _Binned:
    codes: np.ndarray          # (n, d) global bin id = offset[f] + rank within feature f
    offsets: np.ndarray        # (d + 1,)
    values: list[np.ndarray]   # distinct sorted values per feature

    @classmethod
    def build(cls, X: np.ndarray) -> "_Binned":
        n, d = X.shape
        codes = np.empty((n, d), dtype=np.int64)
        values = []
        offsets = np.zeros(d + 1, dtype=np.int64)
        for f in range(d):
            uniq, inv = np.unique(X[:, f], return_inverse=True)
            values.append(uniq)
            codes[:, f] = inv.reshape(-1) + offsets[f]
            offsets[f + 1] = offsets[f] + uniq.shape[0]
        return cls(codes, offsets, values)


@dataclass
class SplitChoice:
    gain: float
    feature: int
    threshold: float
    left_mask: np.ndarray = field(repr=False)


def _best_split(
    binned: _Binned, idx: np.ndarray, g: np.ndarray, h: np.ndarray, cfg: GBTConfig
) -> SplitChoice | None:
    """Highest-gain split of node ``idx``; ties go to lowest feature, then lowest threshold."""
    nbins = int(binned.offsets[-1])
    d = binned.codes.shape[1]
    codes = binned.codes[idx]
    flat = codes.ravel()
    G = np.bincount(flat, weights=np.repeat(g[idx], d), minlength=nbins)
    H = np.bincount(flat, weights=np.repeat(h[idx], d), minlength=nbins)
    C = np.bincount(flat, minlength=nbins)
    G_tot, H_tot = float(g[idx].sum()), float(h[idx].sum())
    lam = cfg.reg_lambda
    parent = G_tot**2 / (H_tot + lam)

    best: tuple[float, int, int] | None = None
    for f in range(d):
        lo, hi = binned.offsets[f], binned.offsets[f + 1]
        cnt = C[lo:hi]
        present = np.flatnonzero(cnt)
        if present.size < 2:
            continue
        GL = np.cumsum(G[lo:hi])[present[:-1]]
        HL = np.cumsum(H[lo:hi])[present[:-1]]
        GR = G_tot - GL
        HR = H_tot - HL
        gain = 0.5 * (GL**2 / (HL + lam) + GR**2 / (HR + lam) - parent) - cfg.gamma
        ok = (HL >= cfg.min_child_weight) & (HR >= cfg.min_child_weight)
        if not ok.any():
            continue
        gain = np.where(ok, gain, -np.inf)
        k = int(np.argmax(gain))
        if best is None or gain[k] > best[0]:
            vals = binned.values[f]
            best = (float(gain[k]), f, k)
            best_thr = 0.5 * (vals[present[k]] + vals[present[k + 1]])
            best_cut = lo + present[k]
    if best is None or not best[0] > 0:
        return None
    f = best[1]
    return SplitChoice(best[0], f, float(best_thr), codes[:, f] <= best_cut)


def grow_tree(
    binned: _Binned, g: np.ndarray, h: np.ndarray, cfg: GBTConfig, rows: np.ndarray | None = None
) -> RegressionTree:
    """Depth-first growth; leaf weights already carry the learning rate."""
    feature: list[int] = []
    threshold: list[float] = []
    left: list[int] = []
    right: list[int] = []
    value: list[float] = []
    cover: list[float] = []

    def new_node() -> int:
        for lst, v in ((feature, LEAF), (threshold, 0.0), (left, LEAF), (right, LEAF), (value, 0.0), (cover, 0.0)):
            lst.append(v)
        return len(feature) - 1

    def build(idx: np.ndarray, depth: int) -> int:
        node = new_node()
        G, H = float(g[idx].sum()), float(h[idx].sum())
        cover[node] = H
        split = _best_split(binned, idx, g, h, cfg) if depth < cfg.max_depth else None
        if split is None:
            value[node] = -cfg.eta * G / (H + cfg.reg_lambda)
            return node
        feature[node] = split.feature
        threshold[node] = split.threshold
        left[node] = build(idx[split.left_mask], depth + 1)
        right[node] = build(idx[~split.left_mask], depth + 1)
        # children's covers are exact partial sums; restate the parent as their sum
        cover[node] = cover[left[node]] + cover[right[node]]
        return node

    build(np.arange(g.shape[0]) if rows is None else rows, 0)
    return RegressionTree(
        np.array(feature, dtype=np.int64), np.array(threshold), np.array(left, dtype=np.int64),
        np.array(right, dtype=np.int64), np.array(value), np.array(cover),
    )


@dataclass
class GBTFit:
    model: GBTModel
    losses: list[float]


def train_gbt(X: np.ndarray, y: np.ndarray, config: GBTConfig = GBTConfig()) -> GBTFit:
    """Boost ``config.n_trees`` rounds on the full data; returns per-round log-loss.

    ``losses[0]`` is the loss of the constant base-rate model.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValueError("X must be (n, d) with one label per row")
    if not np.all(np.isfinite(X)):
        raise ValueError("features must be finite")
    rate = float(y.mean()) if y.size else 0.0
    if not 0 < rate < 1:
        raise ValueError("training data must contain both classes")
    base = float(np.log(rate) - np.log1p(-rate))
    binned = _Binned.build(X)
    margin = np.full(y.shape[0], base)
    losses = [log_loss(margin, y)]
    trees = []
    for r in range(config.n_trees):
        p = sigmoid(margin)
        g = p - y
        h = p * (1.0 - p)
        tree = grow_tree(binned, g, h, config)
        trees.append(tree)
        margin = margin + tree.predict(X)
        losses.append(log_loss(margin, y))
        if (r + 1) % 50 == 0:
            logger.debug("round %d loss %.6f", r + 1, losses[-1])
    return GBTFit(GBTModel(base, trees, config), losses)


def gbt_serialize(model: GBTModel) -> bytes:
    from ..container import encode

    return encode({"model_kind": GBTModel.kind, "hyperparameters": model.hyperparameters()}, model.to_payload())


def gbt_deserialize(data: bytes) -> GBTModel:
    from ..container import decode

    header, arrays = decode(data)
    if header.get("model_kind") != GBTModel.kind:
        raise ValueError(f"not a gbt artifact: {header.get('model_kind')!r}")
    return GBTModel.from_payload(header["hyperparameters"], arrays)
