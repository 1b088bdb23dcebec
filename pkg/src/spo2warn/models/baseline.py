"""Base rate, AR(1) forecaster and logistic regression."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, ClassVar

import numpy as np
from scipy.special import log_ndtr, ndtr

from ..pipeline import NormalizationStats, invert_normalization
from .base import Predictor, log_loss, sigmoid


class BaseRateModel(Predictor):
    kind: ClassVar[str] = "base-rate"

    def __init__(self, rate: float) -> None:
        self.rate = float(rate)

    def _risk_block(self, x: np.ndarray) -> np.ndarray:
        return np.full(x.shape[0], self.rate)

    def _logit_block(self, x: np.ndarray) -> np.ndarray:
        with np.errstate(divide="ignore"):
            z = np.log(self.rate) - np.log1p(-self.rate)
        return np.full(x.shape[0], z)

    def to_payload(self) -> dict[str, np.ndarray]:
        return {"rate": np.array([self.rate])}

    @classmethod
    def from_payload(cls, hyper: dict[str, Any], arrays: dict[str, np.ndarray]) -> "BaseRateModel":
        return cls(float(arrays["rate"][0]))


def train_base_rate(labels: np.ndarray) -> BaseRateModel:
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("cannot fit a base rate on empty data")
    return BaseRateModel(float(np.mean(labels == 1)))


# -- AR(1) -------------------------------------------------------------------


class AR1Model(Predictor):
    """Risk that an h-step AR(1) forecast from the last minute falls to the threshold.

    Works on raw SpO2, so normalized inputs are mapped back with the stored
    stats before forecasting.  A two-parameter logistic link on the probit
    score calibrates the output against training labels; without one the
    risk is the forecast probability itself.
    """

    kind: ClassVar[str] = "ar1"

    def __init__(
        self,
        phi: float,
        intercept: float,
        residual_std: float,
        stats: NormalizationStats,
        calibration: tuple[float, float] | None = None,
        horizon: int = 5,
        threshold: float = 92.0,
    ) -> None:
        if not abs(phi) < 1:
            raise ValueError("AR(1) coefficient must satisfy |phi| < 1")
        if residual_std < 0:
            raise ValueError("residual_std must be >= 0")
        self.phi = float(phi)
        self.intercept = float(intercept)
        self.residual_std = float(residual_std)
        self.stats = stats
        self.calibration = None if calibration is None else (float(calibration[0]), float(calibration[1]))
        self.horizon = int(horizon)
        self.threshold = float(threshold)

    @property
    def mean_level(self) -> float:
        return self.intercept / (1.0 - self.phi)

    def forecast(self, last: np.ndarray) -> tuple[np.ndarray, float]:
        """Mean and standard deviation of the ``horizon``-step-ahead forecast."""
        ph = self.phi**self.horizon
        mean = self.mean_level + ph * (np.asarray(last, dtype=np.float64) - self.mean_level)
        var = self.residual_std**2 * sum(self.phi ** (2 * k) for k in range(self.horizon))
        return mean, math.sqrt(var)

    def probit_score(self, raw_windows: np.ndarray) -> np.ndarray:
        mean, sd = self.forecast(np.atleast_2d(raw_windows)[:, -1])
        sd = max(sd, 1e-9)
        return np.clip((self.threshold - mean) / sd, -40.0, 40.0)

    def raw_probability(self, raw_windows: np.ndarray) -> np.ndarray:
        return ndtr(self.probit_score(raw_windows))

    def _logit_block(self, x: np.ndarray) -> np.ndarray:
        u = self.probit_score(invert_normalization(x, self.stats))
        if self.calibration is None:
            return log_ndtr(u) - log_ndtr(-u)
        a, b = self.calibration
        return a * u + b

    def hyperparameters(self) -> dict[str, Any]:
        return {"horizon": self.horizon, "threshold": self.threshold}

    def to_payload(self) -> dict[str, np.ndarray]:
        return {
            "ar": np.array([self.phi, self.intercept, self.residual_std]),
            "calibration": np.array(self.calibration or (), dtype=np.float64),
            "stats_mean": self.stats.mean,
            "stats_std": self.stats.std,
        }

    @classmethod
    def from_payload(cls, hyper: dict[str, Any], arrays: dict[str, np.ndarray]) -> "AR1Model":
        phi, c, sd = arrays["ar"].tolist()
        stats = NormalizationStats(arrays["stats_mean"], arrays["stats_std"])
        cal = tuple(arrays["calibration"].tolist()) or None
        return cls(phi, c, sd, stats, cal, int(hyper["horizon"]), float(hyper["threshold"]))


def _fit_logistic_1d(u: np.ndarray, y: np.ndarray, l2: float = 1e-6, iters: int = 50) -> tuple[float, float]:
    """Newton's method for sigmoid(a*u + b) against 0/1 labels."""
    a, b = 1.0, 0.0
    X = np.column_stack([u, np.ones_like(u)])
    theta = np.array([a, b])
    for _ in range(iters):
        p = sigmoid(X @ theta)
        g = X.T @ (p - y) / y.size + l2 * theta
        w = p * (1 - p)
        H = (X * w[:, None]).T @ X / y.size + l2 * np.eye(2)
        step = np.linalg.solve(H, g)
        theta = theta - step
        if np.max(np.abs(step)) < 1e-10:
            break
    return float(theta[0]), float(theta[1])


def fit_ar1(
    raw_windows: np.ndarray,
    labels: np.ndarray,
    stats: NormalizationStats,
    horizon: int = 5,
    threshold: float = 92.0,
) -> AR1Model:
    """Least-squares AR(1) on consecutive in-window pairs, then label calibration."""
    w = np.asarray(raw_windows, dtype=np.float64)
    prev = w[:, :-1].ravel()
    nxt = w[:, 1:].ravel()
    ok = np.isfinite(prev) & np.isfinite(nxt)
    prev, nxt = prev[ok], nxt[ok]
    if prev.size < 2:
        raise ValueError("need at least 2 consecutive observed pairs to fit AR(1)")
    xm, ym = prev.mean(), nxt.mean()
    sxx = np.sum((prev - xm) ** 2)
    phi = float(np.sum((prev - xm) * (nxt - ym)) / sxx) if sxx > 0 else 0.0
    phi = float(np.clip(phi, -0.9999, 0.9999))
    intercept = float(ym - phi * xm)
    resid = nxt - (intercept + phi * prev)
    model = AR1Model(phi, intercept, float(np.sqrt(np.mean(resid**2))), stats, None, horizon, threshold)
    y = np.asarray(labels, dtype=np.float64)
    if y.size and 0 < y.mean() < 1:
        model.calibration = _fit_logistic_1d(model.probit_score(w), y)
    return model


# -- logistic regression -----------------------------------------------------


class LogisticModel(Predictor):
    kind: ClassVar[str] = "logistic"

    def __init__(self, weights: np.ndarray, bias: float) -> None:
        self.weights = np.asarray(weights, dtype=np.float64).reshape(-1)
        self.bias = float(bias)
        self.width = self.weights.shape[0]

    def _logit_block(self, x: np.ndarray) -> np.ndarray:
        return x @ self.weights + self.bias

    def to_payload(self) -> dict[str, np.ndarray]:
        return {"weights": self.weights, "bias": np.array([self.bias])}

    @classmethod
    def from_payload(cls, hyper: dict[str, Any], arrays: dict[str, np.ndarray]) -> "LogisticModel":
        return cls(arrays["weights"], float(arrays["bias"][0]))


def logistic_loss_and_grad(
    w: np.ndarray, b: float, X: np.ndarray, y: np.ndarray, l2: float
) -> tuple[float, np.ndarray, float]:
    """L2-regularized mean cross-entropy and its gradient."""
    z = X @ w + b
    loss = log_loss(z, y) + 0.5 * l2 * float(w @ w)
    r = (sigmoid(z) - y) / y.size
    return loss, X.T @ r + l2 * w, float(r.sum())


@dataclass
class LogisticFit:
    model: LogisticModel
    losses: list[float] = field(default_factory=list)


def train_logistic(
    X: np.ndarray,
    y: np.ndarray,
    learning_rate: float = 1.0,
    epochs: int = 300,
    l2: float = 1e-4,
) -> LogisticFit:
    """Full-batch gradient descent; the step halves whenever the loss would rise."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if not np.all(np.isfinite(X)):
        raise ValueError("features must be finite")
    if l2 < 0:
        raise ValueError("l2 must be >= 0")
    w = np.zeros(X.shape[1])
    b = 0.0
    loss, gw, gb = logistic_loss_and_grad(w, b, X, y, l2)
    losses = [loss]
    lr = learning_rate
    for _ in range(epochs):
        while True:
            w_new, b_new = w - lr * gw, b - lr * gb
            new_loss, new_gw, new_gb = logistic_loss_and_grad(w_new, b_new, X, y, l2)
            if new_loss <= loss or lr < 1e-12:
                break
            lr *= 0.5
        if new_loss > loss:
            break
        w, b, loss, gw, gb = w_new, b_new, new_loss, new_gw, new_gb
        losses.append(loss)
    return LogisticFit(LogisticModel(w, b), losses)
