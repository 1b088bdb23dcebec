"""Predictor contract shared by every model kind."""

from __future__ import annotations

from typing import Any, ClassVar

import numpy as np

# Inference runs on fixed-size zero-padded blocks so that a window's risk does
# not depend on which other windows share its batch (BLAS kernels pick
# different summation orders for different matrix shapes).
INFER_BLOCK = 256


def sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def log_loss(logits: np.ndarray, y: np.ndarray) -> float:
    """Mean binary cross-entropy computed from logits."""
    z = np.asarray(logits, dtype=np.float64)
    return float(np.mean(np.logaddexp(0.0, z) - y * z))


def check_features(features: np.ndarray, width: int = 60) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != width:
        raise ValueError(f"expected feature rows of length {width}, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("features must be finite")
    return x


def blockwise(fn, x: np.ndarray, block: int = INFER_BLOCK) -> np.ndarray:
    n = x.shape[0]
    out = np.empty(n)
    pad = np.zeros((block,) + x.shape[1:])
    for start in range(0, n, block):
        stop = min(start + block, n)
        pad[: stop - start] = x[start:stop]
        pad[stop - start :] = 0.0
        out[start:stop] = fn(pad)[: stop - start]
    return out


class Predictor:
    """A trained model mapping normalized 60-minute windows to risk in [0, 1].

    Subclasses implement ``_logit_block`` (or override ``_risk_block``) on a
    full inference block, and ``to_payload``/``from_payload`` for artifacts.
    """

    kind: ClassVar[str] = ""
    width: int = 60

    def _logit_block(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _risk_block(self, x: np.ndarray) -> np.ndarray:
        return sigmoid(self._logit_block(x))

    def logit(self, features: np.ndarray) -> np.ndarray:
        x = check_features(features, self.width)
        return blockwise(self._logit_block, x)

    def predict_risk(self, features: np.ndarray) -> np.ndarray:
        x = check_features(features, self.width)
        return blockwise(self._risk_block, x)

    def hyperparameters(self) -> dict[str, Any]:
        return {}

    def to_payload(self) -> dict[str, np.ndarray]:
        raise NotImplementedError

    @classmethod
    def from_payload(cls, hyper: dict[str, Any], arrays: dict[str, np.ndarray]) -> "Predictor":
        raise NotImplementedError
