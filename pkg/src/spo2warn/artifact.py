"""Model artifacts: a trained predictor plus everything needed to score raw windows.

The container header (canonical JSON) records the format version, model
kind, hyperparameters, normalization stats, training seed and a sha256
fingerprint of the training data.  Model arrays are stored under
``model:<name>``; the attribution background set under ``background``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .container import ArtifactError, decode, encode
from .models.base import Predictor
from .models.baseline import AR1Model, BaseRateModel, LogisticModel
from .models.boosting import GBTModel
from .models.neural import CNNModel, LSTMModel
from .pipeline import NormalizationStats, apply_normalization, impute_windows

MODEL_KINDS: dict[str, type[Predictor]] = {
    cls.kind: cls for cls in (BaseRateModel, AR1Model, LogisticModel, GBTModel, CNNModel, LSTMModel)
}
BACKGROUND_SIZE = 256


@dataclass
class ModelArtifact:
    model: Predictor
    stats: NormalizationStats
    seed: int
    data_fingerprint: str
    background: np.ndarray
    metadata: dict[str, Any] = field(default_factory=dict)

    @property
    def kind(self) -> str:
        return self.model.kind

    def features(self, raw_windows: np.ndarray) -> np.ndarray:
        """Impute and normalize raw windows (NaN = missing) into model inputs."""
        return apply_normalization(impute_windows(raw_windows), self.stats)

    def risk_from_raw(self, raw_windows: np.ndarray) -> np.ndarray:
        return self.model.predict_risk(self.features(raw_windows))

    def dumps(self) -> bytes:
        header = {
            "model_kind": self.model.kind,
            "hyperparameters": self.model.hyperparameters(),
            "normalization": {"mean": self.stats.mean.tolist(), "std": self.stats.std.tolist()},
            "seed": int(self.seed),
            "data_fingerprint": self.data_fingerprint,
            "metadata": self.metadata,
        }
        arrays = {f"model:{k}": v for k, v in self.model.to_payload().items()}
        arrays["background"] = np.asarray(self.background, dtype=np.float64)
        return encode(header, arrays)

    @classmethod
    def loads(cls, data: bytes) -> "ModelArtifact":
        header, arrays = decode(data)
        kind = header.get("model_kind")
        if kind not in MODEL_KINDS:
            raise ArtifactError(f"unknown model kind {kind!r}")
        try:
            model_arrays = {k[6:]: v for k, v in arrays.items() if k.startswith("model:")}
            model = MODEL_KINDS[kind].from_payload(header["hyperparameters"], model_arrays)
            norm = header["normalization"]
            stats = NormalizationStats(np.array(norm["mean"]), np.array(norm["std"]))
            return cls(
                model=model,
                stats=stats,
                seed=int(header["seed"]),
                data_fingerprint=str(header["data_fingerprint"]),
                background=arrays["background"],
                metadata=dict(header.get("metadata", {})),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ArtifactError(f"malformed {kind} artifact: {exc}") from exc

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.dumps())

    @classmethod
    def load(cls, path: str | Path) -> "ModelArtifact":
        try:
            data = Path(path).read_bytes()
        except OSError as exc:
            raise ArtifactError(f"cannot read artifact {path}: {exc}") from exc
        return cls.loads(data)


def fingerprint(*parts: bytes) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(len(p).to_bytes(8, "little"))
        h.update(p)
    return h.hexdigest()


def sample_background(features: np.ndarray, seed: int, size: int = BACKGROUND_SIZE) -> np.ndarray:
    """A fixed-seed subset of normalized training windows, without replacement."""
    from .traces import case_rng

    features = np.atleast_2d(features)
    if features.shape[0] == 0:
        raise ValueError("cannot sample a background set from no windows")
    rng = case_rng(seed, 3)
    take = min(size, features.shape[0])
    idx = np.sort(rng.choice(features.shape[0], size=take, replace=False))
    return features[idx].copy()
