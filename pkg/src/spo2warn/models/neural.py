"""1-D convolutional and two-layer LSTM classifiers with hand-written backprop.

Both networks map a batch of normalized windows ``(B, 60)`` to logits
``(B,)``.  ``forward`` returns a cache consumed by ``backward``, which yields
the flat parameter gradient and the gradient with respect to the input (the
latter drives Integrated Gradients).  Dropout masks can be passed in
explicitly so that finite-difference checks see a fixed function.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Any, ClassVar, Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..traces import case_rng
from .base import Predictor, log_loss, sigmoid
from .netparams import Adam, NetParams, RMSprop

logger = logging.getLogger(__name__)

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, last_finite_loss: float) -> None:
        super().__init__(f"loss became non-finite at step {step} (last finite loss {last_finite_loss:.6g})")
        self.step = step
        self.last_finite_loss = last_finite_loss


def _dropout_mask(rng: np.random.Generator, shape: tuple[int, ...], rate: float) -> np.ndarray:
    if rate <= 0:
        return np.ones(shape)
    return (rng.random(shape) >= rate) / (1.0 - rate)


# -- configs -------------------------------------------------------------------


@dataclass(frozen=True)
class CNNConfig:
    kernel_size: int = 6
    layer_filters: tuple[int, ...] = (16, 16, 32, 32, 32, 32)
    dropout_rate: float = 0.3
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 64
    steps: int = 1500
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "layer_filters", tuple(int(f) for f in self.layer_filters))
        if self.kernel_size < 1:
            raise ValueError("kernel_size must be >= 1")
        if not self.layer_filters or min(self.layer_filters) < 1:
            raise ValueError("layer_filters must be non-empty and positive")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must lie in [0, 1)")

    @classmethod
    def paper(cls, **overrides: Any) -> "CNNConfig":
        return cls(**{"layer_filters": (64, 64, 128, 128, 128, 128), **overrides})


@dataclass(frozen=True)
class LSTMConfig:
    hidden_sizes: tuple[int, int] = (32, 32)
    dropout_rate: float = 0.3
    recurrent_dropout_rate: float = 0.2
    learning_rate: float = 1e-3
    rho: float = 0.9
    epsilon: float = 1e-8
    batch_size: int = 64
    steps: int = 2000
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        if len(self.hidden_sizes) != 2 or min(self.hidden_sizes) < 1:
            raise ValueError("hidden_sizes must be two positive sizes")
        for name in ("dropout_rate", "recurrent_dropout_rate"):
            if not 0 <= getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in [0, 1)")

    @classmethod
    def paper(cls, **overrides: Any) -> "LSTMConfig":
        return cls(**{"hidden_sizes": (200, 200), **overrides})


# -- shared layers -------------------------------------------------------------


def _bn_forward(x, gamma, beta, running, train, update_running):
    if train:
        mu = x.mean(axis=(0, 1))
        var = x.var(axis=(0, 1))
        if update_running:
            running["mean"] = BN_MOMENTUM * running["mean"] + (1 - BN_MOMENTUM) * mu
            running["var"] = BN_MOMENTUM * running["var"] + (1 - BN_MOMENTUM) * var
    else:
        mu, var = running["mean"], running["var"]
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mu) * inv
    return gamma * xhat + beta, (xhat, inv, train)


def _bn_backward(dy, gamma, cache):
    xhat, inv, train = cache
    dgamma = np.sum(dy * xhat, axis=(0, 1))
    dbeta = np.sum(dy, axis=(0, 1))
    dxhat = dy * gamma
    if not train:
        return dxhat * inv, dgamma, dbeta
    n = dy.shape[0] * dy.shape[1]
    dx = inv / n * (n * dxhat - dxhat.sum(axis=(0, 1)) - xhat * np.sum(dxhat * xhat, axis=(0, 1)))
    return dx, dgamma, dbeta


# -- CNN -------------------------------------------------------------------------


class CNNNet:
    """conv-BN-ReLU, then (BN, ReLU, dropout, conv) blocks, then BN-ReLU-dense-sigmoid."""

    def __init__(self, config: CNNConfig, length: int = 60) -> None:
        self.config = config
        self.length = length
        k = config.kernel_size
        self.pad = ((k - 1) // 2, k - 1 - (k - 1) // 2)

    @property
    def n_conv(self) -> int:
        return len(self.config.layer_filters)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        k = self.config.kernel_size
        filters = self.config.layer_filters
        shapes: dict[str, tuple[int, ...]] = {}
        c_in = 1
        for i, f in enumerate(filters):
            shapes[f"conv{i}.W"] = (k * c_in, f)
            shapes[f"conv{i}.b"] = (f,)
            c_in = f
        # bn{i} precedes conv{i} for i >= 1; bn0 follows conv0; bn{n} feeds the dense head
        for i in range(len(filters) + 1):
            c = filters[0] if i == 0 else filters[i - 1]
            shapes[f"bn{i}.gamma"] = (c,)
            shapes[f"bn{i}.beta"] = (c,)
        shapes["dense.W"] = (self.length * filters[-1], 1)
        shapes["dense.b"] = (1,)
        return shapes

    def bn_channels(self, i: int) -> int:
        filters = self.config.layer_filters
        return filters[0] if i == 0 else filters[i - 1]

    def init_params(self, seed: int) -> NetParams:
        rng = case_rng(seed, 1)
        params = NetParams.allocate(self.shapes())
        for name in params.names():
            view = params[name]
            if name.endswith(".gamma"):
                view[...] = 1.0
            elif name.endswith(".W"):
                bound = 1.0 / math.sqrt(view.shape[0])
                view[...] = rng.uniform(-bound, bound, size=view.shape)
            elif name.startswith("conv") and name.endswith(".b"):
                bound = 1.0 / math.sqrt(params[name[:-2] + ".W"].shape[0])
                view[...] = rng.uniform(-bound, bound, size=view.shape)
        for i in range(self.n_conv + 1):
            c = self.bn_channels(i)
            params.buffers[f"bn{i}.mean"] = np.zeros(c)
            params.buffers[f"bn{i}.var"] = np.ones(c)
        return params

    def sample_masks(self, rng: np.random.Generator, batch: int) -> dict[str, np.ndarray]:
        f = self.config.layer_filters
        return {
            f"drop{i}": _dropout_mask(rng, (batch, self.length, f[i - 1]), self.config.dropout_rate)
            for i in range(1, self.n_conv)
        }

    def _conv(self, x, W, b):
        k = self.config.kernel_size
        xp = np.pad(x, ((0, 0), self.pad, (0, 0)))
        cols = sliding_window_view(xp, k, axis=1)  # (B, L, C, k)
        cols = cols.transpose(0, 1, 3, 2).reshape(x.shape[0] * x.shape[1], -1)
        out = cols @ W + b
        return out.reshape(x.shape[0], x.shape[1], -1), cols

    def _conv_backward(self, dout, cols, W, x_shape):
        B, L, C = x_shape
        k = self.config.kernel_size
        d2 = dout.reshape(B * L, -1)
        dW = cols.T @ d2
        db = d2.sum(axis=0)
        dcols = (d2 @ W.T).reshape(B, L, k, C)
        dxp = np.zeros((B, L + k - 1, C))
        for j in range(k):
            dxp[:, j : j + L, :] += dcols[:, :, j, :]
        return dxp[:, self.pad[0] : self.pad[0] + L, :], dW, db

    def forward(self, params: NetParams, X: np.ndarray, train: bool = False,
                masks: dict[str, np.ndarray] | None = None, update_running: bool = False):
        x = np.asarray(X, dtype=np.float64)[:, :, None]
        caches: list[tuple] = []
        h, cols = self._conv(x, params["conv0.W"], params["conv0.b"])
        caches.append(("conv", 0, cols, x.shape))
        for i in range(self.n_conv + 1):
            running = {"mean": params.buffers[f"bn{i}.mean"], "var": params.buffers[f"bn{i}.var"]}
            h, bnc = _bn_forward(h, params[f"bn{i}.gamma"], params[f"bn{i}.beta"], running, train, update_running)
            params.buffers[f"bn{i}.mean"], params.buffers[f"bn{i}.var"] = running["mean"], running["var"]
            caches.append(("bn", i, bnc))
            caches.append(("relu", h > 0))
            h = np.maximum(h, 0.0)
            if i == 0 or i == self.n_conv:
                continue
            if train:
                m = masks[f"drop{i}"]
                caches.append(("drop", m))
                h = h * m
            x_in = h
            h, cols = self._conv(x_in, params[f"conv{i}.W"], params[f"conv{i}.b"])
            caches.append(("conv", i, cols, x_in.shape))
        flat = h.reshape(h.shape[0], -1)
        logits = (flat @ params["dense.W"] + params["dense.b"])[:, 0]
        caches.append(("dense", flat, h.shape))
        return logits, caches

    def backward(self, params: NetParams, caches, dlogits: np.ndarray):
        grads = params.zeros_like()
        _, flat, shape = caches[-1]
        d = dlogits[:, None]
        grads["dense.W"][...] = flat.T @ d
        grads["dense.b"][...] = d.sum(axis=0)
        dh = (d @ params["dense.W"].T).reshape(shape)
        for entry in reversed(caches[:-1]):
            tag = entry[0]
            if tag == "relu":
                dh = dh * entry[1]
            elif tag == "drop":
                dh = dh * entry[1]
            elif tag == "bn":
                i = entry[1]
                dh, dg, db = _bn_backward(dh, params[f"bn{i}.gamma"], entry[2])
                grads[f"bn{i}.gamma"][...] = dg
                grads[f"bn{i}.beta"][...] = db
            elif tag == "conv":
                _, i, cols, xs = entry
                dh, dW, db = self._conv_backward(dh, cols, params[f"conv{i}.W"], xs)
                grads[f"conv{i}.W"][...] = dW
                grads[f"conv{i}.b"][...] = db
        return grads.flat, dh[:, :, 0]


# -- LSTM -------------------------------------------------------------------------


def _lstm_layer_forward(x, W, U, b, rmask, return_sequence):
    B, T, _ = x.shape
    H = U.shape[0]
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    hs = np.empty((B, T, H))
    steps = []
    for t in range(T):
        hm = h * rmask
        a = x[:, t, :] @ W + hm @ U + b
        i = sigmoid(a[:, :H])
        f = sigmoid(a[:, H : 2 * H])
        g = np.tanh(a[:, 2 * H : 3 * H])
        o = sigmoid(a[:, 3 * H :])
        c_prev = c
        c = f * c_prev + i * g
        tc = np.tanh(c)
        h = o * tc
        hs[:, t, :] = h
        steps.append((hm, i, f, g, o, c_prev, tc))
    return hs, steps


def _lstm_layer_backward(dhs, x, W, U, rmask, steps):
    B, T, _ = x.shape
    H = U.shape[0]
    dW = np.zeros_like(W)
    dU = np.zeros_like(U)
    db = np.zeros(4 * H)
    dx = np.empty_like(x)
    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    for t in range(T - 1, -1, -1):
        hm, i, f, g, o, c_prev, tc = steps[t]
        dh = dhs[:, t, :] + dh_next
        do = dh * tc
        dc = dh * o * (1.0 - tc * tc) + dc_next
        da = np.concatenate(
            [dc * g * i * (1 - i), dc * c_prev * f * (1 - f), dc * i * (1 - g * g), do * o * (1 - o)], axis=1
        )
        dW += x[:, t, :].T @ da
        dU += hm.T @ da
        db += da.sum(axis=0)
        dx[:, t, :] = da @ W.T
        dh_next = (da @ U.T) * rmask
        dc_next = dc * f
    return dx, dW, dU, db


class LSTMNet:
    """Two stacked LSTM layers (sequence -> last state), dense node, sigmoid."""

    def __init__(self, config: LSTMConfig, length: int = 60) -> None:
        self.config = config
        self.length = length

    def shapes(self) -> dict[str, tuple[int, ...]]:
        h1, h2 = self.config.hidden_sizes
        return {
            "lstm1.W": (1, 4 * h1), "lstm1.U": (h1, 4 * h1), "lstm1.b": (4 * h1,),
            "lstm2.W": (h1, 4 * h2), "lstm2.U": (h2, 4 * h2), "lstm2.b": (4 * h2,),
            "dense.W": (h2, 1), "dense.b": (1,),
        }

    def init_params(self, seed: int) -> NetParams:
        rng = case_rng(seed, 1)
        params = NetParams.allocate(self.shapes())
        h1, h2 = self.config.hidden_sizes
        for layer, fan_in, H in (("lstm1", 1 + h1, h1), ("lstm2", h1 + h2, h2)):
            bound = 1.0 / math.sqrt(fan_in)
            for part in ("W", "U"):
                v = params[f"{layer}.{part}"]
                v[...] = rng.uniform(-bound, bound, size=v.shape)
            params[f"{layer}.b"][H : 2 * H] = 1.0  # forget gate
        bound = 1.0 / math.sqrt(h2)
        params["dense.W"][...] = rng.uniform(-bound, bound, size=(h2, 1))
        return params

    def sample_masks(self, rng: np.random.Generator, batch: int) -> dict[str, np.ndarray]:
        h1, h2 = self.config.hidden_sizes
        p, rp = self.config.dropout_rate, self.config.recurrent_dropout_rate
        return {
            "rec1": _dropout_mask(rng, (batch, h1), rp),
            "rec2": _dropout_mask(rng, (batch, h2), rp),
            "between": _dropout_mask(rng, (batch, self.length, h1), p),
            "head": _dropout_mask(rng, (batch, h2), p),
        }

    def forward(self, params: NetParams, X: np.ndarray, train: bool = False,
                masks: dict[str, np.ndarray] | None = None, update_running: bool = False):
        x = np.asarray(X, dtype=np.float64)[:, :, None]
        B = x.shape[0]
        h1, h2 = self.config.hidden_sizes
        if not train:
            masks = {"rec1": np.ones((1, h1)), "rec2": np.ones((1, h2)),
                     "between": np.ones((1, 1, h1)), "head": np.ones((1, h2))}
        hs1, st1 = _lstm_layer_forward(x, params["lstm1.W"], params["lstm1.U"], params["lstm1.b"], masks["rec1"], True)
        x2 = hs1 * masks["between"]
        hs2, st2 = _lstm_layer_forward(x2, params["lstm2.W"], params["lstm2.U"], params["lstm2.b"], masks["rec2"], False)
        last = hs2[:, -1, :] * masks["head"]
        logits = (last @ params["dense.W"] + params["dense.b"])[:, 0]
        return logits, (x, st1, x2, st2, last, masks, B)

    def backward(self, params: NetParams, cache, dlogits: np.ndarray):
        x, st1, x2, st2, last, masks, B = cache
        grads = params.zeros_like()
        d = dlogits[:, None]
        grads["dense.W"][...] = last.T @ d
        grads["dense.b"][...] = d.sum(axis=0)
        dlast = (d @ params["dense.W"].T) * masks["head"]
        h2 = self.config.hidden_sizes[1]
        dhs2 = np.zeros((B, self.length, h2))
        dhs2[:, -1, :] = dlast
        dx2, dW, dU, db = _lstm_layer_backward(dhs2, x2, params["lstm2.W"], params["lstm2.U"], masks["rec2"], st2)
        grads["lstm2.W"][...], grads["lstm2.U"][...], grads["lstm2.b"][...] = dW, dU, db
        dhs1 = dx2 * masks["between"]
        dx, dW, dU, db = _lstm_layer_backward(dhs1, x, params["lstm1.W"], params["lstm1.U"], masks["rec1"], st1)
        grads["lstm1.W"][...], grads["lstm1.U"][...], grads["lstm1.b"][...] = dW, dU, db
        return grads.flat, dx[:, :, 0]


# -- predictors -----------------------------------------------------------------


class _NetModel(Predictor):
    net_cls: ClassVar[type]
    config_cls: ClassVar[type]

    def __init__(self, params: NetParams, config) -> None:
        self.params = params
        self.config = config
        self.net = self.net_cls(config)

    def _logit_block(self, x: np.ndarray) -> np.ndarray:
        return self.net.forward(self.params, x, train=False)[0]

    def logit_and_input_grad(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Infer-mode logits and d(logit)/d(input) for each row."""
        logits, cache = self.net.forward(self.params, np.atleast_2d(x), train=False)
        _, dx = self.net.backward(self.params, cache, np.ones_like(logits))
        return logits, dx

    def hyperparameters(self) -> dict[str, Any]:
        hp = asdict(self.config)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in hp.items()}

    def to_payload(self) -> dict[str, np.ndarray]:
        out = {"flat": self.params.flat}
        for name in sorted(self.params.buffers):
            out[f"buffer:{name}"] = self.params.buffers[name]
        return out

    @classmethod
    def from_payload(cls, hyper: dict[str, Any], arrays: dict[str, np.ndarray]):
        config = cls.config_cls(**hyper)
        net = cls.net_cls(config)
        params = NetParams.allocate(net.shapes())
        if arrays["flat"].shape != params.flat.shape:
            raise ValueError("parameter vector does not match the configured architecture")
        params.flat[...] = arrays["flat"]
        params.buffers = {k.split(":", 1)[1]: np.array(v) for k, v in arrays.items() if k.startswith("buffer:")}
        return cls(params, config)


class CNNModel(_NetModel):
    kind: ClassVar[str] = "cnn"
    net_cls = CNNNet
    config_cls = CNNConfig


class LSTMModel(_NetModel):
    kind: ClassVar[str] = "lstm"
    net_cls = LSTMNet
    config_cls = LSTMConfig


def net_predict(model: _NetModel, features: np.ndarray) -> float:
    return float(model.predict_risk(np.asarray(features).reshape(1, -1))[0])


def batch_loss_and_grad(net, params: NetParams, X: np.ndarray, y: np.ndarray,
                        masks: dict[str, np.ndarray] | None, update_running: bool = False):
    """Train-mode mean cross-entropy and its flat gradient for fixed masks."""
    logits, cache = net.forward(params, X, train=True, masks=masks, update_running=update_running)
    loss = log_loss(logits, y)
    grad, _ = net.backward(params, cache, (sigmoid(logits) - y) / y.shape[0])
    return loss, grad


@dataclass
class NetFit:
    model: _NetModel
    losses: list[float] = field(default_factory=list)
    smoothed: list[float] = field(default_factory=list)


def train_net(
    model_cls: type[_NetModel], config, X: np.ndarray, y: np.ndarray, batches: Iterator[np.ndarray]
) -> NetFit:
    """Optimize on index batches from ``batches`` for ``config.steps`` steps.

    CNNs use Adam, LSTMs RMSprop.  Deterministic given ``config.seed`` and
    the batch stream.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    net = model_cls.net_cls(config)
    params = net.init_params(config.seed)
    if model_cls is CNNModel:
        opt = Adam(config.learning_rate, config.beta1, config.beta2, config.epsilon)
    else:
        opt = RMSprop(config.learning_rate, config.rho, config.epsilon)
    mask_rng = case_rng(config.seed, 2)
    losses: list[float] = []
    smoothed: list[float] = []
    ema = None
    for step in range(config.steps):
        idx = next(batches)
        masks = net.sample_masks(mask_rng, idx.shape[0])
        loss, grad = batch_loss_and_grad(net, params, X[idx], y[idx], masks, update_running=True)
        if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
            raise TrainingDivergedError(step, losses[-1] if losses else float("nan"))
        if config.learning_rate != 0:
            opt.step(params.flat, grad)
        losses.append(loss)
        ema = loss if ema is None else 0.98 * ema + 0.02 * loss
        smoothed.append(ema)
        if (step + 1) % 250 == 0:
            logger.debug("step %d smoothed loss %.4f", step + 1, ema)
    return NetFit(model_cls(params, config), losses, smoothed)
