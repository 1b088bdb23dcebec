"""Flat parameter vectors with named tensor views, plus Adam and RMSprop."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np


@dataclass
class NetParams:
    """All trainable tensors packed into one float64 vector.

    ``layout`` maps tensor name to ``(offset, shape)``.  ``buffers`` holds
    non-trainable state (batch-norm running moments).
    """

    flat: np.ndarray
    layout: dict[str, tuple[int, tuple[int, ...]]]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def allocate(cls, shapes: dict[str, tuple[int, ...]]) -> "NetParams":
        layout = {}
        offset = 0
        for name, shape in shapes.items():
            layout[name] = (offset, tuple(int(s) for s in shape))
            offset += int(np.prod(shape))
        return cls(np.zeros(offset), layout)

    def __getitem__(self, name: str) -> np.ndarray:
        offset, shape = self.layout[name]
        size = int(np.prod(shape))
        return self.flat[offset : offset + size].reshape(shape)

    def __contains__(self, name: str) -> bool:
        return name in self.layout

    def names(self) -> Iterator[str]:
        return iter(self.layout)

    def zeros_like(self) -> "NetParams":
        return NetParams(np.zeros_like(self.flat), self.layout)

    def copy(self) -> "NetParams":
        return NetParams(self.flat.copy(), dict(self.layout), {k: v.copy() for k, v in self.buffers.items()})

    def layout_table(self) -> list[list]:
        return [[name, off, list(shape)] for name, (off, shape) in self.layout.items()]

    @classmethod
    def from_table(cls, flat: np.ndarray, table: list[list], buffers: dict[str, np.ndarray]) -> "NetParams":
        layout = {name: (int(off), tuple(shape)) for name, off, shape in table}
        return cls(np.array(flat, dtype=np.float64), layout, {k: np.array(v) for k, v in buffers.items()})


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: np.ndarray | None = None
        self.v: np.ndarray | None = None
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        params -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


class RMSprop:
    def __init__(self, lr: float = 1e-3, rho: float = 0.9, eps: float = 1e-8) -> None:
        self.lr, self.rho, self.eps = lr, rho, eps
        self.acc: np.ndarray | None = None

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        if self.acc is None:
            self.acc = np.zeros_like(params)
        self.acc = self.rho * self.acc + (1 - self.rho) * grad * grad
        params -= self.lr * grad / (np.sqrt(self.acc) + self.eps)
