"""SGD-with-momentum and Adam over lists of leaf tensors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import DTYPE, Tensor


@dataclass
class OptimizerConfig:
    kind: str = "sgd"  # "sgd" or "adam"
    lr: float = 1e-2
    momentum: float = 0.9  # beta1 for adam
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")


class Optimizer:
    def __init__(self, params: list[Tensor], config: OptimizerConfig):
        self.params = list(params)
        self.config = config
        self.step_count = 0
        self._m = [np.zeros(p.shape, dtype=DTYPE) for p in self.params]
        self._v = [np.zeros(p.shape, dtype=DTYPE) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, zero_grad: bool = True):
        cfg = self.config
        self.step_count += 1
        t = self.step_count
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise RuntimeError(f"optimizer step: parameter {p.name or i} has no gradient")
            g = p.grad
            if cfg.weight_decay:
                g = g + cfg.weight_decay * p.data
            if cfg.kind == "sgd":
                if cfg.momentum:
                    buf = self._m[i]
                    # first step initialises the buffer with the raw gradient
                    buf[...] = g if t == 1 else cfg.momentum * buf + g
                    g = buf
                p.data -= (cfg.lr * g).astype(DTYPE)
            else:
                m, v = self._m[i], self._v[i]
                m[...] = cfg.momentum * m + (1 - cfg.momentum) * g
                v[...] = cfg.beta2 * v + (1 - cfg.beta2) * g * g
                mhat = m / (1 - cfg.momentum**t)
                vhat = v / (1 - cfg.beta2**t)
                p.data -= (cfg.lr * mhat / (np.sqrt(vhat) + cfg.eps)).astype(DTYPE)
        if zero_grad:
            self.zero_grad()

    def state_dict(self) -> dict:
        return {"step": self.step_count, "m": [a.copy() for a in self._m], "v": [a.copy() for a in self._v]}

