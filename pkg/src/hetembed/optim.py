"""Adam and plain SGD over named parameter tensors.

Tensors are immutable, so a step returns a new parameter dict whose updated
entries are fresh leaf tensors with no gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .autodiff import Tensor


@dataclass
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("adam", "sgd"):
            raise ValueError(f"optimizer kind must be 'adam' or 'sgd', got {self.kind!r}")
        if self.lr <= 0 or self.eps <= 0:
            raise ValueError("lr and eps must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: Mapping[str, Tensor], names: Iterable[str]) -> dict[str, Tensor]:
        out = dict(params)
        for n in names:
            p = params[n]
            if p.grad is None:
                continue
            out[n] = Tensor(p.data - self.lr * p.grad, requires_grad=True)
        return out


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: dict[str, int] = field(default_factory=dict)
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: Mapping[str, Tensor], names: Iterable[str]) -> dict[str, Tensor]:
        out = dict(params)
        for n in names:
            p = params[n]
            g = p.grad
            if g is None:
                # untouched this step (e.g. a frozen branch)
                continue
            t = self.t.get(n, 0) + 1
            m = self.beta1 * self.m.get(n, 0.0) + (1 - self.beta1) * g
            v = self.beta2 * self.v.get(n, 0.0) + (1 - self.beta2) * g * g
            self.t[n], self.m[n], self.v[n] = t, m, v
            m_hat = m / (1 - self.beta1**t)
            v_hat = v / (1 - self.beta2**t)
            out[n] = Tensor(p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps), requires_grad=True)
        return out


def make_optimizer(cfg: OptimizerConfig):
    if cfg.kind == "sgd":
        return SGD(cfg.lr)
    return Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
