"""AdamW with decoupled weight decay, operating on ParameterView objects in place."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError
from .model import ParameterView


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    eps: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be non-negative", "optimizer.learning_rate")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)", "optimizer.beta1")

    def to_dict(self) -> dict:
        return asdict(self)


class AdamW:
    def __init__(self, params: ParameterView, config: OptimizerConfig):
        self.config = config
        self.m = params.zeros_like()
        self.v = params.zeros_like()
        self.t = 0

    def step(self, params: ParameterView, grads: ParameterView, lr: float | None = None) -> None:
        cfg = self.config
        lr = cfg.learning_rate if lr is None else lr
        params.check_aligned(grads)
        self.t += 1
        bc1 = 1.0 - cfg.beta1**self.t
        bc2 = 1.0 - cfg.beta2**self.t
        for name, p in params.items():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            p *= 1.0 - lr * cfg.weight_decay
            p -= lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
