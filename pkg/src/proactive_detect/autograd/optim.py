"""Plain SGD and the adaptive-moment (Adam) update."""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np


class OptimizerKind(str, Enum):
    SGD = "SGD"
    ADAPTIVE_MOMENT = "AdaptiveMoment"


@dataclass
class OptimizerSpec:
    kind: OptimizerKind = OptimizerKind.SGD
    learning_rate: float = 1e-3
    moment_decays: tuple = (0.9, 0.999)
    epsilon: float = 1e-8

    def __post_init__(self):
        self.kind = OptimizerKind(self.kind)
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        b1, b2 = self.moment_decays
        if not (0 <= b1 < 1 and 0 <= b2 < 1):
            raise ValueError(f"moment decays must lie in [0, 1), got {self.moment_decays}")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")


def optimizer_step(params, spec: OptimizerSpec):
    """Update ``params`` in place from their populated gradients."""
    lr = spec.learning_rate
    if spec.kind is OptimizerKind.SGD:
        for p in params:
            p.data -= (lr * p.grad).astype(p.dtype)
        return
    b1, b2 = spec.moment_decays
    for p in params:
        st = p.state
        if "m" not in st:
            st["m"] = np.zeros_like(p.data)
            st["v"] = np.zeros_like(p.data)
            st["t"] = 0
        st["t"] += 1
        t = st["t"]
        st["m"] = b1 * st["m"] + (1 - b1) * p.grad
        st["v"] = b2 * st["v"] + (1 - b2) * p.grad * p.grad
        m_hat = st["m"] / (1 - b1 ** t)
        v_hat = st["v"] / (1 - b2 ** t)
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + spec.epsilon)).astype(p.dtype)
