import logging
from dataclasses import dataclass, field
from typing import Dict, Sequence

import numpy as np

from .tensor import Parameter, ShapeError, Tensor, TensorEngineError

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    """Per-parameter moments and step counter for one optimizer"""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, Tensor] = field(default_factory=dict)
    v: Dict[str, Tensor] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise TensorEngineError(f"learning rate must be positive, got {self.lr}")


def adam_step(params: Sequence[Parameter], grads: Sequence[Tensor], state: AdamState) -> None:
    """
    One bias-corrected Adam update

    Parameters are replaced by new arrays, never written in place, so
    earlier snapshots of a parameter value stay valid.

    Args:
        params: parameters to update
        grads: gradients, aligned with params
        state: optimizer state, advanced by one step
    """
    if len(params) != len(grads):
        raise ShapeError("adam_step", [(len(params),), (len(grads),)], "params/grads count")
    for p, g in zip(params, grads):
        if g.shape != p.value.shape:
            raise ShapeError("adam_step", [p.value.shape, g.shape], p.name)
        m = state.m.get(p.name)
        if m is not None and m.shape != p.value.shape:
            raise ShapeError("adam_step", [p.value.shape, m.shape], f"moment of {p.name}")

    state.step += 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1 ** state.step
    correction2 = 1.0 - b2 ** state.step
    for p, g in zip(params, grads):
        m = state.m.get(p.name, np.zeros_like(p.value))
        v = state.v.get(p.name, np.zeros_like(p.value))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[p.name] = m
        state.v[p.name] = v
        m_hat = m / correction1
        v_hat = v / correction2
        p.value = p.value - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
