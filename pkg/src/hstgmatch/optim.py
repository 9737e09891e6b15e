"""Adam with bias correction, keyed by parameter name."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import DimensionError, NumericError
from .tensor import Tensor


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
              state: AdamState) -> Mapping[str, Tensor]:
    """One in-place Adam update; increments `state.step`.

    Only the names present in `grads` are updated (others keep their
    moments untouched), which is how the frozen-encoder epoch is realized.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.data.shape:
            raise DimensionError(
                f"gradient shape {g.shape} != parameter shape {p.data.shape} for '{name}'")
        m = state.first_moment.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.first_moment[name] = m
        v = state.second_moment.get(name)
        if v is None:
            v = np.zeros_like(p.data)
            state.second_moment[name] = v
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        update = (state.lr / bc1) * m / (np.sqrt(v / bc2) + state.eps)
        p.data -= update
        if not np.all(np.isfinite(p.data)):
            raise NumericError(f"parameter '{name}' became non-finite in adam_step")
    return params
