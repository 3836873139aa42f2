"""Adam optimizer over a :class:`ParameterStore`.

State is kept per parameter name in plain float64 arrays so it serializes
alongside the weights if a caller ever wants warm restarts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ContractError
from .mlp import ParameterStore


@dataclass
class AdamConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


@dataclass
class AdamState:
    config: AdamConfig = field(default_factory=AdamConfig)
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def init_adam(store: ParameterStore, config: AdamConfig | None = None) -> AdamState:
    state = AdamState(config=config or AdamConfig())
    for name, t in store.items():
        state.m[name] = np.zeros_like(t.values)
        state.v[name] = np.zeros_like(t.values)
    return state


def optimizer_step(store: ParameterStore, state: AdamState) -> None:
    """One in-place Adam update; consumes and clears the gradients.

    Every parameter must carry a gradient buffer. Parameters outside the
    current loss still get exact-zero gradients from the backward pass, so
    a missing buffer means the training loop forgot to zero and backprop,
    which is a bug worth failing loudly on.
    """
    cfg = state.config
    state.step += 1
    t = state.step
    bias1 = 1.0 - cfg.beta1 ** t
    bias2 = 1.0 - cfg.beta2 ** t
    for name, param in store.items():
        g = param.grad
        if g is None:
            raise ContractError(f"parameter {name!r} has no gradient; "
                                "run backward() before optimizer_step()")
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        m_hat = m / bias1
        v_hat = v / bias2
        param.values -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.epsilon)
        param.grad = None
