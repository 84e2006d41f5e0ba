"""
Nadam - Nesterov-accelerated Adam over a ParamStore
"""
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional

import numpy as np

from errors import OptimizerError, ShapeError
from schemas import OptimizerConfig
from tensor_core import ParamStore


@dataclass
class NadamState:
    """
    Per-parameter first/second moments plus hyperparameters.

    `step` counts completed updates; bias corrections use step + 1.
    """
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ParamStore, config: OptimizerConfig) -> "NadamState":
        return cls(
            learning_rate=config.learning_rate,
            beta1=config.beta1,
            beta2=config.beta2,
            epsilon=config.epsilon,
            m={path: np.zeros_like(t.data) for path, t in params.items()},
            v={path: np.zeros_like(t.data) for path, t in params.items()},
        )

    def hyperparameters(self) -> Dict[str, float]:
        return {
            "learning_rate": self.learning_rate,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "epsilon": self.epsilon,
        }

    def copy(self) -> "NadamState":
        return NadamState(
            **self.hyperparameters(),
            step=self.step,
            m={k: a.copy() for k, a in self.m.items()},
            v={k: a.copy() for k, a in self.v.items()},
        )


def nadam_step(params: ParamStore, grads: Mapping[str, np.ndarray], state: NadamState) -> None:
    """
    One Nadam update of every parameter, in place.

        m <- b1 m + (1 - b1) g
        v <- b2 v + (1 - b2) g^2
        m_bar = b1 m_hat + (1 - b1) g / (1 - b1^t)
        theta <- theta - lr m_bar / (sqrt(v_hat) + eps)

    Raises:
        OptimizerError: If any parameter lacks a gradient
    """
    for path in params:
        if path not in grads:
            raise OptimizerError(path)

    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1 ** t
    correction2 = 1.0 - b2 ** t

    for path, tensor in params.items():
        g = grads[path]
        if g.shape != tensor.shape:
            raise ShapeError(path, "gradient shape differs from parameter", expected=tensor.shape, got=g.shape)
        if path not in state.m:
            state.m[path] = np.zeros_like(tensor.data)
            state.v[path] = np.zeros_like(tensor.data)
        m = b1 * state.m[path] + (1.0 - b1) * g
        v = b2 * state.v[path] + (1.0 - b2) * g * g
        state.m[path] = m.astype(tensor.data.dtype)
        state.v[path] = v.astype(tensor.data.dtype)

        m_hat = m / correction1
        v_hat = v / correction2
        m_bar = b1 * m_hat + (1.0 - b1) * g / correction1
        tensor.data = (tensor.data - state.learning_rate * m_bar / (np.sqrt(v_hat) + state.epsilon)).astype(
            tensor.data.dtype
        )

    state.step = t


class Nadam:
    """Optimizer bound to one ParamStore."""

    def __init__(self, params: ParamStore, config: OptimizerConfig, state: Optional[NadamState] = None):
        self.params = params
        self.state = state if state is not None else NadamState.for_params(params, config)

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        nadam_step(self.params, grads, self.state)

    @property
    def steps_taken(self) -> int:
        return self.state.step
