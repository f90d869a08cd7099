"""Adam with bias correction and a constant learning rate.

Defaults follow the experimental setup this package reproduces
(beta1=0.99, beta2=0.9, eps=1e-8), which is the reverse of the usual
(0.9, 0.999) pairing; ``AdamConfig.conventional`` gives the usual values.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, MutableMapping

import numpy as np

from .errors import ConfigError, NonFiniteError


@dataclass(frozen=True)
class AdamConfig:
    learning_rate: float = 5e-4
    beta1: float = 0.99
    beta2: float = 0.9
    epsilon: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)")
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be > 0")

    @classmethod
    def conventional(cls, learning_rate: float = 5e-4) -> "AdamConfig":
        return cls(learning_rate, 0.9, 0.999, 1e-8)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    config: AdamConfig,
    state: AdamState,
    params: MutableMapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
) -> None:
    """Update ``params`` in place and advance ``state`` by one step.

    Every coordinate is updated independently, so the result does not
    depend on the iteration order of ``params``.
    """
    step = state.t + 1
    for key, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.isfinite(g).sum())
            raise NonFiniteError(f"non-finite gradient for {key!r} at step {step} ({bad} bad values)")
        if np.shape(g) != np.shape(params[key]):
            raise ValueError(f"gradient shape {np.shape(g)} != parameter shape {np.shape(params[key])} for {key!r}")
    state.t = step
    b1, b2 = config.beta1, config.beta2
    bc1 = 1.0 - b1 ** step
    bc2 = 1.0 - b2 ** step
    for key, g in grads.items():
        m = state.m.get(key)
        if m is None:
            m = state.m[key] = np.zeros_like(params[key])
            state.v[key] = np.zeros_like(params[key])
        v = state.v[key]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        params[key] -= config.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + config.epsilon)


class Adam:
    """Stateful convenience wrapper around :func:`adam_step`."""

    def __init__(self, config: AdamConfig | None = None):
        self.config = config or AdamConfig()
        self.state = AdamState()

    def step(self, params: MutableMapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        adam_step(self.config, self.state, params, grads)
