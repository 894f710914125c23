"""Rmsprop, the one optimizer used for every SGD update in this package."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class RmspropState:
    """Per-parameter squared-gradient accumulators plus the step settings."""

    accum: list[np.ndarray]
    learning_rate: float
    decay: float = 0.9
    epsilon: float = 1e-8

    def __post_init__(self):
        if not 0.0 < self.decay < 1.0:
            raise ValueError("decay must lie in (0, 1)")
        if self.epsilon <= 0.0 or self.learning_rate <= 0.0:
            raise ValueError("epsilon and learning_rate must be positive")

    @classmethod
    def for_params(
        cls,
        params: list[np.ndarray],
        learning_rate: float,
        decay: float = 0.9,
        epsilon: float = 1e-8,
    ) -> "RmspropState":
        return cls([np.zeros_like(p) for p in params], learning_rate, decay, epsilon)


def rmsprop_step(params: list[np.ndarray], grads: list[np.ndarray], state: RmspropState) -> None:
    """One rmsprop update, in place (params and accumulators are mutated).

    a <- decay * a + (1 - decay) * g^2
    p <- p - lr * g / sqrt(a + eps)
    """
    if len(params) != len(grads) or len(params) != len(state.accum):
        raise ValueError("params, grads, and accumulators must align")
    for p, g, a in zip(params, grads, state.accum):
        if p.shape != g.shape or p.shape != a.shape:
            raise ValueError(f"shape mismatch: {p.shape} vs {g.shape} vs {a.shape}")
        a *= state.decay
        a += (1.0 - state.decay) * g * g
        p -= state.learning_rate * g / np.sqrt(a + state.epsilon)
