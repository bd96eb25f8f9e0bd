"""Update rules shared by model training and the attack loop."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros_like(cls, x) -> "AdamState":
        x = np.asarray(x, dtype=np.float64)
        return cls(np.zeros_like(x), np.zeros_like(x), 0)


@dataclass
class MultiAdam:
    """Adam over a list of parameter arrays (one state per array)."""

    states: list[AdamState] = field(default_factory=list)

    @classmethod
    def for_params(cls, params) -> "MultiAdam":
        return cls([AdamState.zeros_like(p) for p in params])

    def step(self, params, grads, lr):
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.states[i], new = adam_step(self.states[i], p, g, lr)
            out.append(new)
        return out


def adam_step(state: AdamState, x, grad, alpha: float):
    """One bias-corrected Adam update; returns ``(new_state, new_x)``.

    The input state is left untouched.
    """
    g = np.asarray(grad, dtype=np.float64)
    step = state.step + 1
    m = ADAM_BETA1 * state.m + (1.0 - ADAM_BETA1) * g
    v = ADAM_BETA2 * state.v + (1.0 - ADAM_BETA2) * g * g
    m_hat = m / (1.0 - ADAM_BETA1**step)
    v_hat = v / (1.0 - ADAM_BETA2**step)
    new_x = np.asarray(x, dtype=np.float64) - alpha * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    return AdamState(m, v, step), new_x


def ifgsm_step(delta, grad, alpha: float) -> np.ndarray:
    """Signed-gradient descent step; sign(0) is 0."""
    return np.asarray(delta, dtype=np.float64) - alpha * np.sign(grad)
