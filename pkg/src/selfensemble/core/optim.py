"""Adaptive-moment gradient descent."""

from dataclasses import dataclass, field

import numpy as np


@dataclass
class OptimizerState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


def optimizer_step(state, parameters):
    """Apply one bias-corrected adaptive-moment update, then zero the gradients."""
    parameters = list(parameters)
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for i, p in enumerate(parameters):
        g = p.grad
        m = state.first_moment.get(i, np.zeros_like(p.data))
        v = state.second_moment.get(i, np.zeros_like(p.data))
        if m.shape != p.shape:
            raise ValueError(f"moment shape {m.shape} does not match parameter {p.name!r}")
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.first_moment[i], state.second_moment[i] = m, v
        update = state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.assign((p.data - update).astype(p.data.dtype))
    for p in parameters:
        p.zero_grad()
    return parameters


class Adam:
    """Thin holder pairing a parameter list with its :class:`OptimizerState`.

    Moments are keyed by parameter position, so the list order is fixed at
    construction.
    """

    def __init__(self, parameters, learning_rate=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.parameters = list(parameters)
        self.state = OptimizerState(learning_rate, beta1, beta2, eps)
        for i, p in enumerate(self.parameters):
            self.state.first_moment[i] = np.zeros_like(p.data)
            self.state.second_moment[i] = np.zeros_like(p.data)

    def zero_grad(self):
        for p in self.parameters:
            p.zero_grad()

    def step(self):
        optimizer_step(self.state, self.parameters)
