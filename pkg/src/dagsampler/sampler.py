"""Preconditioned stochastic-gradient MCMC with momentum.

One step, given the gradient of the (minibatch-scaled) energy at the current
position:

    V_t = beta2 V_{t-1} + (1 - beta2) grad^2
    g_t = 1 / sqrt(1 + sqrt(V_t))             (elementwise)
    r_t = beta1 r_{t-1} - l g_t grad + s sqrt(2 l ((1 - beta1)/l - l/2)) eta
    x_t = x_{t-1} + l g_t r_t

with eta standard normal.  The derivative of the preconditioner with respect
to position is treated as zero (V aggregates gradient history).  `s` may be a
per-coordinate vector so different state blocks can receive different injected
noise; s = 0 with beta1 = 0 reduces to deterministic preconditioned descent.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError


@dataclass
class SamplerState:
    """Position plus the running moments the update needs."""

    position: np.ndarray
    momentum: np.ndarray = None
    second_moment: np.ndarray = None
    step_count: int = 0

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        if self.momentum is None:
            self.momentum = np.zeros_like(self.position)
        if self.second_moment is None:
            self.second_moment = np.zeros_like(self.position)


@dataclass(frozen=True)
class SamplerHyper:
    """Step size, momentum/moment decay rates, injected-noise scale."""

    l: float
    beta1: float = 0.9
    beta2: float = 0.99
    s: float | np.ndarray = 1.0

    def __post_init__(self):
        if self.l <= 0:
            raise ConfigError(f"step size must be positive, got {self.l}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("decay rates must lie in [0, 1)")
        # friction must exceed the discretization correction B = l/2
        if (1.0 - self.beta1) / self.l <= self.l / 2.0:
            raise ConfigError(
                f"step size l={self.l} violates (1 - beta1)/l > l/2; decrease l"
            )

    @property
    def noise_coeff(self) -> float:
        return float(np.sqrt(2.0 * self.l * ((1.0 - self.beta1) / self.l - self.l / 2.0)))


def sgmcmc_step(
    state: SamplerState,
    grad: np.ndarray,
    hyper: SamplerHyper,
    rng: np.random.Generator,
) -> SamplerState:
    """Advance one step in place; returns the same state object."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != state.position.shape:
        raise ConfigError(
            f"gradient shape {grad.shape} does not match state {state.position.shape}"
        )
    V = state.second_moment
    V *= hyper.beta2
    V += (1.0 - hyper.beta2) * grad * grad
    g = 1.0 / np.sqrt(1.0 + np.sqrt(V))
    r = state.momentum
    r *= hyper.beta1
    r -= hyper.l * g * grad
    r += hyper.s * hyper.noise_coeff * rng.normal(size=r.shape)
    state.position += hyper.l * g * r
    state.step_count += 1
    return state
