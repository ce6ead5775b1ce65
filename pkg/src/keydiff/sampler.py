"""Generic DDPM reverse-chain sampling over a pluggable denoiser."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np

from keydiff.schedule import NoiseSchedule


@dataclass(frozen=True)
class ActionSpec:
    """Shape of the action vector the sampler operates on."""

    action_dim: int
    horizon: int = 1

    def __post_init__(self):
        if self.action_dim < 1 or self.horizon < 1:
            raise ValueError("action_dim and horizon must be >= 1")

    @property
    def flat_dim(self) -> int:
        return self.action_dim * self.horizon


@dataclass(frozen=True)
class Observation:
    """Fixed-length observation history, most recent state last."""

    history: np.ndarray  # (T_o, state_dim)

    def __post_init__(self):
        if self.history.ndim != 2:
            raise ValueError("observation history must be a (T_o, state_dim) array")

    @property
    def length(self) -> int:
        return self.history.shape[0]

    def flat(self) -> np.ndarray:
        return self.history.reshape(-1)

    @staticmethod
    def padded(states: list[np.ndarray], t_o: int, state_dim: int) -> "Observation":
        """Build a window of the last t_o states, zero-padded at the front."""
        tail = states[-t_o:] if states else []
        pad = t_o - len(tail)
        rows = [np.zeros(state_dim)] * pad + [np.asarray(s, dtype=np.float64) for s in tail]
        return Observation(history=np.stack(rows))


@dataclass(frozen=True)
class ReverseStepParams:
    """Gaussian parameters of one reverse transition, diagonal covariance."""

    mu: np.ndarray
    sigma_diag: np.ndarray
    step: int

    def __post_init__(self):
        if self.mu.shape != self.sigma_diag.shape or self.mu.ndim != 1:
            raise ValueError("mu and sigma_diag must be 1-d arrays of equal length")
        # The final transition (step 1) is deterministic, so zero variance is
        # legal there; every other step must have strictly positive variance.
        if np.any(self.sigma_diag < 0.0) or (self.step != 1 and np.any(self.sigma_diag == 0.0)):
            raise ValueError("reverse-step variances must be positive (nonnegative at step 1)")


class Denoiser(Protocol):
    """Maps (noisy sample, step, observation) to reverse-step Gaussian params.

    Implementations must be pure: a fixed (x_i, i, obs) always yields the
    same parameters.
    """

    def reverse_params(
        self, x_i: np.ndarray, i: int, obs: Observation | None, sched: NoiseSchedule
    ) -> ReverseStepParams:
        ...


def reverse_step_sample(params: ReverseStepParams, rng: np.random.Generator) -> np.ndarray:
    """Draw from N(mu, diag sigma); the final step (i=1) returns mu noiselessly."""
    if params.step == 1:
        return params.mu.copy()
    return params.mu + np.sqrt(params.sigma_diag) * rng.standard_normal(params.mu.shape)


def sample_chain(
    denoiser: Denoiser,
    obs: Observation | None,
    sched: NoiseSchedule,
    rng: np.random.Generator,
    dim: int,
) -> np.ndarray:
    """Run the full reverse chain from pure noise and return the end sample."""
    x = rng.standard_normal(dim)
    for i in range(sched.n_steps, 0, -1):
        params = denoiser.reverse_params(x, i, obs, sched)
        x = reverse_step_sample(params, rng)
    return x
