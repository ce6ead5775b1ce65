"""Noise schedules and the forward diffusion marginal."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance schedule tables, indexed by diffusion step i = 1..N.

    All arrays have length N and are stored with index 0 holding step 1.
    ``alpha_bar(0)`` is defined as 1 (clean data).
    """

    n_steps: int
    betas: np.ndarray
    alphas: np.ndarray = field(repr=False)
    alpha_bars: np.ndarray = field(repr=False)
    posterior_vars: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError(f"n_steps must be >= 1, got {self.n_steps}")
        for name in ("betas", "alphas", "alpha_bars", "posterior_vars"):
            arr = getattr(self, name)
            if arr.shape != (self.n_steps,):
                raise ValueError(f"{name} must have shape ({self.n_steps},)")
        if np.any(self.betas <= 0.0) or np.any(self.betas >= 1.0):
            raise ValueError("betas must lie in the open interval (0, 1)")

    def alpha_bar(self, i: int) -> float:
        """Cumulative product of alphas up to step i, with alpha_bar(0) == 1."""
        if not 0 <= i <= self.n_steps:
            raise ValueError(f"step {i} outside [0, {self.n_steps}]")
        return 1.0 if i == 0 else float(self.alpha_bars[i - 1])

    def beta(self, i: int) -> float:
        self._check_step(i)
        return float(self.betas[i - 1])

    def alpha(self, i: int) -> float:
        self._check_step(i)
        return float(self.alphas[i - 1])

    def posterior_var(self, i: int) -> float:
        """Variance of the fixed reverse kernel at step i (beta-tilde)."""
        self._check_step(i)
        return float(self.posterior_vars[i - 1])

    def _check_step(self, i: int):
        if not 1 <= i <= self.n_steps:
            raise ValueError(f"step {i} outside [1, {self.n_steps}]")


def build_schedule(
    kind: str,
    n_steps: int,
    beta_lo: float,
    beta_hi: float | None = None,
    betas: np.ndarray | None = None,
) -> NoiseSchedule:
    """Build a noise schedule of the given kind.

    kind "linear" interpolates beta from beta_lo to beta_hi over n_steps;
    "constant" uses beta_lo throughout; "custom" takes an explicit beta
    array (beta_lo/beta_hi ignored).
    """
    if n_steps < 1:
        raise ValueError(f"n_steps must be >= 1, got {n_steps}")
    if kind == "linear":
        if beta_hi is None:
            raise ValueError("linear schedule requires beta_hi")
        if not 0.0 < beta_lo <= beta_hi < 1.0:
            raise ValueError(f"need 0 < beta_lo <= beta_hi < 1, got ({beta_lo}, {beta_hi})")
        if n_steps == 1:
            b = np.array([beta_lo], dtype=np.float64)
        else:
            b = np.linspace(beta_lo, beta_hi, n_steps, dtype=np.float64)
    elif kind == "constant":
        if not 0.0 < beta_lo < 1.0:
            raise ValueError(f"beta must lie in (0, 1), got {beta_lo}")
        b = np.full(n_steps, beta_lo, dtype=np.float64)
    elif kind == "custom":
        if betas is None:
            raise ValueError("custom schedule requires an explicit betas array")
        b = np.asarray(betas, dtype=np.float64)
        if b.shape != (n_steps,):
            raise ValueError(f"betas must have shape ({n_steps},)")
        if np.any(b <= 0.0) or np.any(b >= 1.0):
            raise ValueError("betas must lie in the open interval (0, 1)")
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")

    alphas = 1.0 - b
    alpha_bars = np.cumprod(alphas)
    # beta_tilde_i = (1 - abar_{i-1}) / (1 - abar_i) * beta_i, with abar_0 = 1.
    prev = np.concatenate(([1.0], alpha_bars[:-1]))
    posterior_vars = (1.0 - prev) / (1.0 - alpha_bars) * b
    return NoiseSchedule(
        n_steps=n_steps,
        betas=b,
        alphas=alphas,
        alpha_bars=alpha_bars,
        posterior_vars=posterior_vars,
    )


def forward_marginal_sample(
    x0: np.ndarray, i: int, sched: NoiseSchedule, rng: np.random.Generator
) -> np.ndarray:
    """Sample x_i directly from the forward marginal q(x_i | x_0)."""
    sched._check_step(i)
    x0 = np.asarray(x0, dtype=np.float64)
    ab = sched.alpha_bar(i)
    eps = rng.standard_normal(x0.shape)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def forward_single_step(
    x_prev: np.ndarray, i: int, sched: NoiseSchedule, rng: np.random.Generator
) -> np.ndarray:
    """One forward transition q(x_i | x_{i-1}); composing these matches the marginal."""
    sched._check_step(i)
    x_prev = np.asarray(x_prev, dtype=np.float64)
    b = sched.beta(i)
    return np.sqrt(1.0 - b) * x_prev + np.sqrt(b) * rng.standard_normal(x_prev.shape)
