"""Masks, keyframes, and the single-pass mask-merge inpainting step."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from keydiff.sampler import ActionSpec, ReverseStepParams, reverse_step_sample
from keydiff.schedule import NoiseSchedule


@dataclass(frozen=True)
class Mask:
    """Binary known/unknown pattern over the flattened action vector; 1 = known."""

    bits: np.ndarray

    def __post_init__(self):
        b = self.bits
        if b.ndim != 1 or not np.all((b == 0) | (b == 1)):
            raise ValueError("mask bits must be a 1-d 0/1 vector")
        if np.all(b == 1):
            raise ValueError("mask must leave at least one entry unknown")

    @property
    def known(self) -> np.ndarray:
        return self.bits.astype(bool)

    @property
    def unknown(self) -> np.ndarray:
        return ~self.known


@dataclass(frozen=True)
class Keyframe:
    """Coarse action-space target pinned into the known region."""

    value: np.ndarray
    kind: str = "position"  # position | velocity | joint
    component_mask: np.ndarray | None = None  # over action_dim, for single-shot pins
    advance_target: np.ndarray | None = None  # state-space anchor for sequencing

    def __post_init__(self):
        if self.kind not in ("position", "velocity", "joint"):
            raise ValueError(f"unknown keyframe kind {self.kind!r}")
        if not np.all(np.isfinite(self.value)):
            raise ValueError("keyframe values must be finite")
        if self.component_mask is not None and not np.any(self.component_mask):
            raise ValueError("component mask must select at least one component")


@dataclass(frozen=True)
class HorizonConfig:
    """Receding-horizon lengths: observe T_o, execute T_a, predict T_p."""

    t_obs: int
    t_act: int
    t_pred: int

    def __post_init__(self):
        if min(self.t_obs, self.t_act, self.t_pred) < 1:
            raise ValueError("all horizon lengths must be positive")


def build_horizon_mask(h: HorizonConfig, action_dim: int) -> Mask:
    """Timestep mask for trajectory tasks: zeros before step T_o + T_a - 1, ones after."""
    cut = h.t_obs + h.t_act - 1
    if h.t_pred <= cut:
        raise ValueError(
            f"prediction horizon {h.t_pred} must exceed t_obs + t_act - 1 = {cut}"
        )
    per_step = np.zeros(h.t_pred, dtype=np.int64)
    per_step[cut:] = 1
    return Mask(bits=np.repeat(per_step, action_dim))


def component_mask(kf: Keyframe, action_dim: int) -> Mask:
    """Mask for single-shot tasks pinning only the keyframe's components."""
    if kf.component_mask is None:
        raise ValueError("keyframe has no component mask")
    bits = np.asarray(kf.component_mask, dtype=np.int64)
    if bits.shape != (action_dim,):
        raise ValueError(f"component mask must have shape ({action_dim},)")
    return Mask(bits=bits)


def broadcast_keyframe(kf: Keyframe, mask: Mask, spec: ActionSpec) -> np.ndarray:
    """Write the keyframe value into every masked slot; unmasked slots stay zero.

    The default ("tail-broadcast") places the value at every known timestep.
    """
    if kf.value.shape[0] != spec.action_dim:
        raise ValueError("keyframe dimension does not match the action spec")
    if mask.bits.shape[0] != spec.flat_dim:
        raise ValueError("mask length does not match the action spec")
    tiled = np.tile(kf.value, spec.horizon)
    return np.where(mask.known, tiled, 0.0)


def single_step_keyframe(kf: Keyframe, mask: Mask, spec: ActionSpec) -> tuple[np.ndarray, Mask]:
    """Alternative placement: pin only the final known timestep.

    Returns the known vector together with the narrowed mask. Tail-broadcast
    over-constrains velocity-style actions; this keeps one pinned step.
    """
    per_step = mask.bits.reshape(spec.horizon, spec.action_dim)
    known_steps = np.where(per_step.any(axis=1))[0]
    if known_steps.size == 0:
        raise ValueError("mask has no known timesteps")
    narrowed = np.zeros_like(per_step)
    narrowed[known_steps[-1]] = per_step[known_steps[-1]]
    m = Mask(bits=narrowed.reshape(-1))
    return broadcast_keyframe(kf, m, spec), m


def sample_known(
    a0_known: np.ndarray,
    mask: Mask,
    i: int,
    sched: NoiseSchedule,
    rng: np.random.Generator,
) -> np.ndarray:
    """Noise the clean known vector to the level of step i-1.

    Uses alpha_bar at index i-1 (alpha_bar(0) = 1, so the terminal step
    returns the clean values). Unmasked entries are never read downstream.
    """
    sched._check_step(i)
    ab = sched.alpha_bar(i - 1)
    eps = rng.standard_normal(a0_known.shape)
    return np.sqrt(ab) * a0_known + np.sqrt(1.0 - ab) * eps


def vanilla_inpaint_step(
    rp: ReverseStepParams,
    known_sample: np.ndarray,
    mask: Mask,
    rng: np.random.Generator,
) -> np.ndarray:
    """Merge the noised known part with a reverse sample on the unknown part."""
    if known_sample.shape != rp.mu.shape or mask.bits.shape != rp.mu.shape:
        raise ValueError("dimension mismatch between mask, known sample, and params")
    unknown_sample = reverse_step_sample(rp, rng)
    return np.where(mask.known, known_sample, unknown_sample)
