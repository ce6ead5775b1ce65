"""Keyframe-conditioned diffusion policies.

Noise schedules, DDPM reverse sampling, mask-based inpainting, and the
constrained inpainting projection, verified against exactly computable
Gaussian-mixture denoisers on toy manipulation environments.
"""

from keydiff.schedule import NoiseSchedule, build_schedule, forward_marginal_sample
from keydiff.sampler import (
    ActionSpec,
    Observation,
    ReverseStepParams,
    reverse_step_sample,
    sample_chain,
)
from keydiff.gmm import GmmModel
from keydiff.inpaint import HorizonConfig, Keyframe, Mask
from keydiff.constrained import ConstraintSchedule, ProjectionInstance

__all__ = [
    "NoiseSchedule",
    "build_schedule",
    "forward_marginal_sample",
    "ActionSpec",
    "Observation",
    "ReverseStepParams",
    "reverse_step_sample",
    "sample_chain",
    "GmmModel",
    "HorizonConfig",
    "Keyframe",
    "Mask",
    "ConstraintSchedule",
    "ProjectionInstance",
]
