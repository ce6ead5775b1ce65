"""Receding-horizon policy execution with keyframe-conditioned generation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from keydiff.constrained import (
    ConstraintSchedule,
    StepDiagnostics,
    constrained_inpaint_step,
    keyframe_distance,
)
from keydiff.inpaint import (
    HorizonConfig,
    Keyframe,
    Mask,
    broadcast_keyframe,
    build_horizon_mask,
    component_mask,
    sample_known,
    single_step_keyframe,
    vanilla_inpaint_step,
)
from keydiff.keyframes import ScriptedProvider, TaskSpec
from keydiff.sampler import Observation, reverse_step_sample
from keydiff.schedule import NoiseSchedule

METHODS = ("unconditional", "vanilla", "disco")

# Effectively-infinite budget used for steps outside the projection window;
# keeps the rng stream identical while disabling the constraint.
INACTIVE_GAMMA = 1e6

DEFAULT_ADVANCE_TOL = 0.05
DEFAULT_SUBTASK_BUDGET = 100


def default_provider(env) -> ScriptedProvider:
    """Scripted provider wired to the packaged rule file and the env's table."""
    rules = json.loads(resources.files("keydiff").joinpath("data/rules.json").read_text())
    table = {k: v for k, v in env.keyframe_table().items() if isinstance(v, dict)}
    return ScriptedProvider(rules, {env.env_id: table})


@dataclass
class EpisodeRecord:
    """One rollout: everything needed to recompute its metrics."""

    task_id: str
    instruction: str
    environment_id: str
    seed: int
    keyframes: list[dict] = field(default_factory=list)
    provider_name: str = "scripted"
    predicted: list[list[float]] = field(default_factory=list)  # per-cycle a_0
    executed: list[list[float]] = field(default_factory=list)
    states: list[list[float]] = field(default_factory=list)
    diagnostics: list[dict] = field(default_factory=list)  # projection events only
    keyframe_advances: list[dict] = field(default_factory=list)
    d_key_per_cycle: list[float] = field(default_factory=list)
    success: bool = False
    compliance: bool = False
    env_steps: int = 0
    aborted: str = ""

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "EpisodeRecord":
        return EpisodeRecord(**json.loads(text))


def advance_keyframe(
    state: np.ndarray,
    kf: Keyframe,
    steps_on_keyframe: int,
    tol: float = DEFAULT_ADVANCE_TOL,
    budget: int = DEFAULT_SUBTASK_BUDGET,
) -> tuple[bool, str]:
    """Whether to move to the next keyframe, and why ("reached" or "budget")."""
    anchor = kf.advance_target if kf.advance_target is not None else kf.value
    if anchor.shape == np.asarray(state).shape and np.linalg.norm(state - anchor) <= tol:
        return True, "reached"
    if steps_on_keyframe >= budget:
        return True, "budget"
    return False, ""


def _mask_and_known(env, kf: Keyframe, h: HorizonConfig, placement: str) -> tuple[Mask, np.ndarray]:
    spec = env.action_spec
    if spec.horizon == 1:
        m = component_mask(kf, spec.action_dim)
        return m, np.where(m.known, kf.value, 0.0)
    m = build_horizon_mask(h, spec.action_dim)
    if placement == "single_step":
        known, m = single_step_keyframe(kf, m, spec)
        return m, known
    return m, broadcast_keyframe(kf, m, spec)


def run_episode(
    env,
    denoiser,
    provider,
    h: HorizonConfig,
    cs: ConstraintSchedule,
    sched: NoiseSchedule,
    seed: int,
    method: str,
    task: TaskSpec | None = None,
    keyframe_placement: str = "tail_broadcast",
    max_env_steps: int | None = None,
) -> EpisodeRecord:
    """Run one rollout of the receding-horizon loop.

    Keyframes are computed once from the initial observation. Per cycle the
    chain runs from pure noise, applies the per-step rule of the selected
    method, and the executed slice is prediction indices
    [t_obs - 1, t_obs - 1 + t_act).
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    if task is None:
        task = TaskSpec(
            instruction=env.config["tasks"]["seen"][0], environment_id=env.env_id
        )

    rng = np.random.default_rng(seed)
    spec = env.action_spec
    d = spec.flat_dim
    budget = env.max_env_steps if max_env_steps is None else max_env_steps

    record = EpisodeRecord(
        task_id=task.task_id,
        instruction=task.instruction,
        environment_id=env.env_id,
        seed=seed,
    )

    state = env.reset(rng)
    states = [np.asarray(state, dtype=np.float64)]
    record.states.append(states[0].tolist())

    keyframes: list[Keyframe] = []
    if method != "unconditional":
        keyframes = provider(task, state)
        record.keyframes = [
            {"kind": kf.kind, "value": kf.value.tolist()} for kf in keyframes
        ]
        active = 0
        mask, a0_known = _mask_and_known(env, keyframes[active], h, keyframe_placement)
        steps_on_kf = 0

    done = False
    while not done and record.env_steps < budget:
        obs = Observation.padded(states, h.t_obs, env.state_dim)
        x = rng.standard_normal(d)
        diags: list[StepDiagnostics] = []
        for i in range(sched.n_steps, 0, -1):
            rp = denoiser.reverse_params(x, i, obs, sched)
            if method == "unconditional":
                x = reverse_step_sample(rp, rng)
            elif method == "vanilla":
                known = sample_known(a0_known, mask, i, sched, rng)
                x = vanilla_inpaint_step(rp, known, mask, rng)
            else:
                gamma_i = (
                    cs.gamma_at(i, d) if cs.active_at(i) else INACTIVE_GAMMA
                )
                x = constrained_inpaint_step(
                    rp, a0_known, mask, gamma_i, cs.mode, rng, sched, diag_out=diags
                )
        if not np.all(np.isfinite(x)):
            record.aborted = "non-finite action sample"
            break

        record.predicted.append(x.tolist())
        if method != "unconditional":
            record.d_key_per_cycle.append(keyframe_distance(x, a0_known, mask))
        for dg in diags:
            if not dg.candidate_feasible:
                record.diagnostics.append(
                    {
                        "step": dg.step,
                        "gamma_prime": dg.gamma_prime,
                        "lambda": dg.lam,
                        "status": dg.status,
                    }
                )

        plan = x.reshape(spec.horizon, spec.action_dim)
        offset = h.t_obs - 1
        for t in range(h.t_act):
            action = plan[offset + t]
            state = env.step(state, action)
            if not np.all(np.isfinite(state)):
                record.aborted = "non-finite environment state"
                done = True
                break
            states.append(np.asarray(state, dtype=np.float64))
            record.states.append(states[-1].tolist())
            record.executed.append(action.tolist())
            record.env_steps += 1
            if method != "unconditional":
                steps_on_kf += 1
            if env.is_success(states):
                done = True
                break
            if record.env_steps >= budget:
                done = True
                break

        if method != "unconditional" and not done and len(keyframes) > 1:
            should, reason = advance_keyframe(state, keyframes[active], steps_on_kf)
            if should and active < len(keyframes) - 1:
                active += 1
                steps_on_kf = 0
                mask, a0_known = _mask_and_known(env, keyframes[active], h, keyframe_placement)
                record.keyframe_advances.append(
                    {"to": active, "reason": reason, "env_step": record.env_steps}
                )

    record.success = bool(env.is_success(states)) and not record.aborted
    record.compliance = bool(env.compliance(states, task.instruction)) if len(states) > 1 else False
    return record


def compute_metrics(record: EpisodeRecord) -> dict:
    """Pure summary of one episode record."""
    return {
        "success": record.success,
        "compliance": record.compliance,
        "env_steps": record.env_steps,
        "mean_d_key": float(np.mean(record.d_key_per_cycle)) if record.d_key_per_cycle else None,
        "min_d_key": float(np.min(record.d_key_per_cycle)) if record.d_key_per_cycle else None,
    }
