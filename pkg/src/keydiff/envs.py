"""Toy manipulation environments with exactly-declared demonstration laws.

Each environment declares its demonstration distribution as a diagonal
Gaussian mixture over the flattened action vector, so the analytic
denoiser needs no training and every statistic has a ground truth.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources

import numpy as np

from keydiff.gmm import GmmModel
from keydiff.inpaint import HorizonConfig
from keydiff.sampler import ActionSpec
from keydiff.schedule import NoiseSchedule, build_schedule


def load_env_config(env_id: str, path=None) -> dict:
    """Load an environment config; defaults ship as package data."""
    if path is not None:
        with open(path) as f:
            return json.load(f)
    try:
        text = resources.files("keydiff").joinpath(f"data/{env_id}.json").read_text()
    except FileNotFoundError:
        raise ValueError(f"unknown environment id {env_id!r}") from None
    return json.loads(text)


def schedule_from_config(cfg: dict) -> NoiseSchedule:
    s = cfg["schedule"]
    return build_schedule(s["kind"], s["n_steps"], s["beta_lo"], s.get("beta_hi"))


@dataclass
class Detour2DEnv:
    """Point-mass agent detours a central obstacle disc to reach a target.

    Actions are per-step 2D velocities; demonstrations are two arc modes
    (left/right semicircles) in trajectory space.
    """

    config: dict

    env_id = "detour2d"

    @property
    def state_dim(self) -> int:
        return 2

    @property
    def action_spec(self) -> ActionSpec:
        return ActionSpec(action_dim=2, horizon=self.config["horizon"]["t_pred"])

    @property
    def horizon(self) -> HorizonConfig:
        h = self.config["horizon"]
        return HorizonConfig(t_obs=h["t_obs"], t_act=h["t_act"], t_pred=h["t_pred"])

    @property
    def max_env_steps(self) -> int:
        return self.config["max_env_steps"]

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        start = np.asarray(self.config["start"], dtype=np.float64)
        return start + self.config["start_noise"] * rng.standard_normal(2)

    def step(self, state: np.ndarray, action: np.ndarray) -> np.ndarray:
        return state + action

    def arc_positions(self, side: str) -> np.ndarray:
        """Semicircle waypoints from start to target around the obstacle."""
        n = self.config["horizon"]["t_act"]
        s = np.linspace(0.0, 1.0, n + 1)
        sign = -1.0 if side == "left" else 1.0
        xs = sign * np.sin(np.pi * s)
        ys = -np.cos(np.pi * s)
        return np.stack([xs, ys], axis=1)

    def mode_mean(self, side: str) -> np.ndarray:
        """Flattened velocity sequence of one demonstration mode.

        The executed steps trace the arc; the tail steps repeat the exit
        heading, which is what the keyframe pins.
        """
        pos = self.arc_positions(side)
        vel = np.diff(pos, axis=0)  # (t_act, 2)
        tail_len = self.config["horizon"]["t_pred"] - vel.shape[0]
        exit_heading = self.exit_heading(side)
        tail = np.tile(exit_heading, (tail_len, 1))
        return np.concatenate([vel, tail], axis=0).reshape(-1)

    def exit_heading(self, side: str) -> np.ndarray:
        chord = 2.0 * np.sin(np.pi / (2 * self.config["horizon"]["t_act"]))
        sign = 1.0 if side == "left" else -1.0
        return np.array([sign * chord, 0.0])

    def data_gmm(self) -> GmmModel:
        d = self.action_spec.flat_dim
        var = self.config["demo_sigma"] ** 2
        return GmmModel.create(
            weights=[0.5, 0.5],
            means=[self.mode_mean("left"), self.mode_mean("right")],
            vars=[[var] * d, [var] * d],
        )

    def keyframe_table(self) -> dict:
        speed = float(np.linalg.norm(self.exit_heading("left")))
        return {
            "left_exit": {
                "kind": "velocity",
                "value": self.exit_heading("left").tolist(),
                "advance_target": self.config["target"],
            },
            "right_exit": {
                "kind": "velocity",
                "value": self.exit_heading("right").tolist(),
                "advance_target": self.config["target"],
            },
            "speed": speed,
        }

    def is_success(self, states: list[np.ndarray]) -> bool:
        return self.reached_target(states) and not self.hit_obstacle(states)

    def reached_target(self, states) -> bool:
        target = np.asarray(self.config["target"])
        r = self.config["target_radius"]
        return any(np.linalg.norm(s - target) <= r for s in states)

    def hit_obstacle(self, states) -> bool:
        center = np.asarray(self.config["obstacle_center"])
        r = self.config["obstacle_radius"]
        return any(np.linalg.norm(s - center) < r for s in states)

    def path_side(self, states) -> str:
        """Which side of the obstacle the path passed: signed-area test."""
        center = np.asarray(self.config["obstacle_center"])
        area = 0.0
        for a, b in zip(states[:-1], states[1:]):
            pa, pb = a - center, b - center
            area += pa[0] * pb[1] - pa[1] * pb[0]
        return "left" if area < 0.0 else "right"

    def compliance(self, states, task_instruction: str) -> bool:
        text = task_instruction.lower()
        want = "left" if "left" in text else "right"
        return self.path_side(states) == want


@dataclass
class Pose2DEnv:
    """Single-shot pose generation: pick a grasp pose (x, y, theta) on an object.

    Demonstrations have two modes, the rim and handle regions of a declared
    planar object; a keyframe pins (x, y) only, leaving theta free.
    """

    config: dict

    env_id = "pose2d"

    @property
    def state_dim(self) -> int:
        return 3

    @property
    def action_spec(self) -> ActionSpec:
        return ActionSpec(action_dim=3, horizon=1)

    @property
    def horizon(self) -> HorizonConfig:
        return HorizonConfig(t_obs=1, t_act=1, t_pred=1)

    @property
    def max_env_steps(self) -> int:
        return 1

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        return np.zeros(3)

    def step(self, state: np.ndarray, action: np.ndarray) -> np.ndarray:
        return np.asarray(action, dtype=np.float64)

    def data_gmm(self) -> GmmModel:
        modes = self.config["modes"]
        var = self.config["demo_sigma"] ** 2
        theta_var = self.config["theta_sigma"] ** 2
        return GmmModel.create(
            weights=[m["weight"] for m in modes.values()],
            means=[m["mean"] for m in modes.values()],
            vars=[[var, var, theta_var] for _ in modes],
        )

    def keyframe_table(self) -> dict:
        table = {}
        for name, kf in self.config["keyframes"].items():
            table[name] = {
                "kind": "position",
                "value": kf["value"],
                "component_mask": kf.get("component_mask", [1, 1, 0]),
            }
        return table

    def is_success(self, states) -> bool:
        pose = np.asarray(states[-1])[:2]
        r = self.config["success_radius"]
        return any(
            np.linalg.norm(pose - np.asarray(m["mean"])[:2]) <= r
            for m in self.config["modes"].values()
        )

    def compliance(self, states, task_instruction: str) -> bool:
        pose = np.asarray(states[-1])[:2]
        name = self._instructed_keyframe(task_instruction)
        anchor = np.asarray(self.config["keyframes"][name]["value"])[:2]
        return bool(np.linalg.norm(pose - anchor) <= self.config["compliance_radius"])

    def nearest_mode(self, pose: np.ndarray) -> str:
        names = list(self.config["modes"])
        dists = [
            np.linalg.norm(np.asarray(pose)[:2] - np.asarray(self.config["modes"][n]["mean"])[:2])
            for n in names
        ]
        return names[int(np.argmin(dists))]

    def _instructed_keyframe(self, text: str) -> str:
        text = text.lower()
        for name in sorted(self.config["keyframes"], key=len, reverse=True):
            if name.replace("_", " ") in text:
                return name
        raise ValueError(f"instruction {text!r} names no keyframe")


ENV_BUILDERS = {"detour2d": Detour2DEnv, "pose2d": Pose2DEnv}


def build_env(env_id: str, config_path=None):
    if env_id not in ENV_BUILDERS:
        raise ValueError(f"unknown environment id {env_id!r}")
    return ENV_BUILDERS[env_id](load_env_config(env_id, config_path))


def detour2d_env(config: dict | None = None) -> Detour2DEnv:
    return Detour2DEnv(config or load_env_config("detour2d"))


def pose2d_env(config: dict | None = None) -> Pose2DEnv:
    return Pose2DEnv(config or load_env_config("pose2d"))
