"""Keyframe providers: scripted rule tables and multi-view triangulation.

The scripted provider is the deterministic stand-in used by all
correctness tests; the HTTP-backed provider lives in keydiff.vlm.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass

import numpy as np

from keydiff.inpaint import Keyframe


class NoRuleError(KeyError):
    """Raised when an instruction matches no rule; never guessed silently."""


class DegenerateGeometryError(ValueError):
    """Raised when triangulation rays are parallel or views coincide."""


@dataclass(frozen=True)
class TaskSpec:
    instruction: str
    task_id: str = ""
    environment_id: str = ""
    seen: bool = True

    def __post_init__(self):
        if not self.instruction.strip():
            raise ValueError("instruction must be non-empty")


@dataclass(frozen=True)
class KeyStep:
    ordinal: int
    description: str


@dataclass(frozen=True)
class KeyPoint:
    view_id: str
    u: float
    v: float
    confidence: str = "normal"


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera: intrinsics plus a world-to-camera pose."""

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray  # (3, 3), world -> camera
    translation: np.ndarray  # (3,)
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        R = self.rotation
        if R.shape != (3, 3) or np.max(np.abs(R @ R.T - np.eye(3))) > 1e-9:
            raise ValueError("rotation must be orthonormal within 1e-9")

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def project(self, point: np.ndarray) -> tuple[float, float]:
        """World point to pixel coordinates."""
        pc = self.rotation @ point + self.translation
        if pc[2] <= 0:
            raise ValueError("point behind camera")
        return (
            float(self.fx * pc[0] / pc[2] + self.cx),
            float(self.fy * pc[1] / pc[2] + self.cy),
        )

    def ray(self, u: float, v: float) -> np.ndarray:
        """Unit direction in world coordinates of the back-projected pixel."""
        d = np.array([(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0])
        d = self.rotation.T @ d
        return d / np.linalg.norm(d)

    def contains(self, u: float, v: float) -> bool:
        return 0.0 <= u < self.width and 0.0 <= v < self.height


def triangulate(
    points: list[KeyPoint], cameras: list[CameraModel], cond_threshold: float = 1e-8
) -> tuple[np.ndarray, float]:
    """Least-squares midpoint of the back-projected rays.

    Minimizes the sum of squared distances to all rays; returns the point
    and the worst reprojection residual in pixels.
    """
    if len(points) < 2 or len(points) != len(cameras):
        raise ValueError("triangulation needs >= 2 view/camera pairs")
    A = np.zeros((3, 3))
    b = np.zeros(3)
    for kp, cam in zip(points, cameras):
        if not cam.contains(kp.u, kp.v):
            raise ValueError(f"pixel ({kp.u}, {kp.v}) outside view {kp.view_id}")
        d = cam.ray(kp.u, kp.v)
        P = np.eye(3) - np.outer(d, d)
        A += P
        b += P @ cam.center
    w = np.linalg.eigvalsh(A)
    if w[0] < cond_threshold * max(w[-1], 1.0):
        raise DegenerateGeometryError("rays are parallel or views coincide")
    x = np.linalg.solve(A, b)
    residual = max(
        float(np.hypot(*(np.array(cam.project(x)) - np.array([kp.u, kp.v]))))
        for kp, cam in zip(points, cameras)
    )
    return x, residual


def to_action_keyframe(
    point: np.ndarray,
    kind: str,
    *,
    origin: np.ndarray | None = None,
    speed: float = 1.0,
    joint_table: dict[str, np.ndarray] | None = None,
    joint_name: str | None = None,
) -> Keyframe:
    """Map an environment point into the action space.

    Positions map directly; velocities are the unit direction from origin
    scaled by the configured speed; joints go through a per-env table.
    """
    point = np.asarray(point, dtype=np.float64)
    if kind == "position":
        return Keyframe(value=point, kind="position", advance_target=point)
    if kind == "velocity":
        ref = np.zeros_like(point) if origin is None else np.asarray(origin, dtype=np.float64)
        direction = point - ref
        norm = np.linalg.norm(direction)
        if norm == 0.0:
            raise ValueError("velocity keyframe requires a non-zero direction")
        return Keyframe(value=speed * direction / norm, kind="velocity", advance_target=point)
    if kind == "joint":
        if joint_table is None or joint_name not in (joint_table or {}):
            raise ValueError("environment has no joint table entry for this keyframe")
        return Keyframe(value=np.asarray(joint_table[joint_name], dtype=np.float64), kind="joint")
    raise ValueError(f"unsupported keyframe kind {kind!r}")


class ScriptedProvider:
    """Declarative instruction-pattern -> keyframe rules, one file per env.

    Rule file schema: {"environments": {env_id: {"rules": [{"patterns":
    [...], "keyframes": [spec, ...]}]}}}. A keyframe spec either names a
    declared entry of the environment's keyframe table ({"ref": name}) or
    carries an inline value. Matching is case-insensitive substring.
    """

    def __init__(self, rules: dict, keyframe_tables: dict[str, dict]):
        self.rules = rules
        self.keyframe_tables = keyframe_tables

    @staticmethod
    def from_files(rule_path, env_tables: dict[str, dict]) -> "ScriptedProvider":
        with open(rule_path) as f:
            return ScriptedProvider(json.load(f), env_tables)

    def __call__(self, task: TaskSpec, env_state: np.ndarray) -> list[Keyframe]:
        env_rules = self.rules.get("environments", {}).get(task.environment_id)
        if env_rules is None:
            raise NoRuleError(f"no rules for environment {task.environment_id!r}")
        text = re.sub(r"\s+", " ", task.instruction.lower()).strip()
        for rule in env_rules["rules"]:
            if any(p.lower() in text for p in rule["patterns"]):
                return [self._resolve(spec, task) for spec in rule["keyframes"]]
        raise NoRuleError(f"no rule matches instruction {task.instruction!r}")

    def _resolve(self, spec: dict, task: TaskSpec) -> Keyframe:
        if "ref" in spec:
            table = self.keyframe_tables.get(task.environment_id, {})
            if spec["ref"] not in table:
                raise NoRuleError(f"keyframe table has no entry {spec['ref']!r}")
            spec = table[spec["ref"]]
        return Keyframe(
            value=np.asarray(spec["value"], dtype=np.float64),
            kind=spec.get("kind", "position"),
            component_mask=None
            if spec.get("component_mask") is None
            else np.asarray(spec["component_mask"], dtype=bool),
            advance_target=None
            if spec.get("advance_target") is None
            else np.asarray(spec["advance_target"], dtype=np.float64),
        )
