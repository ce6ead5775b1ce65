"""Experiment command line: train, rollout, sweep-gamma, report.

Exit codes: 0 success, 2 config error, 3 runtime abort.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from keydiff import mlp
from keydiff.constrained import DEFAULT_GAMMA, ConstraintSchedule
from keydiff.envs import build_env, schedule_from_config
from keydiff.gmm import GmmDenoiser
from keydiff.keyframes import TaskSpec
from keydiff.runtime import EpisodeRecord, compute_metrics, default_provider, run_episode

CSV_SCHEMA_COMMENT = "# keydiff-csv v1"


class ConfigError(ValueError):
    """Invalid experiment configuration; message carries the field path."""


@dataclass
class ExperimentConfig:
    env: str = "detour2d"
    env_config: str | None = None
    denoiser: str = "gmm"  # "gmm" or "mlp:<checkpoint>"
    method: str = "disco"
    task: str | None = None
    gamma: float | None = None  # default resolved from the keyframe kind
    gamma_interpretation: str = "total"
    gamma_mode: str = "merged_projection"
    gamma_grid: list[float] = field(default_factory=list)
    trials: int = 50
    seed_base: int = 0
    out_dir: str = "out"
    keyframe_placement: str = "tail_broadcast"
    train: dict = field(default_factory=dict)

    def validate(self, for_sweep: bool = False):
        if self.env not in ("detour2d", "pose2d"):
            raise ConfigError(f"env: unknown environment {self.env!r}")
        if self.method not in ("unconditional", "vanilla", "disco"):
            raise ConfigError(f"method: unknown method {self.method!r}")
        if not (self.denoiser == "gmm" or self.denoiser.startswith("mlp:")):
            raise ConfigError(f"denoiser: must be 'gmm' or 'mlp:<checkpoint>', got {self.denoiser!r}")
        if self.trials < 1:
            raise ConfigError(f"trials: must be >= 1, got {self.trials}")
        if for_sweep and not self.gamma_grid:
            raise ConfigError("gamma_grid: must be non-empty for sweep runs")

    @staticmethod
    def load(args: argparse.Namespace) -> "ExperimentConfig":
        cfg = ExperimentConfig()
        if getattr(args, "config", None):
            with open(args.config) as f:
                data = json.load(f)
            for key, value in data.items():
                if not hasattr(cfg, key):
                    raise ConfigError(f"{key}: unknown config field")
                setattr(cfg, key, value)
        for key in vars(cfg):
            value = getattr(args, key, None)
            if value is not None:
                setattr(cfg, key, value)
        return cfg


def _build_runner(cfg: ExperimentConfig):
    env = build_env(cfg.env, cfg.env_config)
    sched = schedule_from_config(env.config)
    if cfg.denoiser == "gmm":
        denoiser = GmmDenoiser(env.data_gmm())
    else:
        denoiser = mlp.MlpDenoiser(mlp.load_checkpoint(cfg.denoiser.split(":", 1)[1]))
    provider = default_provider(env)
    instruction = cfg.task or env.config["tasks"]["seen"][0]
    task = TaskSpec(instruction=instruction, environment_id=env.env_id)
    gamma = cfg.gamma
    if gamma is None:
        kind = "position" if env.env_id == "pose2d" else "velocity"
        gamma = DEFAULT_GAMMA[kind]
    cs = ConstraintSchedule(
        gamma=gamma, interpretation=cfg.gamma_interpretation, mode=cfg.gamma_mode
    )
    return env, sched, denoiser, provider, task, cs


def _run_trials(cfg: ExperimentConfig, env, sched, denoiser, provider, task, cs):
    records = []
    for k in range(cfg.trials):
        records.append(
            run_episode(
                env,
                denoiser,
                provider,
                env.horizon,
                cs,
                sched,
                seed=cfg.seed_base + k,
                method=cfg.method,
                task=task,
                keyframe_placement=cfg.keyframe_placement,
            )
        )
    return records


def _rate_ci(rate: float, n: int) -> float:
    return 1.96 * math.sqrt(rate * (1.0 - rate) / n)


def _aggregate_row(cfg: ExperimentConfig, env, task, records) -> dict:
    metrics = [compute_metrics(r) for r in records]
    n = len(metrics)
    succ = sum(m["success"] for m in metrics) / n
    comp = sum(m["compliance"] for m in metrics) / n
    dkeys = [m["mean_d_key"] for m in metrics if m["mean_d_key"] is not None]
    seen = task.instruction in env.config["tasks"]["seen"]
    return {
        "method": cfg.method,
        "env": cfg.env,
        "task": task.instruction,
        "seen": int(seen),
        "trials": n,
        "success_rate": f"{succ:.6f}",
        "compliance_rate": f"{comp:.6f}",
        "success_ci": f"{_rate_ci(succ, n):.6f}",
        "compliance_ci": f"{_rate_ci(comp, n):.6f}",
        "mean_d_key": f"{np.mean(dkeys):.9g}" if dkeys else "",
    }


def _write_csv(path: Path, rows: list[dict]):
    with open(path, "w", newline="") as f:
        f.write(CSV_SCHEMA_COMMENT + "\n")
        writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)


def _write_svg(path: Path, gammas, series: dict[str, list[float]]):
    """Minimal self-contained line plot of rates versus log10(gamma)."""
    width, height, pad = 480, 320, 48
    xs = [math.log10(g) for g in gammas]
    x_lo, x_hi = min(xs), max(xs)
    span = (x_hi - x_lo) or 1.0

    def px(x):
        return pad + (x - x_lo) / span * (width - 2 * pad)

    def py(y):
        return height - pad - y * (height - 2 * pad)

    colors = {"compliance_rate": "#1f77b4", "success_rate": "#d62728", "both_rate": "#2ca02c"}
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{pad}" y1="{height-pad}" x2="{width-pad}" y2="{height-pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height-pad}" stroke="black"/>',
        f'<text x="{width//2}" y="{height-10}" font-size="12" text-anchor="middle">log10(gamma)</text>',
    ]
    for idx, (name, ys) in enumerate(sorted(series.items())):
        color = colors.get(name, "#777777")
        pts = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(xs, ys))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>')
        for x, y in zip(xs, ys):
            parts.append(f'<circle cx="{px(x):.2f}" cy="{py(y):.2f}" r="3" fill="{color}"/>')
        parts.append(
            f'<text x="{pad+8}" y="{pad+14*(idx+1)}" font-size="12" fill="{color}">{name}</text>'
        )
    parts.append("</svg>")
    path.write_text("\n".join(parts) + "\n")


def cmd_rollout(cfg: ExperimentConfig) -> int:
    cfg.validate()
    env, sched, denoiser, provider, task, cs = _build_runner(cfg)
    records = _run_trials(cfg, env, sched, denoiser, provider, task, cs)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "episodes.jsonl", "w") as f:
        for r in records:
            f.write(r.to_json() + "\n")
    _write_csv(out / "aggregate.csv", [_aggregate_row(cfg, env, task, records)])
    return 0


def cmd_sweep_gamma(cfg: ExperimentConfig) -> int:
    cfg.validate(for_sweep=True)
    env, sched, denoiser, provider, task, _ = _build_runner(cfg)
    stream_id = f"{cfg.seed_base}:{cfg.trials}"
    rows, dkey_rows = [], []
    per_seed_dkey: dict[int, list[float]] = {cfg.seed_base + k: [] for k in range(cfg.trials)}
    series: dict[str, list[float]] = {"compliance_rate": [], "success_rate": [], "both_rate": []}
    for gamma in cfg.gamma_grid:
        cs = ConstraintSchedule(
            gamma=float(gamma), interpretation=cfg.gamma_interpretation, mode=cfg.gamma_mode
        )
        records = _run_trials(cfg, env, sched, denoiser, provider, task, cs)
        metrics = [compute_metrics(r) for r in records]
        n = len(metrics)
        succ = sum(m["success"] for m in metrics) / n
        comp = sum(m["compliance"] for m in metrics) / n
        both = sum(m["success"] and m["compliance"] for m in metrics) / n
        dkeys = [m["mean_d_key"] for m in metrics if m["mean_d_key"] is not None]
        rows.append(
            {
                "gamma": f"{gamma:g}",
                "trials": n,
                "stream_id": stream_id,
                "success_rate": f"{succ:.6f}",
                "compliance_rate": f"{comp:.6f}",
                "both_rate": f"{both:.6f}",
                "mean_d_key": f"{np.mean(dkeys):.9g}" if dkeys else "",
            }
        )
        series["success_rate"].append(succ)
        series["compliance_rate"].append(comp)
        series["both_rate"].append(both)
        for r, m in zip(records, metrics):
            per_seed_dkey[r.seed].append(m["mean_d_key"])

    for seed in sorted(per_seed_dkey):
        row = {"seed": seed}
        for gamma, val in zip(cfg.gamma_grid, per_seed_dkey[seed]):
            row[f"g{gamma:g}"] = "" if val is None else f"{val:.12g}"
        dkey_rows.append(row)

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "sweep.csv", rows)
    _write_csv(out / "dkey.csv", dkey_rows)
    _write_svg(out / "sweep.svg", [float(g) for g in cfg.gamma_grid], series)
    return 0


def cmd_train(cfg: ExperimentConfig) -> int:
    cfg.validate()
    env = build_env(cfg.env, cfg.env_config)
    sched = schedule_from_config(env.config)
    t = cfg.train
    n_demos = int(t.get("n_demos", 20000))
    seed = int(t.get("seed", cfg.seed_base))
    rng = np.random.default_rng(seed)
    x0 = env.data_gmm().sample(rng, n_demos)
    # Observations match the rollout window: t_obs states, zero-padded in
    # front, with the initial state as the most recent entry.
    t_obs = env.horizon.t_obs
    obs = np.zeros((n_demos, t_obs * env.state_dim))
    for k in range(n_demos):
        obs[k, (t_obs - 1) * env.state_dim :] = env.reset(rng)
    config = mlp.TrainConfig(
        learning_rate=float(t.get("learning_rate", 1e-3)),
        batch_size=int(t.get("batch_size", 256)),
        epochs=int(t.get("epochs", 30)),
        seed=seed,
        optimizer=t.get("optimizer", "adam"),
        hidden=tuple(t.get("hidden", (64, 64))),
        ema_decay=t.get("ema_decay"),
    )
    params, losses = mlp.train(x0, obs, sched, config)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mlp.save_checkpoint(out / "checkpoint.bin", params, config)
    _write_csv(
        out / "losses.csv",
        [{"epoch": k + 1, "loss": f"{v:.9g}"} for k, v in enumerate(losses)]
        or [{"epoch": 0, "loss": ""}],
    )
    return 0


def cmd_report(inputs: list[str], out_path: str | None) -> int:
    if not inputs:
        raise ConfigError("inputs: at least one aggregate CSV is required")
    rows = []
    for path in inputs:
        with open(path) as f:
            lines = [ln for ln in f if not ln.startswith("#")]
        rows.extend(csv.DictReader(lines))
    if not rows:
        raise ConfigError("inputs: no data rows found")

    lines = ["# Rollout summary", ""]
    for seen, label in ((1, "Seen tasks"), (0, "Unseen tasks")):
        group = [r for r in rows if int(r["seen"]) == seen]
        if not group:
            continue
        lines += [f"## {label}", ""]
        lines.append("| method | env | task | success | compliance |")
        lines.append("|---|---|---|---|---|")
        for r in sorted(group, key=lambda r: (r["env"], r["task"], r["method"])):
            lines.append(
                f"| {r['method']} | {r['env']} | {r['task']} "
                f"| {float(r['success_rate']):.2f} | {float(r['compliance_rate']):.2f} |"
            )
        lines.append("")
    text = "\n".join(lines)
    if out_path:
        Path(out_path).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON experiment config; flags override fields")
    p.add_argument("--env", choices=["detour2d", "pose2d"])
    p.add_argument("--env-config", dest="env_config")
    p.add_argument("--denoiser")
    p.add_argument("--method", choices=["unconditional", "vanilla", "disco"])
    p.add_argument("--task")
    p.add_argument("--gamma", type=float)
    p.add_argument("--gamma-mode", dest="gamma_mode")
    p.add_argument("--gamma-interpretation", dest="gamma_interpretation")
    p.add_argument("--trials", type=int)
    p.add_argument("--seed-base", dest="seed_base", type=int)
    p.add_argument("--out-dir", dest="out_dir")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="keydiff")
    sub = parser.add_subparsers(dest="command", required=True)

    for name in ("rollout", "sweep-gamma", "train"):
        p = sub.add_parser(name)
        _add_common(p)
        if name == "sweep-gamma":
            p.add_argument(
                "--gamma-grid",
                dest="gamma_grid",
                type=lambda s: [float(x) for x in s.split(",")],
            )

    p = sub.add_parser("report")
    p.add_argument("inputs", nargs="*")
    p.add_argument("--out")

    args = parser.parse_args(argv)
    try:
        if args.command == "report":
            return cmd_report(args.inputs, args.out)
        cfg = ExperimentConfig.load(args)
        if args.command == "rollout":
            return cmd_rollout(cfg)
        if args.command == "sweep-gamma":
            return cmd_sweep_gamma(cfg)
        return cmd_train(cfg)
    except (ConfigError, FileNotFoundError, json.JSONDecodeError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # runtime abort
        print(f"runtime error: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
