"""Experiment orchestration: run configs, train/eval/compare/render commands and the CLI."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .coordination import (
    ChannelModel, EpisodeConfig, EvalController, RandomController, TrainingSession, read_trajectory, run_episode,
    write_trajectory,
)
from .environment import EnvironmentSpec, RobotKind, Task, generate_environment, receptacle_cells, team_label
from .gridcore import OBSTACLE, bresenham, write_ppm
from .learner import CheckpointError, Policy, TrainConfig, load_checkpoint, save_checkpoint, select_action
from .perception import (
    IntentionVariant, PerceptionError, base_channel_names, channel_names, default_crop_size, dump_state_channels,
    state_manifest,
)
from .predictor import load_predictor, save_predictor

log = logging.getLogger(__name__)

# Column order of comparison tables.
VARIANT_ORDER = tuple(v.value for v in IntentionVariant)

# Eval tick budgets per (team, layout, width, height); unlisted configs fall back to default_tick_budget.
TICK_BUDGETS = {
    ("1R", "SmallEmpty", 10, 10): 30,
    ("2L", "SmallDivider", 12, 12): 300,
    ("4L", "SmallEmpty", 20, 20): 1200,
    ("4L", "SmallDivider", 20, 20): 1500,
    ("4R", "SmallEmpty", 20, 20): 300,
    ("4R", "LargeEmpty", 40, 20): 600,
}

RENDER_SCALE = 8
AGENT_COLORS = ((220, 40, 40), (40, 90, 220), (30, 160, 60), (200, 130, 0), (150, 50, 180), (0, 170, 170))
ARGMAX_COLOR = (255, 0, 0)


class ConfigError(ValueError):
    pass


class HarnessError(RuntimeError):
    pass


def default_tick_budget(spec: EnvironmentSpec) -> int:
    key = (team_label(spec.team), spec.layout.value, spec.width, spec.height)
    if key in TICK_BUDGETS:
        return TICK_BUDGETS[key]
    # Roughly one cross-map trip per object, shared by the team.
    return int(np.ceil(spec.num_objects * (spec.width + spec.height) * 2 / len(spec.team)))


# Configuration

@dataclass
class RunConfig:
    environment: EnvironmentSpec
    variant: IntentionVariant = IntentionVariant.RAMP_PATH
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int | None = None  # None: training is not seeded; a fresh seed is drawn and recorded
    num_policies: int = 5
    eval_seeds: list = field(default_factory=lambda: list(range(20)))
    tick_budget: int | None = None
    out_size: int | None = None
    drop_prob: float = 0.0
    delay: int = 0
    ground_truth_distances: bool = False
    record_trajectories: bool = False

    def __post_init__(self):
        try:
            self.variant = IntentionVariant.parse(self.variant)
        except PerceptionError as e:
            raise ConfigError(str(e)) from None
        spec = self.environment
        rescue = [k for k in spec.team if k is RobotKind.RESCUE]
        if rescue and spec.task is not Task.SEARCH_AND_RESCUE:
            raise ConfigError("rescue robots only take part in the SearchAndRescue task")
        if self.num_policies < 1 or not self.eval_seeds:
            raise ConfigError("need at least one policy and one eval seed")
        if self.train.scale not in ("desk", "full"):
            raise ConfigError(f"unknown network scale {self.train.scale!r}")
        if self.tick_budget is None:
            self.tick_budget = default_tick_budget(spec)
        if self.out_size is None:
            self.out_size = default_crop_size((spec.height + 2, spec.width + 2))  # interior plus border walls
        if self.out_size < 3 or self.out_size % 2 == 0:
            raise ConfigError("out_size must be odd and at least 3")
        self.eval_seeds = [int(s) for s in self.eval_seeds]

    @property
    def team_size(self) -> int:
        return len(self.environment.team)

    @property
    def kinds(self) -> list[RobotKind]:
        return sorted(set(self.environment.team), key=list(RobotKind).index)

    @property
    def input_channels(self) -> int:
        return len(channel_names(self.environment.task, self.variant, self.team_size))

    @property
    def base_channels(self) -> int:
        return len(base_channel_names(self.environment.task))

    def episode_config(self, tick_budget: int | None = None, record: bool | None = None) -> EpisodeConfig:
        channel = ChannelModel(self.drop_prob, self.delay) if (self.drop_prob or self.delay) else None
        return EpisodeConfig(self.variant, self.out_size, channel, tick_budget,
                             ground_truth_distances=self.ground_truth_distances,
                             record_trajectories=self.record_trajectories if record is None else record)

    def to_json(self) -> dict:
        return {
            "environment": self.environment.to_json(),
            "variant": self.variant.value,
            "train": self.train.to_json(),
            "seed": self.seed,
            "num_policies": self.num_policies,
            "eval_seeds": list(self.eval_seeds),
            "tick_budget": self.tick_budget,
            "out_size": self.out_size,
            "drop_prob": self.drop_prob,
            "delay": self.delay,
            "ground_truth_distances": self.ground_truth_distances,
            "record_trajectories": self.record_trajectories,
        }

    @classmethod
    def from_json(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        data = dict(data)
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            data["environment"] = EnvironmentSpec.from_json(data.get("environment", {}))
            data["train"] = TrainConfig.from_json(data.get("train", {}))
            return cls(**data)
        except ConfigError:
            raise
        except (ValueError, TypeError, KeyError) as e:
            raise ConfigError(f"invalid config: {e}") from None

    def with_overrides(self, seed=None, variant=None, scale=None) -> "RunConfig":
        cfg = self
        if seed is not None:
            cfg = replace(cfg, seed=int(seed))
        if variant is not None:
            cfg = replace(cfg, variant=variant)
        if scale is not None:
            cfg = replace(cfg, train=replace(cfg.train, scale=scale))
        return cfg


def load_config(path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    return RunConfig.from_json(data)


def resolve_seed(cfg: RunConfig) -> int:
    if cfg.seed is not None:
        return cfg.seed
    return int(np.random.SeedSequence().entropy % (2 ** 31))


def metadata(cfg: RunConfig, **extra) -> dict:
    out = {"version": __version__, "config": cfg.to_json(),
           "state": state_manifest(cfg.environment.task, cfg.variant, cfg.team_size, cfg.out_size)}
    out.update(extra)
    return out


def write_sidecar(path, meta: dict) -> Path:
    side = Path(str(path) + ".meta.json")
    side.write_text(json.dumps(meta, indent=2, sort_keys=True))
    return side


def write_csv(path, fields: Sequence[str], rows: Sequence[dict], meta: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(fields), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    write_sidecar(path, meta)
    return path


def read_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


# Training

def training_world_seed(seed: int, episode: int) -> int:
    return int(np.random.SeedSequence([seed, episode]).generate_state(1)[0] & 0x7FFFFFFF)


TRAIN_LOG_FIELDS = ("episode", "end_step", "ticks", "objects_removed", "return", "epsilon", "mean_loss")


def train_run(cfg: RunConfig, seed: int, out_dir) -> dict:
    """One training run; writes per-kind policy (and predictor) checkpoints plus a training log."""
    out_dir = Path(out_dir)
    (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    spec = cfg.environment
    meta = metadata(cfg, seed=seed)

    def save(step: int, final: bool = False):
        for kind, pol in sess.policies.items():
            name = f"policy_{kind.value}.simq" if final else f"checkpoints/policy_{kind.value}_{step:08d}.simq"
            save_checkpoint(out_dir / name, pol.online, {**meta, "kind": kind.value, "step": step})
        for kind, pred in sess.predictors.items():
            name = f"predictor_{kind.value}.simp" if final else f"checkpoints/predictor_{kind.value}_{step:08d}.simp"
            save_predictor(out_dir / name, pred.net, {**meta, "kind": kind.value, "step": step})
        log.info("run %s step %d", out_dir.name, step)

    sess = TrainingSession(spec.team, cfg.input_channels, cfg.train, spec.task, cfg.variant, seed,
                           cfg.base_channels, on_checkpoint=save)
    ep_cfg = cfg.episode_config(record=False)
    rows, episode = [], 0
    while not sess.done:
        n_losses = len(sess.recent_losses)
        world = generate_environment(spec, training_world_seed(seed, episode))
        res = run_episode(world, sess, ep_cfg, np.random.default_rng([seed, episode, 1]))
        losses = sess.recent_losses[n_losses:]
        rows.append({"episode": episode, "end_step": sess.step, "ticks": res.ticks,
                     "objects_removed": res.objects_removed, "return": float(sum(res.returns.values())),
                     "epsilon": float(sess.epsilon()), "mean_loss": float(np.mean(losses)) if losses else float("nan")})
        del sess.recent_losses[:-1000]
        episode += 1
    save(sess.step, final=True)
    write_csv(out_dir / "train_log.csv", TRAIN_LOG_FIELDS, rows, meta)
    return {"seed": seed, "episodes": episode, "steps": sess.step, "schedule": sess.schedule_log}


def cmd_train(cfg: RunConfig, out) -> list[Path]:
    """Train ``num_policies`` independent runs into out/run_<k>/."""
    out = Path(out)
    base = resolve_seed(cfg)
    dirs = []
    for k in range(cfg.num_policies):
        d = out / f"run_{k}"
        train_run(cfg, base + k, d)
        dirs.append(d)
    return dirs


# Evaluation

EPISODE_FIELDS = ("run", "seed", "objects_removed", "num_objects", "ticks", "completed", "return",
                  "obstacle_collisions", "agent_collisions", "distance", "bytes_sent")
SUMMARY_FIELDS = ("metric", "episodes_mean", "episodes_std", "policies_mean", "policies_std", "num_policies",
                  "num_episodes")
SUMMARY_METRICS = ("objects_removed", "ticks", "return", "obstacle_collisions", "agent_collisions", "distance")


@dataclass
class EvalReport:
    rows: list
    seeds: list
    summary: dict
    run_names: list

    def metric(self, name: str = "objects_removed") -> dict:
        return self.summary[name]


def run_dirs(checkpoints) -> list[Path]:
    checkpoints = Path(checkpoints)
    if not checkpoints.is_dir():
        raise CheckpointError(f"checkpoint directory {checkpoints} not found")
    runs = sorted(p for p in checkpoints.glob("run_*") if p.is_dir())
    return runs or [checkpoints]


def load_controller(cfg: RunConfig, run_dir) -> EvalController:
    """Frozen per-kind policies (and predictors) for a run directory, checked against the config."""
    run_dir = Path(run_dir)
    policies, predictors = {}, {}
    for kind in cfg.kinds:
        net, meta = load_checkpoint(run_dir / f"policy_{kind.value}.simq")
        if net.spec.input_channels != cfg.input_channels or net.spec.output_channels != kind.action_channels:
            raise CheckpointError(f"checkpoint for {kind.value} does not match the configured state/action layout")
        policies[kind] = Policy.frozen(kind, net)
        if cfg.variant.predicted:
            pnet, _ = load_predictor(run_dir / f"predictor_{kind.value}.simp")
            predictors[kind] = pnet
    return EvalController(policies, predictors)


def evaluate(cfg: RunConfig, controller, run_name: str = "run_0", trajectory_dir=None) -> list[dict]:
    rows = []
    for s in cfg.eval_seeds:
        record = trajectory_dir is not None
        res = run_episode(generate_environment(cfg.environment, s), controller,
                          cfg.episode_config(cfg.tick_budget, record), np.random.default_rng(s))
        if record:
            Path(trajectory_dir).mkdir(parents=True, exist_ok=True)
            p = write_trajectory(res.trajectory, Path(trajectory_dir) / f"{run_name}_seed{s}.csv")
            write_sidecar(p, metadata(cfg, run=run_name, episode_seed=s))
        rows.append({"run": run_name, "seed": s, "objects_removed": res.objects_removed,
                     "num_objects": res.num_objects, "ticks": res.ticks, "completed": int(res.completed),
                     "return": float(sum(res.returns.values())),
                     "obstacle_collisions": sum(res.obstacle_collisions.values()),
                     "agent_collisions": sum(res.agent_collisions.values()),
                     "distance": float(sum(res.distance.values())), "bytes_sent": res.bytes_sent})
    return rows


def summarize(rows: Sequence[dict]) -> dict:
    """Mean/std across episodes and across per-policy means, from (possibly CSV-parsed) rows."""
    out = {}
    runs = sorted({r["run"] for r in rows})
    for m in SUMMARY_METRICS:
        vals = np.array([float(r[m]) for r in rows])
        per_run = np.array([np.mean([float(r[m]) for r in rows if r["run"] == k]) for k in runs])
        out[m] = {"episodes_mean": float(vals.mean()), "episodes_std": float(vals.std()),
                  "policies_mean": float(per_run.mean()), "policies_std": float(per_run.std()),
                  "num_policies": len(runs), "num_episodes": len(vals)}
    return out


def cmd_eval(cfg: RunConfig, checkpoints, out, random_policy: bool = False) -> EvalReport:
    """Greedy (epsilon 0.01) evaluation of every run under ``checkpoints`` on the shared eval seeds."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    traj_dir = out / "trajectories" if cfg.record_trajectories else None
    rows, names = [], []
    if random_policy:
        names = ["random"]
        rows = evaluate(cfg, RandomController(), "random", traj_dir)
    else:
        for d in run_dirs(checkpoints):
            names.append(d.name)
            rows += evaluate(cfg, load_controller(cfg, d), d.name, traj_dir)
    meta = metadata(cfg, eval_seeds=cfg.eval_seeds, runs=names, random_policy=random_policy)
    path = write_csv(out / "eval_episodes.csv", EPISODE_FIELDS, rows, meta)
    summary = summarize(read_csv(path))
    write_csv(out / "eval_summary.csv", SUMMARY_FIELDS, [{"metric": m, **v} for m, v in summary.items()], meta)
    return EvalReport(rows, list(cfg.eval_seeds), summary, names)


# Comparison

def ordered_variants(variants) -> list[IntentionVariant]:
    try:
        parsed = {IntentionVariant.parse(v) for v in variants}
    except PerceptionError as e:
        raise ConfigError(str(e)) from None
    return [v for v in IntentionVariant if v in parsed]


def comparison_table(cfg: RunConfig, reports: dict) -> tuple[list[str], list[str]]:
    """Header and one row (team, layout, mean ± std objects removed per variant, fixed column order)."""
    seeds = {tuple(r.seeds) for r in reports.values()}
    if len(seeds) != 1:
        raise HarnessError("refusing to compare methods evaluated on different seed lists")
    variants = ordered_variants(list(reports))
    header = ["team", "layout"] + [v.value for v in variants]
    row = [team_label(cfg.environment.team), cfg.environment.layout.value]
    for v in variants:
        m = reports[v].metric("objects_removed")
        row.append(f"{m['policies_mean']:.2f} ± {m['policies_std']:.2f}")
    return header, row


def cmd_compare(cfg: RunConfig, variants, out) -> Path:
    """Train (or reuse) and evaluate each variant with identical eval seeds, then tabulate."""
    out = Path(out)
    reports = {}
    for v in ordered_variants(variants):
        vcfg = replace(cfg, variant=v)
        vdir = out / v.value
        if not (vdir / "run_0").is_dir():
            cmd_train(vcfg, vdir)
        reports[v] = cmd_eval(vcfg, vdir, vdir / "eval")
    header, row = comparison_table(cfg, reports)
    path = out / "comparison.csv"
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerow(row)
    write_sidecar(path, {"version": __version__, "config": cfg.to_json(), "variants": header[2:],
                         "eval_seeds": cfg.eval_seeds})
    return path


# Rendering

def layout_image(world) -> np.ndarray:
    """(H, W, 3) base image: free white, obstacles dark, receptacle tinted, objects orange."""
    grid = world.grid
    img = np.full(grid.shape + (3,), 255, dtype=np.uint8)
    img[grid.cells == OBSTACLE] = (60, 60, 60)
    if world.spec.has_receptacle:
        for c, r in receptacle_cells(world.spec):
            img[r, c] = (200, 235, 200)
    for o in world.objects:
        if o.active:
            img[o.cell.row, o.cell.col] = (240, 160, 60)
    return img


def _upscale(img: np.ndarray, k: int) -> np.ndarray:
    return np.repeat(np.repeat(img, k, axis=0), k, axis=1)


def trajectory_image(world, rows, scale: int = RENDER_SCALE) -> np.ndarray:
    """Per-agent colored paths over the layout; a single logged pose renders as a single dot."""
    img = _upscale(layout_image(world), scale)
    H = world.grid.height
    by_agent: dict[int, list] = {}
    for t, aid, x, y, *_ in sorted(rows, key=lambda r: (r[1], r[0])):
        px = (min(int(x * scale), img.shape[1] - 1), min(int((H - y) * scale), img.shape[0] - 1))
        pts = by_agent.setdefault(aid, [])
        if not pts or pts[-1] != px:
            pts.append(px)
    for aid, pts in sorted(by_agent.items()):
        color = AGENT_COLORS[aid % len(AGENT_COLORS)]
        img[pts[0][1], pts[0][0]] = color
        for a, b in zip(pts, pts[1:]):
            for cx, cy in bresenham(a, b):
                img[cy, cx] = color
    return img


def q_map_image(q: np.ndarray, mark) -> np.ndarray:
    """Channels side by side, min-max normalized to gray, with one marked argmax pixel."""
    lo, hi = float(q.min()), float(q.max())
    g = np.zeros_like(q) if hi <= lo else (q - lo) / (hi - lo)
    g = np.round(g * 254).astype(np.uint8)  # 255 is never produced so the marker stays unique
    tiles = np.concatenate(list(g), axis=1)
    img = np.repeat(tiles[:, :, None], 3, axis=2)
    c, r, col = mark
    img[r, c * q.shape[2] + col] = ARGMAX_COLOR
    return img


def cmd_render(cfg: RunConfig, out, checkpoints=None, trajectory_log=None, episode_seed: int | None = None) -> list[Path]:
    """Render a logged trajectory, or one episode of a checkpoint: state channels, Q-maps and paths."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    seed = cfg.eval_seeds[0] if episode_seed is None else int(episode_seed)
    meta = metadata(cfg, episode_seed=seed)
    written = []
    if trajectory_log is not None:
        try:
            rows = read_trajectory(trajectory_log)
        except (OSError, KeyError, ValueError, csv.Error) as e:
            raise ConfigError(f"cannot read trajectory log {trajectory_log}: {e}") from None
        path = write_ppm(out / "trajectory.ppm", trajectory_image(generate_environment(cfg.environment, seed), rows))
        write_sidecar(path, {**meta, "source": str(trajectory_log)})
        return [path]
    if checkpoints is None:
        raise ConfigError("render needs --checkpoints or --log")
    controller = load_controller(cfg, run_dirs(checkpoints)[0])
    seen = set()

    def probe(ep, agent, state):
        if agent.id in seen:
            return
        seen.add(agent.id)
        paths = dump_state_channels(state, out / f"state_agent{agent.id}")
        q = controller.q_map(agent.kind, state)
        mark = select_action(q, 0.0, np.random.default_rng(0))
        paths.append(write_ppm(out / f"qmap_agent{agent.id}.ppm", q_map_image(q, mark)))
        for p in paths:
            write_sidecar(p, meta)
        written.extend(paths)

    world = generate_environment(cfg.environment, seed)
    initial = generate_environment(cfg.environment, seed)
    res = run_episode(world, controller, cfg.episode_config(cfg.tick_budget, record=True), np.random.default_rng(seed),
                      probe)
    path = write_ppm(out / "trajectory.ppm", trajectory_image(initial, res.trajectory))
    write_sidecar(path, meta)
    written.append(path)
    return written


# CLI

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="intentmaps", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("train", "eval", "compare", "render"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="run config JSON")
        p.add_argument("--seed", type=int, help="training seed override")
        p.add_argument("--out", default="runs", help="output directory")
        p.add_argument("--variant", help="intention variant override")
        p.add_argument("--scale", choices=("desk", "full"), help="network scale override")
        if name in ("eval", "render"):
            p.add_argument("--checkpoints", help="directory holding run_<k>/ checkpoint folders")
        if name == "eval":
            p.add_argument("--random", action="store_true", help="evaluate the uniform random baseline")
        if name == "compare":
            p.add_argument("--variants", default="RampPath,None", help="comma-separated variant tags")
        if name == "render":
            p.add_argument("--log", help="trajectory CSV to overlay instead of running a checkpoint")
            p.add_argument("--episode-seed", type=int, help="environment seed of the rendered episode")
    return parser


def main(argv=None) -> int:
    """Exit codes: 0 success, 1 config or input error, 2 runtime error."""
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        cfg = load_config(args.config).with_overrides(args.seed, args.variant, args.scale)
        if args.command == "train":
            cmd_train(cfg, args.out)
        elif args.command == "eval":
            if not args.random and not args.checkpoints:
                raise ConfigError("eval needs --checkpoints or --random")
            report = cmd_eval(cfg, args.checkpoints, args.out, args.random)
            m = report.metric()
            print(f"objects removed: {m['policies_mean']:.2f} ± {m['policies_std']:.2f}")
        elif args.command == "compare":
            print(cmd_compare(cfg, args.variants.split(","), args.out).read_text(encoding="utf-8"), end="")
        else:
            for p in cmd_render(cfg, args.out, args.checkpoints, args.log, args.episode_seed):
                print(p)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - any failure after a valid config is a runtime error
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0
