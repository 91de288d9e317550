"""Per-agent beliefs and the egocentric state tensor, including all intention encodings."""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from .environment import AgentState, EnvironmentSpec, Task, WorldState
from .gridcore import (
    FREE, OBSTACLE, UNKNOWN, UNREACHABLE, CellCoord, GridError, OccupancyGrid, Pose, RampSpec,
    _rotation, bresenham, distance_field, egocentric_crop, pose_cell, raycast_visibility,
    rasterize_ramp_path, write_pgm,
)

HISTORY_CAPACITY = 20

# Channel constants; recorded in every manifest so runs stay comparable.
ENV_VALUES = {FREE: 0.0, UNKNOWN: 0.5, OBSTACLE: 1.0}
OBJECT_VALUE = 1.0
SELF_VALUE, SELF_CARRYING_VALUE = 1.0, 0.9
OTHER_VALUE, OTHER_CARRYING_VALUE = 0.6, 0.5
ENV_FILL = 1.0
CIRCLE_RADIUS = 2.0


class PerceptionError(ValueError):
    pass


class IntentionVariant(str, Enum):
    RAMP_PATH = "RampPath"
    BINARY_PATH = "BinaryPath"
    STRAIGHT_LINE = "StraightLine"
    TARGET_CIRCLE = "TargetCircle"
    PER_ROBOT_CHANNELS = "PerRobotChannels"
    NONSPATIAL_TILED = "NonspatialTiled"
    HISTORY_MAP = "HistoryMap"
    PREDICTED = "Predicted"
    PREDICTED_WITH_HISTORY = "PredictedWithHistory"
    NONE = "None"

    @classmethod
    def parse(cls, tag) -> "IntentionVariant":
        try:
            return cls(tag)
        except ValueError:
            valid = ", ".join(v.value for v in cls)
            raise PerceptionError(f"unknown intention variant {tag!r}; valid tags: {valid}") from None

    @property
    def uses_history(self) -> bool:
        return self in (IntentionVariant.HISTORY_MAP, IntentionVariant.PREDICTED_WITH_HISTORY)

    @property
    def predicted(self) -> bool:
        return self in (IntentionVariant.PREDICTED, IntentionVariant.PREDICTED_WITH_HISTORY)

    @property
    def communicates(self) -> bool:
        return self not in (IntentionVariant.NONE, IntentionVariant.HISTORY_MAP)


def intention_channel_count(variant, team_size: int) -> int:
    variant = IntentionVariant.parse(variant)
    others = max(1, team_size - 1)
    if variant is IntentionVariant.PER_ROBOT_CHANNELS:
        return others
    if variant is IntentionVariant.NONSPATIAL_TILED:
        return 2 * others
    if variant is IntentionVariant.PREDICTED_WITH_HISTORY:
        return 2
    return 1


def base_channel_names(task: Task) -> list[str]:
    names = ["environment", "agents"]
    if Task(task) is Task.FORAGING:
        names.append("receptacle_distance")
    names.append("self_distance")
    return names


def channel_names(task, variant, team_size: int) -> list[str]:
    variant = IntentionVariant.parse(variant)
    n = intention_channel_count(variant, team_size)
    if variant is IntentionVariant.PREDICTED_WITH_HISTORY:
        extra = ["intention_predicted", "intention_history"]
    elif n == 1:
        extra = [f"intention_{variant.value}"]
    else:
        extra = [f"intention_{variant.value}_{k}" for k in range(n)]
    return base_channel_names(task) + extra


# Beliefs

@dataclass
class ObjectRecord:
    cell: CellCoord
    seen_tick: int


@dataclass
class AgentRecord:
    pose: Pose
    carrying: bool
    seen_tick: int


@dataclass
class AgentBelief:
    owner: int
    grid: OccupancyGrid
    objects: dict[int, ObjectRecord] = field(default_factory=dict)
    agents: dict[int, AgentRecord] = field(default_factory=dict)
    history: dict[int, deque] = field(default_factory=dict)
    version: int = 0
    _cache: dict = field(default_factory=dict, repr=False)

    @classmethod
    def fresh(cls, owner: int, width: int, height: int) -> "AgentBelief":
        return cls(owner, OccupancyGrid.filled(width, height, UNKNOWN))

    @classmethod
    def for_world(cls, owner: int, world: WorldState) -> "AgentBelief":
        return cls.fresh(owner, world.grid.width, world.grid.height)

    def record_pose(self, agent_id: int, pose: Pose):
        """Append to the per-agent pose history ring (newest last)."""
        ring = self.history.setdefault(agent_id, deque(maxlen=HISTORY_CAPACITY))
        ring.append(pose)

    def copy(self) -> "AgentBelief":
        return AgentBelief(self.owner, self.grid.copy(), dict(self.objects), dict(self.agents),
                           {k: deque(v, maxlen=HISTORY_CAPACITY) for k, v in self.history.items()},
                           self.version)


def integrate_observation(belief: AgentBelief, visible, world: WorldState) -> AgentBelief:
    """Overwrite the belief with ground truth on the visible cells only."""
    if not visible:
        return belief
    rows = np.fromiter((c.row for c in visible), dtype=np.int64, count=len(visible))
    cols = np.fromiter((c.col for c in visible), dtype=np.int64, count=len(visible))
    h, w = belief.grid.shape
    if rows.min() < 0 or cols.min() < 0 or rows.max() >= h or cols.max() >= w:
        raise PerceptionError("visible cell out of bounds")
    truth = world.grid.cells[rows, cols]
    if not np.array_equal(belief.grid.cells[rows, cols], truth):
        belief.grid.cells[rows, cols] = truth
        belief.version += 1
    vis = visible if isinstance(visible, (set, frozenset)) else set(visible)
    for oid in [i for i, rec in belief.objects.items() if rec.cell in vis]:
        del belief.objects[oid]
    for obj in world.objects:
        if obj.free and obj.cell in vis:
            belief.objects[obj.id] = ObjectRecord(obj.cell, world.tick)
    for agent in world.agents:
        if agent.id != belief.owner and world.agent_cell(agent) in vis:
            belief.agents[agent.id] = AgentRecord(agent.pose, agent.carrying, world.tick)
    return belief


def observe(belief: AgentBelief, world: WorldState, agent: AgentState) -> AgentBelief:
    spec = world.spec
    visible = raycast_visibility(world.grid, agent.pose, spec.sensor_fov, spec.sensor_range)
    return integrate_observation(belief, visible, world)


def track_poses(belief: AgentBelief, world: WorldState):
    """History maps assume other agents' poses are trackable without communication."""
    for agent in world.agents:
        if agent.id != belief.owner:
            belief.record_pose(agent.id, agent.pose)


# Intention encodings

@dataclass
class IntentionRecord:
    """What the deciding agent knows about one other agent."""
    agent_id: int
    pose: Pose
    waypoints: list[CellCoord] = field(default_factory=list)
    history: list[Pose] = field(default_factory=list)

    @property
    def target(self) -> CellCoord | None:
        return self.waypoints[-1] if self.waypoints else None


def _disc(canvas: np.ndarray, center: CellCoord, radius: float):
    h, w = canvas.shape
    r = int(math.floor(radius))
    for dr in range(-r, r + 1):
        for dc in range(-r, r + 1):
            if dr * dr + dc * dc <= radius * radius:
                row, col = center.row + dr, center.col + dc
                if 0 <= row < h and 0 <= col < w:
                    canvas[row, col] = 1.0


def _nearest_first(records: Sequence[IntentionRecord], frame: Pose) -> list[IntentionRecord]:
    return sorted(records, key=lambda r: (math.hypot(r.pose.x - frame.x, r.pose.y - frame.y), r.agent_id))


def egocentric_offset(frame: Pose, x: float, y: float, out_size: int) -> tuple[float, float]:
    """Target (right, up) offset in the frame's egocentric axes, scaled to [-1, 1]."""
    ca, sa = _rotation(frame.heading)
    dx, dy = x - frame.x, y - frame.y
    right = ca * dx + sa * dy
    up = -sa * dx + ca * dy
    half = max(1, out_size // 2)
    return (float(np.clip(right / half, -1.0, 1.0)), float(np.clip(up / half, -1.0, 1.0)))


def _global_map(records, variant, shape, ramp: RampSpec) -> np.ndarray:
    canvas = np.zeros(shape)
    for rec in records:
        if variant is IntentionVariant.HISTORY_MAP:
            newest_first = list(reversed(rec.history))
            for k, pose in enumerate(newest_first[:HISTORY_CAPACITY]):
                cell = pose_cell(pose, shape[0])
                if 0 <= cell.row < shape[0] and 0 <= cell.col < shape[1]:
                    canvas[cell.row, cell.col] = max(canvas[cell.row, cell.col], 1.0 - k / HISTORY_CAPACITY)
            continue
        if not rec.waypoints:
            continue
        if variant is IntentionVariant.RAMP_PATH:
            canvas = rasterize_ramp_path(canvas, rec.waypoints, ramp)
        elif variant is IntentionVariant.BINARY_PATH:
            for c in rec.waypoints:
                canvas[c.row, c.col] = 1.0
        elif variant is IntentionVariant.STRAIGHT_LINE:
            canvas = rasterize_ramp_path(canvas, bresenham(rec.waypoints[0], rec.target), ramp)
        elif variant is IntentionVariant.TARGET_CIRCLE:
            _disc(canvas, rec.target, CIRCLE_RADIUS)
    return canvas


def encode_intention(records: Sequence[IntentionRecord], variant, frame: Pose, out_size: int,
                     grid_shape: tuple[int, int], team_size: int | None = None,
                     ramp: RampSpec | None = None):
    """Render other agents' intentions for the agent at ``frame``.

    Returns a list of egocentric maps, or for NonspatialTiled a flat list of
    (right, up) values in [-1, 1], nearest robot first, padded with zeros.
    Predicted variants render the communicated RampPath map, which is both the
    predictor's supervision target and the policy input early in training.
    """
    variant = IntentionVariant.parse(variant)
    ramp = ramp or RampSpec.for_crop(out_size)
    team_size = team_size if team_size is not None else len(records) + 1
    others = max(1, team_size - 1)

    def crop(m):
        return egocentric_crop(m, frame, out_size, fill=0.0)

    if variant is IntentionVariant.NONE:
        return [np.zeros((out_size, out_size))]
    if variant is IntentionVariant.PER_ROBOT_CHANNELS:
        maps = [crop(_global_map([r], IntentionVariant.TARGET_CIRCLE, grid_shape, ramp))
                for r in _nearest_first(records, frame)[:others]]
        return maps + [np.zeros((out_size, out_size))] * (others - len(maps))
    if variant is IntentionVariant.NONSPATIAL_TILED:
        values: list[float] = []
        h = grid_shape[0]
        for r in _nearest_first(records, frame)[:others]:
            tgt = r.target if r.target is not None else pose_cell(r.pose, h)
            values.extend(egocentric_offset(frame, tgt.col + 0.5, h - tgt.row - 0.5, out_size))
        return values + [0.0] * (2 * others - len(values))
    if variant is IntentionVariant.PREDICTED:
        return [crop(_global_map(records, IntentionVariant.RAMP_PATH, grid_shape, ramp))]
    if variant is IntentionVariant.PREDICTED_WITH_HISTORY:
        return [crop(_global_map(records, IntentionVariant.RAMP_PATH, grid_shape, ramp)),
                crop(_global_map(records, IntentionVariant.HISTORY_MAP, grid_shape, ramp))]
    return [crop(_global_map(records, variant, grid_shape, ramp))]


def history_records(belief: AgentBelief, world_agents: Sequence[AgentState] | None = None) -> list[IntentionRecord]:
    recs = []
    for aid in sorted(belief.history):
        ring = belief.history[aid]
        if ring:
            recs.append(IntentionRecord(aid, ring[-1], history=list(ring)))
    return recs


def intention_maps(encoded, variant, out_size: int) -> list[np.ndarray]:
    """Turn encode_intention output into tensor channels (tiling nonspatial values into [0, 1])."""
    variant = IntentionVariant.parse(variant)
    if variant is IntentionVariant.NONSPATIAL_TILED:
        return [np.full((out_size, out_size), (v + 1.0) / 2.0) for v in encoded]
    return list(encoded)


# State tensor

@dataclass
class StateTensor:
    channels: np.ndarray  # (C, S, S) float32
    names: list[str]

    @property
    def shape(self):
        return self.channels.shape

    def without_intention(self) -> np.ndarray:
        return self.channels[:self.base_count]

    @property
    def base_count(self) -> int:
        return sum(not n.startswith("intention") for n in self.names)


def default_crop_size(grid_shape: tuple[int, int]) -> int:
    """Smallest odd size covering the larger grid dimension."""
    n = max(grid_shape)
    return n if n % 2 else n + 1


def environment_image(belief: AgentBelief) -> np.ndarray:
    cells = belief.grid.cells
    img = np.full(cells.shape, ENV_VALUES[UNKNOWN])
    img[cells == FREE] = ENV_VALUES[FREE]
    img[cells == OBSTACLE] = ENV_VALUES[OBSTACLE]
    for rec in belief.objects.values():
        img[rec.cell.row, rec.cell.col] = OBJECT_VALUE
    return img


def agent_image(belief: AgentBelief, me: AgentState) -> np.ndarray:
    h, w = belief.grid.shape
    img = np.zeros((h, w))
    for aid, rec in sorted(belief.agents.items()):
        if aid == me.id:
            continue
        c = pose_cell(rec.pose, h)
        if 0 <= c.row < h and 0 <= c.col < w:
            img[c.row, c.col] = max(img[c.row, c.col], OTHER_CARRYING_VALUE if rec.carrying else OTHER_VALUE)
    c = pose_cell(me.pose, h)
    img[c.row, c.col] = SELF_CARRYING_VALUE if me.carrying else SELF_VALUE
    return img


def normalized_distance(field_: np.ndarray) -> np.ndarray:
    h, w = field_.shape
    diag = math.hypot(h, w)
    out = np.where(field_ == UNREACHABLE, 1.0, field_ / diag)
    return np.clip(out, 0.0, 1.0)


def receptacle_distance(belief: AgentBelief, world: WorldState, ground_truth: bool = False) -> np.ndarray:
    """Normalized receptacle distance on the belief (cached per belief version) or on ground truth."""
    if ground_truth:
        return normalized_distance(world.receptacle_field())
    key = ("recept", belief.version)
    if key not in belief._cache:
        belief._cache.clear()
        belief._cache[key] = normalized_distance(
            distance_field(belief.grid, sorted(world.receptacle), traversable_unknown=True))
    return belief._cache[key]


def self_distance(belief: AgentBelief, me: AgentState, world: WorldState, ground_truth: bool = False) -> np.ndarray:
    grid = world.grid if ground_truth else belief.grid
    cell = pose_cell(me.pose, grid.height)
    if grid.state(cell) == OBSTACLE:
        grid = grid.copy()
        grid.cells[cell.row, cell.col] = FREE
    return normalized_distance(distance_field(grid, [cell], traversable_unknown=not ground_truth))


def build_state_tensor(belief: AgentBelief, me: AgentState, intention_channels: Sequence[np.ndarray],
                       world: WorldState, out_size: int, variant=IntentionVariant.RAMP_PATH,
                       ground_truth_distances: bool = False) -> StateTensor:
    """Stack the egocentric channels for the agent ``me``.

    ``intention_channels`` are already egocentric (see :func:`intention_maps`).
    """
    if out_size % 2 == 0:
        raise GridError(f"egocentric crop size must be odd, got {out_size}")
    spec: EnvironmentSpec = world.spec
    pose = me.pose
    chans = [egocentric_crop(environment_image(belief), pose, out_size, fill=ENV_FILL),
             egocentric_crop(agent_image(belief, me), pose, out_size, fill=0.0)]
    if spec.task is Task.FORAGING:
        chans.append(egocentric_crop(receptacle_distance(belief, world, ground_truth_distances),
                                     pose, out_size, fill=1.0))
    chans.append(egocentric_crop(self_distance(belief, me, world, ground_truth_distances),
                                 pose, out_size, fill=1.0))
    for m in intention_channels:
        if m.shape != (out_size, out_size):
            raise PerceptionError(f"intention channel has shape {m.shape}, expected {(out_size, out_size)}")
        chans.append(m)
    names = channel_names(spec.task, variant, len(spec.team))
    if len(names) != len(chans):
        raise PerceptionError(f"variant {IntentionVariant.parse(variant).value} expects {len(names)} channels, "
                              f"got {len(chans)}")
    return StateTensor(np.stack(chans).astype(np.float32), names)


def state_manifest(task, variant, team_size: int, out_size: int) -> dict:
    return {
        "channels": channel_names(task, variant, team_size),
        "out_size": out_size,
        "environment_values": {"free": ENV_VALUES[FREE], "unknown": ENV_VALUES[UNKNOWN],
                               "obstacle": ENV_VALUES[OBSTACLE], "object": OBJECT_VALUE, "outside": ENV_FILL},
        "agent_values": {"self": SELF_VALUE, "self_carrying": SELF_CARRYING_VALUE,
                         "other": OTHER_VALUE, "other_carrying": OTHER_CARRYING_VALUE},
        "distance_normalization": "grid diagonal, unreachable = 1",
        "ramp": {"start": 1.0, "floor": 0.1, "length": "crop diagonal"},
        "history_capacity": HISTORY_CAPACITY,
        "circle_radius": CIRCLE_RADIUS,
    }


def dump_state_channels(state: StateTensor, out_dir) -> list[Path]:
    """Write each channel as a numbered PGM plus a JSON manifest of the channel order."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, (name, chan) in enumerate(zip(state.names, state.channels)):
        # Fixed [0, 1] scaling so identical channels always produce identical bytes.
        paths.append(write_pgm(out_dir / f"channel_{k:02d}_{name}.pgm", np.asarray(chan, dtype=np.float64),
                               value_range=(0.0, 1.0)))
    (out_dir / "manifest.json").write_text(json.dumps({"channels": state.names}, indent=2))
    return paths
