"""Ground-truth world: layout generation, motion primitives, collisions and rewards.

Time advances in discrete ticks. Each tick every agent with an in-flight
primitive advances one cell along its planned path; end-effector actions
resolve when the path is exhausted.
"""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from .gridcore import (
    FREE, OBSTACLE, UNREACHABLE, CellCoord, OccupancyGrid, Pose, cell_center, distance_field,
    pose_at, pose_cell, shortest_path, step_heading,
)


class EnvironmentError_(ValueError):
    """Bad input to the simulator (invalid action, spec or state)."""


class GenerationError(RuntimeError):
    """No valid world could be generated for a spec."""


class RobotKind(str, Enum):
    LIFTING = "lifting"
    PUSHING = "pushing"
    THROWING = "throwing"
    RESCUE = "rescue"

    @property
    def action_channels(self) -> int:
        return 2 if self in (RobotKind.LIFTING, RobotKind.THROWING) else 1

    @property
    def letter(self) -> str:
        return self.value[0].upper()

    @classmethod
    def from_letter(cls, letter: str) -> "RobotKind":
        for kind in cls:
            if kind.letter == letter.upper():
                return kind
        raise EnvironmentError_(f"unknown robot kind {letter!r}")


class Layout(str, Enum):
    SMALL_EMPTY = "SmallEmpty"
    SMALL_DIVIDER = "SmallDivider"
    LARGE_EMPTY = "LargeEmpty"
    LARGE_DOORS = "LargeDoors"
    LARGE_TUNNELS = "LargeTunnels"
    LARGE_ROOMS = "LargeRooms"

    @property
    def is_small(self) -> bool:
        return self.value.startswith("Small")


class Task(str, Enum):
    FORAGING = "Foraging"
    SEARCH_AND_RESCUE = "SearchAndRescue"


class EventKind(str, Enum):
    SUCCESS = "Success"
    OBSTACLE_COLLISION = "ObstacleCollision"
    AGENT_COLLISION = "AgentCollision"
    DISTANCE_SHAPING = "DistanceShaping"
    DROP_OUTSIDE = "DropOutside"


REWARDS = {
    EventKind.SUCCESS: 1.0,
    EventKind.OBSTACLE_COLLISION: -0.25,
    EventKind.AGENT_COLLISION: -1.0,
    EventKind.DROP_OUTSIDE: -0.25,
}

OPPOSITE_SIDE_LAYOUTS = (Layout.SMALL_DIVIDER, Layout.LARGE_DOORS, Layout.LARGE_TUNNELS)
NO_PROGRESS_LIMIT = 400


class Effector(str, Enum):
    NONE = "none"
    LIFT = "lift"
    DROP = "drop"
    THROW = "throw"


def parse_team(team: str | Sequence[RobotKind]) -> tuple[RobotKind, ...]:
    """Parse a composition such as ``"4L"`` or ``"2L+2P"`` into per-agent kinds."""
    if not isinstance(team, str):
        return tuple(RobotKind(k) for k in team)
    kinds = []
    for part in team.replace(" ", "").split("+"):
        if not part:
            continue
        digits = part[:-1] or "1"
        if not digits.isdigit():
            raise EnvironmentError_(f"bad team component {part!r}")
        kinds.extend([RobotKind.from_letter(part[-1])] * int(digits))
    if not kinds:
        raise EnvironmentError_("team must contain at least one robot")
    return tuple(kinds)


def team_label(team: Sequence[RobotKind]) -> str:
    counts: dict[RobotKind, int] = {}
    for k in team:
        counts[k] = counts.get(k, 0) + 1
    return "+".join(f"{n}{k.letter}" for k, n in counts.items())


@dataclass
class EnvironmentSpec:
    layout: Layout = Layout.SMALL_EMPTY
    width: int = 20
    height: int = 20
    num_objects: int = 10
    task: Task = Task.FORAGING
    team: tuple[RobotKind, ...] = (RobotKind.LIFTING,) * 4
    kappa: float = 0.01
    effector_radius: float = 1.5
    rescue_radius: float = 1.5
    throw_range: int = 10
    receptacle_size: int = 3
    sensor_fov: float = 2 * math.pi / 3
    sensor_range: float = 10.0
    opposite_sides: bool | None = None
    no_progress_limit: int = NO_PROGRESS_LIMIT

    def __post_init__(self):
        self.layout = Layout(self.layout)
        self.task = Task(self.task)
        self.team = parse_team(self.team)
        if self.opposite_sides is None:
            self.opposite_sides = self.layout in OPPOSITE_SIDE_LAYOUTS
        if self.width < 4 or self.height < 4:
            raise EnvironmentError_("interior must be at least 4x4")
        if self.num_objects < 0:
            raise EnvironmentError_("num_objects must be non-negative")
        if self.task is Task.SEARCH_AND_RESCUE and any(k is not RobotKind.RESCUE for k in self.team):
            raise EnvironmentError_("search and rescue teams may only contain rescue robots")
        if self.task is Task.FORAGING and RobotKind.RESCUE in self.team:
            raise EnvironmentError_("rescue robots only take part in search and rescue")

    @classmethod
    def for_layout(cls, layout: Layout | str, **overrides) -> "EnvironmentSpec":
        """Spec with the size-class defaults: small 20x20 with 10 objects, large 40x20 with 20."""
        layout = Layout(layout)
        base = dict(width=20, height=20, num_objects=10) if layout.is_small else \
            dict(width=40, height=20, num_objects=20)
        base.update(overrides)
        return cls(layout=layout, **base)

    @property
    def has_receptacle(self) -> bool:
        return self.task is Task.FORAGING

    def to_json(self) -> dict:
        d = asdict(self)
        d["layout"] = self.layout.value
        d["task"] = self.task.value
        d["team"] = team_label(self.team)
        d["dims"] = [d.pop("width"), d.pop("height")]
        return d

    @classmethod
    def from_json(cls, data: dict) -> "EnvironmentSpec":
        data = dict(data)
        layout = Layout(data.pop("layout", Layout.SMALL_EMPTY))
        if "dims" in data:
            data["width"], data["height"] = data.pop("dims")
        data.pop("seed_policy", None)
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise EnvironmentError_(f"unknown environment keys: {sorted(unknown)}")
        return cls.for_layout(layout, **data)

    @classmethod
    def load(cls, path) -> "EnvironmentSpec":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass
class Primitive:
    path: list[CellCoord]
    effector: Effector = Effector.NONE
    progress: int = 0
    noop: bool = False

    @property
    def target(self) -> CellCoord:
        return self.path[-1]

    @property
    def remaining(self) -> list[CellCoord]:
        return self.path[self.progress:]


@dataclass
class AgentState:
    id: int
    kind: RobotKind
    pose: Pose
    carried: int | None = None
    primitive: Primitive | None = None

    @property
    def carrying(self) -> bool:
        return self.carried is not None

    @property
    def idle(self) -> bool:
        return self.primitive is None


@dataclass
class ObjectState:
    id: int
    cell: CellCoord
    removed: bool = False
    carried_by: int | None = None

    @property
    def active(self) -> bool:
        return not self.removed

    @property
    def free(self) -> bool:
        """On the floor: neither removed nor carried."""
        return not self.removed and self.carried_by is None


@dataclass(frozen=True)
class RewardEvent:
    agent: int
    kind: EventKind
    magnitude: float
    tick: int = 0


@dataclass
class WorldState:
    spec: EnvironmentSpec
    grid: OccupancyGrid
    agents: list[AgentState]
    objects: list[ObjectState]
    receptacle: frozenset = frozenset()
    tick: int = 0
    steps_since_progress: int = 0
    halted: list[int] = field(default_factory=list)
    seed: int | None = None
    _receptacle_field: np.ndarray | None = field(default=None, repr=False)

    @property
    def height(self) -> int:
        return self.grid.height

    def agent_cell(self, agent: AgentState) -> CellCoord:
        return pose_cell(agent.pose, self.grid.height)

    def receptacle_field(self) -> np.ndarray:
        """Ground-truth distance to the receptacle (cached; the grid is static)."""
        if self._receptacle_field is None:
            self._receptacle_field = distance_field(self.grid, sorted(self.receptacle))
        return self._receptacle_field

    def removed_count(self) -> int:
        return sum(o.removed for o in self.objects)

    def signature(self) -> tuple:
        """Hashable snapshot of all mutable state, for determinism checks."""
        return (
            self.grid.cells.tobytes(), self.tick, self.steps_since_progress,
            tuple((a.id, a.kind.value, a.pose, a.carried,
                   None if a.primitive is None else (tuple(a.primitive.path), a.primitive.effector.value,
                                                     a.primitive.progress, a.primitive.noop))
                  for a in self.agents),
            tuple((o.id, o.cell, o.removed, o.carried_by) for o in self.objects),
        )


# Generation

def _interior_mask(grid: OccupancyGrid) -> np.ndarray:
    return grid.cells == FREE


def _spaced_rows(rng: np.random.Generator, lo: int, hi: int, count: int, gap: int) -> list[int]:
    """Pick ``count`` distinct rows in [lo, hi] at least ``gap`` apart."""
    for _ in range(200):
        rows = sorted(int(r) for r in rng.choice(np.arange(lo, hi + 1), size=count, replace=False))
        if all(b - a >= gap for a, b in zip(rows, rows[1:])):
            return rows
    return [lo + i * (hi - lo) // max(1, count - 1) for i in range(count)]


def _build_layout(spec: EnvironmentSpec, rng: np.random.Generator):
    """Obstacle layout plus (robot_mask, object_mask) side restrictions or None."""
    w, h = spec.width, spec.height
    grid = OccupancyGrid.walled(w, h)
    cells = grid.cells
    sides = None
    mid = 1 + w // 2
    if spec.layout is Layout.SMALL_DIVIDER:
        col = mid + int(rng.integers(-1, 2))
        top = int(rng.integers(2, 4)) if h >= 12 else 2
        bottom = int(rng.integers(2, 4)) if h >= 12 else 2
        cells[1 + top:h + 1 - bottom, col] = OBSTACLE
        sides = (col, col)
    elif spec.layout is Layout.LARGE_DOORS:
        col = mid + int(rng.integers(-2, 3))
        cells[1:h + 1, col] = OBSTACLE
        for r in _spaced_rows(rng, 1, h, 2, 3):
            cells[r, col] = FREE
        sides = (col, col)
    elif spec.layout is Layout.LARGE_TUNNELS:
        thick = max(3, w // 8)
        col = mid - thick // 2 + int(rng.integers(-2, 3))
        cells[1:h + 1, col:col + thick] = OBSTACLE
        for r in _spaced_rows(rng, 1, h, 2, 3):
            cells[r, col:col + thick] = FREE
        sides = (col, col + thick - 1)
    elif spec.layout is Layout.LARGE_ROOMS:
        vcol = mid + int(rng.integers(-2, 3))
        hrow = 1 + h // 2 + int(rng.integers(-1, 2))
        cells[1:h + 1, vcol] = OBSTACLE
        cells[hrow, 1:w + 1] = OBSTACLE
        cells[int(rng.integers(1, hrow)), vcol] = FREE
        cells[int(rng.integers(hrow + 1, h + 1)), vcol] = FREE
        cells[hrow, int(rng.integers(1, vcol))] = FREE
        cells[hrow, int(rng.integers(vcol + 1, w + 1))] = FREE
    masks = None
    if spec.opposite_sides and sides is not None:
        cols = np.arange(w + 2)[None, :].repeat(h + 2, axis=0)
        # Robots start on the receptacle (right) side, objects on the far side.
        masks = (cols > sides[1], cols < sides[0])
    return grid, masks


def receptacle_cells(spec: EnvironmentSpec) -> frozenset:
    if not spec.has_receptacle:
        return frozenset()
    n = spec.receptacle_size
    return frozenset(CellCoord(c, r) for r in range(1, 1 + n) for c in range(spec.width + 1 - n, spec.width + 1))


def generate_environment(spec: EnvironmentSpec, seed: int, max_attempts: int = 100) -> WorldState:
    """Random world for ``spec``; deterministic in (spec, seed).

    Layouts whose objects are not all reachable from every robot (and from the
    receptacle) are regenerated with an incremented sub-seed.
    """
    recept = receptacle_cells(spec)
    for attempt in range(max_attempts):
        rng = np.random.default_rng([int(seed), attempt])
        grid, masks = _build_layout(spec, rng)
        free = _interior_mask(grid)
        for c in recept:
            free[c.row, c.col] = False
        robot_ok = free & masks[0] if masks else free.copy()
        robot_cells = np.argwhere(robot_ok)
        if len(robot_cells) < len(spec.team):
            raise GenerationError("not enough free cells for the robots")
        pick = rng.choice(len(robot_cells), size=len(spec.team), replace=False)
        robots = [CellCoord(int(robot_cells[i][1]), int(robot_cells[i][0])) for i in pick]
        object_ok = free & masks[1] if masks else free.copy()
        for rc in robots:
            object_ok[max(0, rc.row - 1):rc.row + 2, max(0, rc.col - 1):rc.col + 2] = False
        object_cells = np.argwhere(object_ok)
        if len(object_cells) < spec.num_objects:
            raise GenerationError("not enough free cells for the objects")
        pick = rng.choice(len(object_cells), size=spec.num_objects, replace=False)
        objects = [CellCoord(int(object_cells[i][1]), int(object_cells[i][0])) for i in pick]
        sources = list(robots) + ([sorted(recept)[0]] if recept else [])
        if all(_all_reachable(grid, s, objects) for s in sources):
            break
    else:
        raise GenerationError(f"no connected layout after {max_attempts} attempts")
    headings = rng.integers(0, 8, size=len(spec.team))
    agents = [AgentState(i, kind, pose_at(cell, grid.height, normalize8(int(k))))
              for i, (kind, cell, k) in enumerate(zip(spec.team, robots, headings))]
    objs = [ObjectState(i, cell) for i, cell in enumerate(objects)]
    return WorldState(spec, grid, agents, objs, recept, seed=int(seed))


def normalize8(k: int) -> float:
    from .gridcore import normalize_heading
    return normalize_heading(k * math.pi / 4)


def _all_reachable(grid: OccupancyGrid, src: CellCoord, targets: Sequence[CellCoord]) -> bool:
    d = distance_field(grid, [src])
    return all(d[t.row, t.col] != UNREACHABLE for t in targets)


# Primitives

def begin_primitive(world: WorldState, agent_id: int, action, belief: OccupancyGrid | None = None) -> AgentState:
    """Commit an idle agent to the primitive selected by ``action = (channel, target)``.

    The path is planned on ``belief`` (the agent's own map, unknown cells
    treated as traversable); ground truth is used when no belief is given.
    An unreachable target yields a one-tick no-op.
    """
    agent = world.agents[agent_id]
    if agent.primitive is not None:
        raise EnvironmentError_(f"agent {agent_id} is already executing a primitive")
    channel, target = action
    if not 0 <= channel < agent.kind.action_channels:
        raise EnvironmentError_(f"{agent.kind.value} robots have no action channel {channel}")
    start = world.agent_cell(agent)
    plan_grid = world.grid if belief is None else belief
    target = CellCoord(int(target[0]), int(target[1]))
    path = None
    if plan_grid.in_bounds(target) and plan_grid.state(target) != OBSTACLE:
        if plan_grid.state(start) == OBSTACLE:
            plan_grid = plan_grid.copy()
            plan_grid.cells[start.row, start.col] = FREE
        path = shortest_path(plan_grid, start, target, traversable_unknown=True)
    if path is None:
        agent.primitive = Primitive([start], Effector.NONE, noop=True)
    else:
        effector = Effector.NONE
        if channel == 1:
            if agent.kind is RobotKind.LIFTING:
                effector = Effector.DROP if agent.carrying else Effector.LIFT
            else:
                effector = Effector.THROW
        agent.primitive = Primitive(path, effector)
    world.steps_since_progress += 1
    return agent


# Dynamics

def _dist(a: CellCoord, b: CellCoord) -> float:
    return math.hypot(a.col - b.col, a.row - b.row)


def _nearest_object(world: WorldState, cell: CellCoord, radius: float) -> ObjectState | None:
    best = None
    for obj in world.objects:
        if not obj.free:
            continue
        d = _dist(obj.cell, cell)
        if d <= radius + 1e-9 and (best is None or d < best[0]):
            best = (d, obj)
    return None if best is None else best[1]


class _Tick:
    """Per-tick bookkeeping for :func:`tick`."""

    def __init__(self, world: WorldState):
        self.world = world
        self.events: list[RewardEvent] = []
        self.progress = False

    def emit(self, agent: int, kind: EventKind, magnitude: float | None = None):
        mag = REWARDS[kind] if magnitude is None else magnitude
        self.events.append(RewardEvent(agent, kind, float(mag), self.world.tick))

    def displace(self, obj: ObjectState, dest: CellCoord, agent: int):
        """Move an object, emitting shaping and removing it on entering the receptacle."""
        world = self.world
        if world.spec.has_receptacle:
            field_ = world.receptacle_field()
            before = field_[obj.cell.row, obj.cell.col]
            after = field_[dest.row, dest.col]
            self.emit(agent, EventKind.DISTANCE_SHAPING, world.spec.kappa * (before - after))
        obj.cell = dest
        if obj.carried_by is None and dest in world.receptacle:
            self.remove(obj, agent)

    def remove(self, obj: ObjectState, agent: int):
        obj.removed = True
        obj.carried_by = None
        self.emit(agent, EventKind.SUCCESS)
        self.progress = True


def tick(world: WorldState) -> tuple[WorldState, list[RewardEvent]]:
    """Advance the world one tick; returns the world (mutated in place) and its reward events."""
    t = _Tick(world)
    grid = world.grid
    agents = world.agents
    cell_of = {a.id: world.agent_cell(a) for a in agents}
    world.halted = []
    halted: set[int] = set()

    intent: dict[int, CellCoord] = {}
    for a in agents:
        p = a.primitive
        if p is not None and p.progress < len(p.path) - 1:
            intent[a.id] = p.path[p.progress + 1]

    for aid in list(intent):
        nxt = intent[aid]
        if not grid.in_bounds(nxt) or grid.state(nxt) != FREE:
            t.emit(aid, EventKind.OBSTACLE_COLLISION)
            del intent[aid]
            halted.add(aid)

    # Pushes are planned before agent conflicts so blocked pushers count as stationary.
    pushes: dict[int, tuple[list[ObjectState], CellCoord]] = {}
    reserved: set[CellCoord] = set()
    for a in agents:
        if a.kind is not RobotKind.PUSHING or a.id not in intent:
            continue
        nxt = intent[a.id]
        here = [o for o in world.objects if o.free and o.cell == nxt]
        if not here:
            continue
        cur = cell_of[a.id]
        dest = CellCoord(2 * nxt.col - cur.col, 2 * nxt.row - cur.row)
        blocked = (
            not grid.in_bounds(dest) or grid.state(dest) != FREE
            or any(o.free and o.cell == dest for o in world.objects)
            or dest in cell_of.values() or dest in reserved
            or any(c == dest for i, c in intent.items() if i != a.id)
            or (dest.col != nxt.col and dest.row != nxt.row
                and (grid.state(CellCoord(dest.col, nxt.row)) != FREE
                     or grid.state(CellCoord(nxt.col, dest.row)) != FREE))
        )
        if blocked:
            del intent[a.id]
            halted.add(a.id)
        else:
            pushes[a.id] = (here, dest)
            reserved.add(dest)

    collided: set[int] = set()
    changed = True
    while changed:
        changed = False
        movers = {i: c for i, c in intent.items() if i not in collided}
        occupant = {c: i for i, c in cell_of.items()}
        by_target = defaultdict(list)
        for i, c in movers.items():
            by_target[c].append(i)
        hit: set[int] = set()
        for ids in by_target.values():
            if len(ids) > 1:
                hit.update(ids)
        for i, c in movers.items():
            j = occupant.get(c)
            if j is None or j == i:
                continue
            if j in movers and movers[j] == cell_of[i]:
                hit.update((i, j))
            elif j not in movers:
                hit.update((i, j))
        new = hit - collided
        if new:
            collided |= new
            changed = True
    for aid in sorted(collided):
        t.emit(aid, EventKind.AGENT_COLLISION)
        intent.pop(aid, None)
        pushes.pop(aid, None)
        halted.add(aid)

    for a in agents:
        if a.id not in intent:
            continue
        cur, nxt = cell_of[a.id], intent[a.id]
        a.pose = pose_at(nxt, grid.height, step_heading(cur, nxt))
        a.primitive.progress += 1
        if a.id in pushes:
            objs, dest = pushes[a.id]
            for obj in objs:
                if obj.free:
                    t.displace(obj, dest, a.id)
        if a.carrying:
            t.displace(world.objects[a.carried], nxt, a.id)

    for a in agents:
        if a.kind is RobotKind.RESCUE:
            here = world.agent_cell(a)
            for obj in world.objects:
                if obj.free and _dist(obj.cell, here) <= world.spec.rescue_radius + 1e-9:
                    t.remove(obj, a.id)

    for a in agents:
        p = a.primitive
        if p is None:
            continue
        if a.id in halted:
            a.primitive = None
            continue
        if p.progress >= len(p.path) - 1:
            _resolve_effector(t, a)
            a.primitive = None

    world.halted = sorted(i for i in halted if i in {a.id for a in agents})
    world.tick += 1
    if t.progress:
        world.steps_since_progress = 0
    return world, t.events


def _resolve_effector(t: _Tick, agent: AgentState):
    world = t.world
    here = world.agent_cell(agent)
    effector = agent.primitive.effector
    if effector is Effector.LIFT and not agent.carrying:
        obj = _nearest_object(world, here, world.spec.effector_radius)
        if obj is not None:
            if obj.cell != here:
                t.displace(obj, here, agent.id)
            obj.carried_by = agent.id
            agent.carried = obj.id
    elif effector is Effector.DROP and agent.carrying:
        obj = world.objects[agent.carried]
        agent.carried = None
        obj.carried_by = None
        obj.cell = here
        if here in world.receptacle:
            t.remove(obj, agent.id)
        else:
            t.emit(agent.id, EventKind.DROP_OUTSIDE)
    elif effector is Effector.THROW:
        obj = _nearest_object(world, here, world.spec.effector_radius)
        if obj is None:
            return
        dc = -round(math.cos(agent.pose.heading))
        dr = round(math.sin(agent.pose.heading))
        cur = obj.cell
        grid = world.grid
        for _ in range(world.spec.throw_range):
            nxt = CellCoord(cur.col + dc, cur.row + dr)
            if not grid.in_bounds(nxt) or grid.state(nxt) != FREE:
                break
            if dc and dr and (grid.state(CellCoord(nxt.col, cur.row)) != FREE
                              or grid.state(CellCoord(cur.col, nxt.row)) != FREE):
                break
            cur = nxt
            if cur in world.receptacle:
                break
        if cur != obj.cell:
            t.displace(obj, cur, agent.id)


def is_episode_done(world: WorldState, spec: EnvironmentSpec | None = None) -> bool:
    spec = spec or world.spec
    if all(o.removed for o in world.objects):
        return True
    return world.steps_since_progress >= spec.no_progress_limit


# Logs

EVENT_FIELDS = ("tick", "agent", "kind", "magnitude")


def write_event_log(events: Sequence[RewardEvent], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(EVENT_FIELDS)
        for e in events:
            w.writerow([e.tick, e.agent, e.kind.value, repr(float(e.magnitude))])
    return path


def read_event_log(path) -> list[RewardEvent]:
    with open(path, newline="") as f:
        return [RewardEvent(int(r["agent"]), EventKind(r["kind"]), float(r["magnitude"]), int(r["tick"]))
                for r in csv.DictReader(f)]


def object_position(world: WorldState, obj: ObjectState) -> tuple[float, float]:
    return cell_center(obj.cell, world.grid.height)
