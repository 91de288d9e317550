"""Decentralized asynchronous execution: intention messages, mailboxes and episode drivers."""

from __future__ import annotations

import csv
import heapq
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Protocol, Sequence

import numpy as np

from .environment import (
    AgentState, EventKind, RobotKind, WorldState, begin_primitive, is_episode_done, tick,
)
from .gridcore import CellCoord, crop_sample_cells, pose_at
from .learner import (
    ActionIndex, Policy, TrainConfig, Transition, epsilon_at, select_action, sync_target, train_on_batch,
)
from .perception import (
    AgentBelief, IntentionRecord, IntentionVariant, StateTensor, base_channel_names, build_state_tensor,
    encode_intention, history_records, intention_maps, observe, track_poses,
)
from .predictor import IntentionSource, PredictorTrainer, intention_source, predict_intention, predictor_input, \
    predictor_spec


class CoordinationError(ValueError):
    pass


# Messages

HEADER = struct.Struct("<BIBH")
PAIR = struct.Struct("<HH")


@dataclass(frozen=True)
class IntentionMessage:
    agent_id: int
    seq: int
    waypoints: tuple
    effector: bool = False

    def __post_init__(self):
        if not self.waypoints:
            raise CoordinationError("intention messages need at least one waypoint")
        for a, b in zip(self.waypoints, self.waypoints[1:]):
            if max(abs(a[0] - b[0]), abs(a[1] - b[1])) != 1:
                raise CoordinationError("consecutive waypoints must be 8-adjacent")

    def encode(self) -> bytes:
        body = b"".join(PAIR.pack(c, r) for c, r in self.waypoints)
        return HEADER.pack(self.agent_id, self.seq, int(self.effector), len(self.waypoints)) + body

    @classmethod
    def decode(cls, data: bytes) -> "IntentionMessage":
        if len(data) < HEADER.size:
            raise CoordinationError("truncated intention message")
        agent_id, seq, eff, n = HEADER.unpack_from(data)
        if len(data) != HEADER.size + n * PAIR.size:
            raise CoordinationError("intention message length does not match its waypoint count")
        pts = tuple(CellCoord(*PAIR.unpack_from(data, HEADER.size + k * PAIR.size)) for k in range(n))
        return cls(agent_id, seq, pts, bool(eff))


@dataclass(frozen=True)
class Envelope:
    """A message plus the transport's send timestamp (ticks)."""
    message: IntentionMessage
    send_tick: int


class Mailbox:
    """Latest message per sender; older sequence numbers are discarded."""

    def __init__(self, owner: int):
        self.owner = owner
        self.latest: dict[int, Envelope] = {}

    def deliver(self, env: Envelope) -> bool:
        cur = self.latest.get(env.message.agent_id)
        if cur is not None and env.message.seq <= cur.message.seq:
            return False
        self.latest[env.message.agent_id] = env
        return True


class ChannelModel:
    """Per-recipient drop probability and fixed delay, with a seeded generator."""

    def __init__(self, drop_prob: float = 0.0, delay: int = 0, seed: int = 0):
        if not 0.0 <= drop_prob <= 1.0 or delay < 0:
            raise CoordinationError("drop probability must be in [0, 1] and delay non-negative")
        self.drop_prob = drop_prob
        self.delay = int(delay)
        self.rng = np.random.default_rng(seed)

    @property
    def lossless(self) -> bool:
        return self.drop_prob == 0 and self.delay == 0


class Network:
    """Broadcast fabric connecting every agent's mailbox through a channel model."""

    def __init__(self, agent_ids: Sequence[int], channel: ChannelModel | None = None):
        self.channel = channel or ChannelModel()
        self.mailboxes = {i: Mailbox(i) for i in agent_ids}
        self._pending: list = []
        self._order = 0
        self._seq = {i: 0 for i in agent_ids}
        self.bytes_sent = 0
        self.messages_sent = 0

    def next_seq(self, sender: int) -> int:
        self._seq[sender] += 1
        return self._seq[sender]

    def schedule(self, recipient: int, env: Envelope, at_tick: int):
        heapq.heappush(self._pending, (at_tick, self._order, recipient, env))
        self._order += 1

    def broadcast(self, msg: IntentionMessage, now: int) -> Envelope:
        env = Envelope(IntentionMessage.decode(msg.encode()), now)
        self.bytes_sent += len(msg.encode())
        self.messages_sent += 1
        for rid in sorted(self.mailboxes):
            if rid == msg.agent_id:
                continue
            if self.channel.drop_prob > 0 and self.channel.rng.random() < self.channel.drop_prob:
                continue
            if self.channel.delay == 0:
                self.mailboxes[rid].deliver(env)
            else:
                self.schedule(rid, env, now + self.channel.delay)
        return env

    def deliver_due(self, now: int):
        while self._pending and self._pending[0][0] <= now:
            _, _, rid, env = heapq.heappop(self._pending)
            self.mailboxes[rid].deliver(env)


def broadcast_intention(network: Network, agent: AgentState, now: int) -> IntentionMessage:
    """Announce the remaining path of the agent's committed primitive (or its cell when idle)."""
    p = agent.primitive
    if p is None:
        raise CoordinationError("agent has no committed primitive to announce")
    msg = IntentionMessage(agent.id, network.next_seq(agent.id), tuple(p.remaining),
                           p.effector.value != "none")
    network.broadcast(msg, now)
    return msg


def broadcast_halt(network: Network, agent: AgentState, cell: CellCoord, now: int) -> IntentionMessage:
    msg = IntentionMessage(agent.id, network.next_seq(agent.id), (cell,), False)
    network.broadcast(msg, now)
    return msg


def intentions_for(decider: int, mailbox: Mailbox, world_tick: int, height: int) -> list[IntentionRecord]:
    """Latest waypoints of every other sender, minus the cells it has already traversed."""
    out = []
    for sender in sorted(mailbox.latest):
        if sender == decider:
            continue
        env = mailbox.latest[sender]
        wps = env.message.waypoints
        elapsed = max(0, world_tick - env.send_tick)
        rest = list(wps[min(elapsed, len(wps) - 1):])
        out.append(IntentionRecord(sender, pose_at(rest[0], height), rest))
    return out


def ground_truth_intentions(world: WorldState, decider: int) -> list[IntentionRecord]:
    """Records rendered directly from in-flight primitives (for equivalence checks)."""
    out = []
    for a in world.agents:
        if a.id == decider:
            continue
        rest = list(a.primitive.remaining) if a.primitive is not None else [world.agent_cell(a)]
        out.append(IntentionRecord(a.id, pose_at(rest[0], world.grid.height), rest))
    return out


# Controllers

class Controller(Protocol):
    training: bool

    def epsilon(self) -> float: ...
    def q_map(self, kind: RobotKind, state: StateTensor) -> np.ndarray: ...
    def source(self) -> IntentionSource: ...
    def predict(self, kind: RobotKind, x: np.ndarray) -> np.ndarray: ...
    def record(self, kind: RobotKind, transition: Transition): ...
    def after_decision(self): ...
    @property
    def done(self) -> bool: ...


class EvalController:
    """Frozen policies acting epsilon-greedily (greedy-ish evaluation)."""
    training = False

    def __init__(self, policies: Mapping[RobotKind, Policy], predictors: Mapping | None = None,
                 epsilon: float = 0.01):
        self.policies = {RobotKind(k): v for k, v in policies.items()}
        self.predictors = {RobotKind(k): v for k, v in (predictors or {}).items()}
        self._eps = epsilon
        self.done = False

    def epsilon(self):
        return self._eps

    def q_map(self, kind, state):
        if kind not in self.policies:
            raise CoordinationError(f"no policy for robot kind {kind.value}")
        return self.policies[kind].q_map(state)

    def source(self):
        return IntentionSource.PREDICTED

    def predict(self, kind, x):
        if kind not in self.predictors:
            raise CoordinationError(f"no intention predictor for robot kind {kind.value}")
        return predict_intention(self.predictors[kind], x)

    def record(self, kind, transition):
        pass

    def after_decision(self):
        pass


class RandomController(EvalController):
    """Uniformly random actions: the untrained baseline."""

    def __init__(self):
        super().__init__({}, epsilon=1.0)

    def q_map(self, kind, state):
        return None

    def predict(self, kind, x):
        return np.zeros(x.shape[1:])


class TrainingSession:
    """Schedules for one training run: prefill, epsilon anneal, train frequency, target syncs.

    ``step`` counts decisions summed over all agents. One policy, buffer and
    (for predicted variants) predictor exist per robot kind.
    """
    training = True

    def __init__(self, kinds: Sequence[RobotKind], input_channels: int, config: TrainConfig, task,
                 variant=IntentionVariant.RAMP_PATH, seed: int = 0, base_channels: int | None = None,
                 on_checkpoint: Callable[[int], None] | None = None):
        self.config = config
        self.variant = IntentionVariant.parse(variant)
        self.gamma = config.gamma_for(task)
        self.rng = np.random.default_rng([seed, 7])
        kinds = sorted(set(RobotKind(k) for k in kinds), key=lambda k: list(RobotKind).index(k))
        self.policies = {k: Policy.create(k, input_channels, config, seed * 100 + i) for i, k in enumerate(kinds)}
        self.predictors: dict[RobotKind, PredictorTrainer] = {}
        self.base_channels = base_channels
        if self.variant.predicted:
            if base_channels is None:
                raise CoordinationError("predicted variants need the base channel count")
            spec = predictor_spec(base_channels, self.variant, config.scale)
            self.predictors = {k: PredictorTrainer(spec, self.variant, base_channels, config, seed * 100 + 50 + i)
                               for i, k in enumerate(kinds)}
        self.step = 0
        self.on_checkpoint = on_checkpoint
        self.checkpoint_every = max(1, int(round(config.total_steps * config.checkpoint_fraction)))
        self.schedule_log: list[tuple[str, int]] = []
        self.recent_losses: list[float] = []

    @property
    def done(self) -> bool:
        return self.step >= self.config.total_steps

    def epsilon(self) -> float:
        if self.step < self.config.prefill_steps:
            return 1.0
        return epsilon_at(self.step, self.config)

    def q_map(self, kind, state):
        if self.epsilon() >= 1.0:
            return None
        return self.policies[kind].q_map(state)

    def source(self):
        return intention_source(self.step, self.config.total_steps, "train")

    def predict(self, kind, x):
        return self.predictors[kind].predict(x)

    def record(self, kind, transition):
        self.policies[kind].buffer.push(transition)

    def after_decision(self):
        self.step += 1
        s, cfg = self.step, self.config
        if s > cfg.prefill_steps and s % cfg.train_freq == 0:
            for kind, pol in self.policies.items():
                if len(pol.buffer) < cfg.batch_size:
                    continue
                batch = pol.buffer.sample(cfg.batch_size, self.rng)
                loss = train_on_batch(batch, pol.online, pol.target, pol.optimizer, cfg, self.gamma)
                pol.train_steps += 1
                self.recent_losses.append(loss)
                self.schedule_log.append(("train", s))
                if kind in self.predictors:
                    self.predictors[kind].train_on_batch(batch)
        if s % cfg.target_update == 0:
            for pol in self.policies.values():
                sync_target(pol.online, pol.target, s, cfg.target_update)
            self.schedule_log.append(("sync", s))
        if self.on_checkpoint is not None and s % self.checkpoint_every == 0:
            self.on_checkpoint(s)


# Episodes

@dataclass
class EpisodeConfig:
    variant: IntentionVariant = IntentionVariant.RAMP_PATH
    out_size: int = 15
    channel: ChannelModel | None = None
    tick_budget: int | None = None
    max_ticks: int = 100_000
    ground_truth_distances: bool = False
    record_trajectories: bool = False

    def __post_init__(self):
        self.variant = IntentionVariant.parse(self.variant)


@dataclass
class EpisodeResult:
    objects_removed: int
    num_objects: int
    ticks: int
    returns: dict[int, float]
    decisions: dict[int, int]
    obstacle_collisions: dict[int, int]
    agent_collisions: dict[int, int]
    distance: dict[int, float]
    completed: bool
    bytes_sent: int = 0
    messages_sent: int = 0
    events: list = field(default_factory=list)
    trajectory: list = field(default_factory=list)


@dataclass
class _Pending:
    state: np.ndarray
    action: ActionIndex
    reward: float
    aux: np.ndarray | None


class _Episode:
    def __init__(self, world: WorldState, controller: Controller, cfg: EpisodeConfig, rng: np.random.Generator,
                 probe=None):
        self.world = world
        self.ctl = controller
        self.cfg = cfg
        self.rng = rng
        self.probe = probe
        self.variant = cfg.variant
        self.team_size = len(world.agents)
        self.beliefs = {a.id: AgentBelief.for_world(a.id, world) for a in world.agents}
        self.network = Network([a.id for a in world.agents], cfg.channel)
        self.pending: dict[int, _Pending] = {}
        self.base = len(base_channel_names(world.spec.task))
        ids = [a.id for a in world.agents]
        self.result = EpisodeResult(0, len(world.objects), 0, dict.fromkeys(ids, 0.0), dict.fromkeys(ids, 0),
                                    dict.fromkeys(ids, 0), dict.fromkeys(ids, 0), dict.fromkeys(ids, 0.0), False)

    def observe_all(self):
        for a in self.world.agents:
            observe(self.beliefs[a.id], self.world, a)
            if self.variant.uses_history:
                track_poses(self.beliefs[a.id], self.world)

    def communicated_records(self, agent) -> list[IntentionRecord]:
        return intentions_for(agent.id, self.network.mailboxes[agent.id], self.world.tick, self.world.grid.height)

    def state_for(self, agent: AgentState):
        """State tensor plus the communicated map used as predictor supervision (or None)."""
        world, cfg, v = self.world, self.cfg, self.variant
        belief = self.beliefs[agent.id]
        S = cfg.out_size
        shape = world.grid.shape
        aux = None
        if v in (IntentionVariant.NONE,):
            maps = [np.zeros((S, S))]
        elif v is IntentionVariant.HISTORY_MAP:
            maps = encode_intention(history_records(belief), v, agent.pose, S, shape, self.team_size)
        elif v.predicted:
            comm = None
            if self.ctl.training:
                comm = encode_intention(self.communicated_records(agent), IntentionVariant.RAMP_PATH,
                                        agent.pose, S, shape, self.team_size)[0]
                aux = comm
            extra = []
            if v is IntentionVariant.PREDICTED_WITH_HISTORY:
                extra = encode_intention(history_records(belief), IntentionVariant.HISTORY_MAP, agent.pose, S,
                                         shape, self.team_size)
            if self.ctl.source() is IntentionSource.COMMUNICATED:
                slot = comm
            else:
                base_state = build_state_tensor(belief, agent, [np.zeros((S, S))] * (1 + len(extra)), world, S,
                                                v, cfg.ground_truth_distances)
                x = predictor_input(base_state.channels, v, self.base)
                slot = self.ctl.predict(agent.kind, x)
            maps = [slot] + extra
        else:
            recs = self.communicated_records(agent)
            maps = intention_maps(encode_intention(recs, v, agent.pose, S, shape, self.team_size), v, S)
        state = build_state_tensor(belief, agent, maps, world, S, v, cfg.ground_truth_distances)
        return state, aux

    def finalize(self, agent: AgentState, next_state: np.ndarray, terminal: bool):
        p = self.pending.pop(agent.id, None)
        if p is None or not self.ctl.training:
            return
        self.ctl.record(agent.kind, Transition(p.state, p.action, p.reward, next_state, terminal, p.aux))

    def decide(self, agent: AgentState):
        state, aux = self.state_for(agent)
        self.finalize(agent, state.channels, False)
        if self.probe is not None:
            self.probe(self, agent, state)
        q = self.ctl.q_map(agent.kind, state)
        if q is None:
            q = np.zeros((agent.kind.action_channels,) + state.channels.shape[1:])
        action = select_action(q, self.ctl.epsilon(), self.rng)
        rows, cols = crop_sample_cells(agent.pose, self.cfg.out_size, self.world.grid.height)
        target = (int(cols[action.row, action.col]), int(rows[action.row, action.col]))
        begin_primitive(self.world, agent.id, (action.channel, target), self.beliefs[agent.id].grid)
        broadcast_intention(self.network, agent, self.world.tick)
        self.pending[agent.id] = _Pending(state.channels, action, 0.0, aux)
        self.result.decisions[agent.id] += 1
        self.ctl.after_decision()

    def finished(self) -> bool:
        w = self.world
        if is_episode_done(w):
            return True
        if self.cfg.tick_budget is not None and w.tick >= self.cfg.tick_budget:
            return True
        return w.tick >= self.cfg.max_ticks

    def log_positions(self):
        if self.cfg.record_trajectories:
            for a in self.world.agents:
                self.result.trajectory.append((self.world.tick, a.id, a.pose.x, a.pose.y, a.pose.heading,
                                               int(a.carrying)))

    def run(self) -> EpisodeResult:
        world, res = self.world, self.result
        self.observe_all()
        for a in world.agents:
            broadcast_halt(self.network, a, world.agent_cell(a), world.tick)
        self.log_positions()
        while not self.finished() and not self.ctl.done:
            self.network.deliver_due(world.tick)
            for a in world.agents:
                if a.idle and not self.ctl.done:
                    self.decide(a)
            if self.ctl.done:
                break
            before = {a.id: (a.pose.x, a.pose.y) for a in world.agents}
            _, events = tick(world)
            for e in events:
                res.returns[e.agent] += e.magnitude
                if e.agent in self.pending:
                    self.pending[e.agent].reward += e.magnitude
                if e.kind is EventKind.OBSTACLE_COLLISION:
                    res.obstacle_collisions[e.agent] += 1
                elif e.kind is EventKind.AGENT_COLLISION:
                    res.agent_collisions[e.agent] += 1
            res.events.extend(events)
            for a in world.agents:
                x0, y0 = before[a.id]
                res.distance[a.id] += float(np.hypot(a.pose.x - x0, a.pose.y - y0))
            for aid in world.halted:
                a = world.agents[aid]
                broadcast_halt(self.network, a, world.agent_cell(a), world.tick)
            self.observe_all()
            self.log_positions()
        for a in world.agents:
            if a.id in self.pending:
                state, _ = self.state_for(a)
                self.finalize(a, state.channels, True)
        res.ticks = world.tick
        res.objects_removed = world.removed_count()
        res.completed = all(o.removed for o in world.objects)
        res.bytes_sent = self.network.bytes_sent
        res.messages_sent = self.network.messages_sent
        return res


def run_episode(world: WorldState, controller: Controller, config: EpisodeConfig, rng: np.random.Generator,
                probe=None) -> EpisodeResult:
    """Drive one episode: idle agents decide in id order, then the world ticks.

    In training mode the controller receives one transition per decision; the
    reward is the acting agent's event sum until its next decision.
    """
    if isinstance(controller, EvalController) and not isinstance(controller, RandomController):
        missing = {a.kind for a in world.agents} - set(controller.policies)
        if missing:
            raise CoordinationError(f"no policy for robot kinds: {sorted(k.value for k in missing)}")
    return _Episode(world, controller, config, rng, probe).run()


TRAJECTORY_FIELDS = ("tick", "id", "x", "y", "heading", "carrying")


def write_trajectory(rows, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(TRAJECTORY_FIELDS)
        for t, i, x, y, h, c in rows:
            w.writerow([t, i, repr(float(x)), repr(float(y)), repr(float(h)), c])
    return path


def read_trajectory(path) -> list[tuple]:
    with open(path, newline="") as f:
        return [(int(r["tick"]), int(r["id"]), float(r["x"]), float(r["y"]), float(r["heading"]),
                 int(r["carrying"])) for r in csv.DictReader(f)]
