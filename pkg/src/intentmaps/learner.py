"""Fully convolutional Q-network, replay buffer and the double DQN training recipe."""

from __future__ import annotations

import copy
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .environment import RobotKind, Task


class LearnerError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


# Network

SCALES = {
    # (widths, blocks per stage, strides, head widths)
    "desk": ((16, 32, 64, 128), (1, 1, 1, 1), (1, 1, 1, 1), (32, 16)),
    "full": ((64, 128, 256, 512), (2, 2, 2, 2), (1, 2, 2, 1), (128, 32)),
}


@dataclass(frozen=True)
class QNetworkSpec:
    input_channels: int
    output_channels: int
    scale: str = "desk"
    sigmoid: bool = False

    def __post_init__(self):
        if self.scale not in SCALES:
            raise LearnerError(f"unknown network scale {self.scale!r}")
        if self.input_channels < 1 or self.output_channels < 1:
            raise LearnerError("channel counts must be positive")


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        skip = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + skip)


class FCQNetwork(nn.Module):
    """Residual encoder, then 1x1 convs interleaved with bilinear upsampling to input size."""

    def __init__(self, spec: QNetworkSpec):
        super().__init__()
        self.spec = spec
        widths, blocks, strides, head = SCALES[spec.scale]
        self.stem = nn.Sequential(nn.Conv2d(spec.input_channels, widths[0], 3, 1, 1, bias=False),
                                  nn.BatchNorm2d(widths[0]), nn.ReLU(inplace=True))
        layers = []
        cin = widths[0]
        for w, n, s in zip(widths, blocks, strides):
            for k in range(n):
                layers.append(BasicBlock(cin, w, s if k == 0 else 1))
                cin = w
        self.encoder = nn.Sequential(*layers)
        self.head1 = nn.Sequential(nn.Conv2d(cin, head[0], 1, bias=False), nn.BatchNorm2d(head[0]), nn.ReLU(inplace=True))
        self.head2 = nn.Sequential(nn.Conv2d(head[0], head[1], 1, bias=False), nn.BatchNorm2d(head[1]), nn.ReLU(inplace=True))
        self.head3 = nn.Conv2d(head[1], spec.output_channels, 1)
        self.reset_parameters()

    def reset_parameters(self):
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
        # Small initial outputs keep early Q-values near the reward scale.
        nn.init.normal_(self.head3.weight, std=1e-3)

    def forward(self, x):
        h, w = x.shape[-2:]
        feat = self.encoder(self.stem(x))
        # Each upsampling at most doubles the feature size; at stride 1 both are identities.
        mid = (min(h, 2 * feat.shape[-2]), min(w, 2 * feat.shape[-1]))
        y = self.head1(feat)
        y = F.interpolate(y, size=mid, mode="bilinear", align_corners=False)
        y = self.head2(y)
        y = F.interpolate(y, size=(h, w), mode="bilinear", align_corners=False)
        y = self.head3(y)
        return torch.sigmoid(y) if self.spec.sigmoid else y


def build_network(spec: QNetworkSpec, seed: int | None = None) -> FCQNetwork:
    if seed is None:
        return FCQNetwork(spec)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return FCQNetwork(spec)


def _as_batch(state, channels: int) -> torch.Tensor:
    arr = state.channels if hasattr(state, "channels") else state
    x = torch.as_tensor(np.asarray(arr, dtype=np.float32))
    if x.dim() == 3:
        x = x.unsqueeze(0)
    if x.dim() != 4 or x.shape[1] != channels:
        raise LearnerError(f"state has shape {tuple(x.shape)}, network expects {channels} channels")
    return x


def forward(network: nn.Module, state) -> np.ndarray:
    """Q-value map (action_channels, H, W) for one state, evaluated with running statistics."""
    network.eval()
    with torch.no_grad():
        q = network(_as_batch(state, network.spec.input_channels))
    return q[0].numpy()


# Actions

class ActionIndex(NamedTuple):
    channel: int
    row: int
    col: int


def select_action(qmap: np.ndarray, epsilon: float, rng: np.random.Generator) -> ActionIndex:
    """Epsilon-greedy over all (channel, row, col); greedy ties go to the lowest linear index."""
    q = np.asarray(qmap)
    if q.size == 0:
        raise LearnerError("cannot select from an empty Q-value map")
    if not 0.0 <= epsilon <= 1.0:
        raise LearnerError("epsilon must lie in [0, 1]")
    if q.ndim == 2:
        q = q[None]
    if epsilon > 0 and rng.random() < epsilon:
        flat = int(rng.integers(q.size))
    else:
        flat = int(np.argmax(q))
    return ActionIndex(*(int(v) for v in np.unravel_index(flat, q.shape)))


# Replay

@dataclass
class Transition:
    state: np.ndarray
    action: ActionIndex
    reward: float
    next_state: np.ndarray
    terminal: bool
    aux_target: np.ndarray | None = None  # communicated intention map, for the predictor

    def __post_init__(self):
        if not np.isfinite(self.reward):
            raise LearnerError("transition reward must be finite")
        if self.state.shape != self.next_state.shape:
            raise LearnerError("state and next_state shapes differ")


class ReplayBuffer:
    """Fixed-capacity FIFO store with uniform sampling."""

    def __init__(self, capacity: int = 10_000):
        if capacity < 1:
            raise LearnerError("capacity must be positive")
        self.capacity = capacity
        self._items: list[Transition] = []
        self._next = 0
        self.inserted = 0

    def __len__(self):
        return len(self._items)

    def push(self, transition: Transition):
        if len(self._items) < self.capacity:
            self._items.append(transition)
        else:
            self._items[self._next] = transition
        self._next = (self._next + 1) % self.capacity
        self.inserted += 1

    def oldest_first(self) -> list[Transition]:
        if len(self._items) < self.capacity:
            return list(self._items)
        return self._items[self._next:] + self._items[:self._next]

    def sample(self, batch_size: int, rng: np.random.Generator) -> list[Transition]:
        if len(self._items) < batch_size:
            raise LearnerError(f"buffer holds {len(self._items)} transitions, need {batch_size}")
        idx = rng.integers(len(self._items), size=batch_size)
        return [self._items[i] for i in idx]


# Schedules and configuration

@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 32
    grad_clip: float = 100.0
    gamma: float | None = None  # None: chosen by task
    train_freq: int = 4
    target_update: int = 1000
    total_steps: int = 160_000
    prefill_fraction: float = 1 / 40
    epsilon_start: float = 1.0
    epsilon_end: float = 0.01
    epsilon_fraction: float = 0.1
    buffer_capacity: int = 10_000
    scale: str = "desk"
    checkpoint_fraction: float = 0.1

    def gamma_for(self, task) -> float:
        if self.gamma is not None:
            return self.gamma
        return 0.35 if Task(task) is Task.SEARCH_AND_RESCUE else 0.85

    @property
    def prefill_steps(self) -> int:
        return int(round(self.total_steps * self.prefill_fraction))

    @property
    def anneal_steps(self) -> float:
        return self.total_steps * self.epsilon_fraction

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, data: dict) -> "TrainConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise LearnerError(f"unknown training keys: {sorted(unknown)}")
        return cls(**data)


def epsilon_at(step: int, config: TrainConfig) -> float:
    """Linear anneal from epsilon_start to epsilon_end over the first fraction of training."""
    frac = min(max(step, 0) / config.anneal_steps, 1.0) if config.anneal_steps > 0 else 1.0
    return config.epsilon_start + frac * (config.epsilon_end - config.epsilon_start)


def sync_target(online: nn.Module, target: nn.Module, step: int, every: int = 1000) -> bool:
    """Hard copy of all parameters and buffers on multiples of ``every``."""
    if step % every != 0:
        return False
    target.load_state_dict(online.state_dict())
    return True


# Loss and update

def _batch_tensors(batch: Sequence[Transition]):
    states = torch.as_tensor(np.stack([t.state for t in batch]).astype(np.float32))
    next_states = torch.as_tensor(np.stack([t.next_state for t in batch]).astype(np.float32))
    rewards = torch.tensor([t.reward for t in batch], dtype=torch.float64)
    terminal = torch.tensor([t.terminal for t in batch], dtype=torch.bool)
    actions = torch.tensor([list(t.action) for t in batch], dtype=torch.long)
    return states, actions, rewards, next_states, terminal


def double_dqn_targets(batch: Sequence[Transition], online: nn.Module, target: nn.Module, gamma: float) -> torch.Tensor:
    """r + gamma * Q_target(s', argmax_a Q_online(s', a)), or r alone for terminal transitions.

    Computed in float64 with both networks in evaluation mode.
    """
    if not len(batch):
        raise LearnerError("empty batch")
    _, _, rewards, next_states, terminal = _batch_tensors(batch)
    online_mode, target_mode = online.training, target.training
    online.eval()
    target.eval()
    with torch.no_grad():
        q_online = online(next_states).flatten(1)
        best = q_online.argmax(dim=1, keepdim=True)
        q_eval = target(next_states).flatten(1).gather(1, best).squeeze(1).double()
    online.train(online_mode)
    target.train(target_mode)
    bootstrap = torch.where(terminal, torch.zeros_like(q_eval), q_eval)
    return rewards + gamma * bootstrap


def q_values_at(qmaps: torch.Tensor, actions: torch.Tensor) -> torch.Tensor:
    idx = torch.arange(qmaps.shape[0])
    return qmaps[idx, actions[:, 0], actions[:, 1], actions[:, 2]]


def td_loss(predicted: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    return F.smooth_l1_loss(predicted, targets.to(predicted.dtype), reduction="mean")


def make_optimizer(net: nn.Module, config: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.SGD(net.parameters(), lr=config.learning_rate, momentum=config.momentum,
                           weight_decay=config.weight_decay)


def train_on_batch(batch, online, target, optimizer, config: TrainConfig, gamma: float) -> float:
    targets = double_dqn_targets(batch, online, target, gamma)
    states, actions, *_ = _batch_tensors(batch)
    online.train()
    loss = td_loss(q_values_at(online(states), actions), targets)
    optimizer.zero_grad()
    loss.backward()
    nn.utils.clip_grad_norm_(online.parameters(), config.grad_clip)
    optimizer.step()
    return float(loss.detach())


def train_step(buffer: ReplayBuffer, online, target, optimizer, config: TrainConfig, step: int,
               rng: np.random.Generator, gamma: float | None = None):
    """One SGD update on a uniformly sampled batch; None when skipped.

    Skips when ``step`` is not a multiple of the train frequency or the buffer
    holds fewer than one batch.
    """
    if step % config.train_freq != 0 or len(buffer) < config.batch_size:
        return None
    batch = buffer.sample(config.batch_size, rng)
    return train_on_batch(batch, online, target, optimizer, config, config.gamma_for(Task.FORAGING) if gamma is None else gamma)


# Checkpoints

Q_MAGIC = b"SIMQ1"


def save_checkpoint(path, net: nn.Module, metadata: dict | None = None, magic: bytes = Q_MAGIC) -> Path:
    """Versioned container: magic, u32 header length, JSON header, float32 LE parameter blob.

    The blob concatenates every state_dict entry in the order listed in the header's layout.
    """
    state = net.state_dict()
    layout = [[name, list(t.shape)] for name, t in state.items()]
    header = {"network": asdict(net.spec), "layout": layout, "metadata": metadata or {}}
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = b"".join(t.detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes()
                    for t in state.values())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(magic)
        f.write(struct.pack("<I", len(hbytes)))
        f.write(hbytes)
        f.write(blob)
    return path


def read_checkpoint_header(path, magic: bytes = Q_MAGIC) -> tuple[dict, bytes]:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from None
    if data[:len(magic)] != magic:
        raise CheckpointError(f"{path} is not a {magic.decode()} checkpoint")
    off = len(magic)
    (n,) = struct.unpack("<I", data[off:off + 4])
    header = json.loads(data[off + 4:off + 4 + n].decode("utf-8"))
    return header, data[off + 4 + n:]


def load_checkpoint(path, magic: bytes = Q_MAGIC) -> tuple[FCQNetwork, dict]:
    header, blob = read_checkpoint_header(path, magic)
    net = FCQNetwork(QNetworkSpec(**header["network"]))
    state = net.state_dict()
    if [[k, list(v.shape)] for k, v in state.items()] != header["layout"]:
        raise CheckpointError("checkpoint layout does not match the network spec")
    values = np.frombuffer(blob, dtype="<f4")
    expected = sum(v.numel() for v in state.values())
    if values.size != expected:
        raise CheckpointError(f"checkpoint holds {values.size} values, expected {expected}")
    off = 0
    loaded = {}
    for name, t in state.items():
        n = t.numel()
        loaded[name] = torch.from_numpy(values[off:off + n].copy()).reshape(t.shape).to(t.dtype)
        off += n
    net.load_state_dict(loaded)
    net.eval()
    return net, header["metadata"]


# Per-kind policies

@dataclass
class Policy:
    """Online/target network pair with its own buffer and optimizer for one robot kind."""
    kind: RobotKind
    online: FCQNetwork
    target: FCQNetwork
    optimizer: torch.optim.Optimizer
    buffer: ReplayBuffer
    train_steps: int = 0
    losses: list = field(default_factory=list)

    @classmethod
    def create(cls, kind: RobotKind, input_channels: int, config: TrainConfig, seed: int) -> "Policy":
        spec = QNetworkSpec(input_channels, RobotKind(kind).action_channels, config.scale)
        online = build_network(spec, seed)
        target = copy.deepcopy(online)
        target.eval()
        return cls(RobotKind(kind), online, target, make_optimizer(online, config), ReplayBuffer(config.buffer_capacity))

    @classmethod
    def frozen(cls, kind: RobotKind, net: FCQNetwork) -> "Policy":
        net.eval()
        return cls(RobotKind(kind), net, net, None, ReplayBuffer(1))

    def q_map(self, state) -> np.ndarray:
        return forward(self.online, state)
