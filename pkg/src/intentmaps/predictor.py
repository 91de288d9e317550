"""Communication-free variants: a network that predicts the intention map from state."""

from __future__ import annotations

from enum import Enum
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .learner import (
    FCQNetwork, LearnerError, QNetworkSpec, TrainConfig, Transition, build_network, load_checkpoint,
    make_optimizer, save_checkpoint,
)
from .perception import IntentionVariant

P_MAGIC = b"SIMP1"
SWITCH_FRACTION = 0.9
BCE_EPS = 1e-7


class IntentionSource(str, Enum):
    COMMUNICATED = "Communicated"
    PREDICTED = "Predicted"


def predictor_spec(base_channels: int, variant, scale: str = "desk") -> QNetworkSpec:
    """Input is the state without intention channels, plus the history channel when used."""
    variant = IntentionVariant.parse(variant)
    extra = 1 if variant is IntentionVariant.PREDICTED_WITH_HISTORY else 0
    return QNetworkSpec(base_channels + extra, 1, scale, sigmoid=True)


def build_predictor(spec: QNetworkSpec, seed: int | None = None) -> FCQNetwork:
    if not spec.sigmoid or spec.output_channels != 1:
        raise LearnerError("a predictor has one logistic output channel")
    return build_network(spec, seed)


def predictor_input(state: np.ndarray, variant, base_channels: int) -> np.ndarray:
    """Slice the predictor input out of a full state array (C, H, W)."""
    variant = IntentionVariant.parse(variant)
    base = state[:base_channels]
    if variant is IntentionVariant.PREDICTED_WITH_HISTORY:
        return np.concatenate([base, state[-1:]], axis=0)
    return base


def predict_intention(predictor: nn.Module, state_sans_intention) -> np.ndarray:
    """Predicted intention map, values in (0, 1), same spatial size as the input."""
    x = torch.as_tensor(np.asarray(state_sans_intention, dtype=np.float32))
    if x.dim() == 3:
        x = x.unsqueeze(0)
    if x.dim() != 4 or x.shape[1] != predictor.spec.input_channels:
        raise LearnerError(f"predictor expects {predictor.spec.input_channels} channels, got shape {tuple(x.shape)}")
    predictor.eval()
    with torch.no_grad():
        return predictor(x)[0, 0].numpy().astype(np.float64)


def predictor_loss(predicted: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean per-cell binary cross entropy with soft labels."""
    p = predicted.clamp(BCE_EPS, 1 - BCE_EPS)
    return F.binary_cross_entropy(p, target.to(p.dtype), reduction="mean")


def intention_source(step: int, total: int, mode: str = "train") -> IntentionSource:
    if mode != "train":
        return IntentionSource.PREDICTED
    return IntentionSource.COMMUNICATED if step < SWITCH_FRACTION * total else IntentionSource.PREDICTED


class PredictorTrainer:
    """Owns the predictor and its own optimizer; never touches Q-network parameters."""

    def __init__(self, spec: QNetworkSpec, variant, base_channels: int, config: TrainConfig, seed: int):
        self.net = build_predictor(spec, seed)
        self.variant = IntentionVariant.parse(variant)
        self.base_channels = base_channels
        self.config = config
        self.optimizer = make_optimizer(self.net, config)
        self.losses: list[float] = []

    def predict(self, state_sans_intention) -> np.ndarray:
        return predict_intention(self.net, state_sans_intention)

    def train_on_batch(self, batch: Sequence[Transition]) -> float | None:
        usable = [t for t in batch if t.aux_target is not None]
        if not usable:
            return None
        x = torch.as_tensor(np.stack([predictor_input(t.state, self.variant, self.base_channels)
                                      for t in usable]).astype(np.float32))
        y = torch.as_tensor(np.stack([t.aux_target for t in usable]).astype(np.float32)).unsqueeze(1)
        self.net.train()
        loss = predictor_loss(self.net(x), y)
        self.optimizer.zero_grad()
        loss.backward()
        nn.utils.clip_grad_norm_(self.net.parameters(), self.config.grad_clip)
        self.optimizer.step()
        value = float(loss.detach())
        self.losses.append(value)
        return value


def save_predictor(path, net: nn.Module, metadata: dict | None = None):
    return save_checkpoint(path, net, metadata, magic=P_MAGIC)


def load_predictor(path):
    return load_checkpoint(path, magic=P_MAGIC)
