"""Supervised training of source models on clean data."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .models import Model

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 8
    lr: float = 0.05
    batch_size: int = 32
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0


class DivergenceError(T.NonFiniteError):
    pass


def train_model(model: Model, images: np.ndarray, targets: np.ndarray, cfg: TrainConfig) -> list[float]:
    """Momentum SGD with cosine decay; returns the mean loss of every epoch."""
    rng = np.random.default_rng([cfg.seed, 11])
    params = model.parameters()
    velocity = [np.zeros_like(p.data) for p in params]
    n = len(images)
    steps_per_epoch = -(-n // cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    step = 0
    history = []
    model.train()
    try:
        for epoch in range(cfg.epochs):
            order = rng.permutation(n)
            losses = []
            for start in range(0, n, cfg.batch_size):
                idx = order[start : start + cfg.batch_size]
                if len(idx) < 2:
                    continue
                out = model(images[idx])
                if model.cfg.head == "classify":
                    loss = T.softmax_cross_entropy(out, targets[idx])
                else:
                    loss = T.mse(out, targets[idx])
                value = loss.item()
                if not np.isfinite(value):
                    raise DivergenceError(f"training loss became non-finite at epoch {epoch}, step {step}")
                model.zero_grad()
                loss.backward()
                lr = 0.5 * cfg.lr * (1.0 + np.cos(np.pi * step / total_steps))
                for p, v in zip(params, velocity):
                    g = p.grad if p.grad is not None else 0.0
                    if cfg.weight_decay and p.kind in (T.ParamKind.CONV_WEIGHT, T.ParamKind.DENSE_WEIGHT):
                        g = g + cfg.weight_decay * p.data
                    v *= cfg.momentum
                    v += g
                    p.data -= lr * v
                    p.grad = None
                losses.append(value)
                step += 1
            for p in params:
                if not np.all(np.isfinite(p.data)):
                    raise DivergenceError(f"parameter {p.name} became non-finite in epoch {epoch}")
            history.append(float(np.mean(losses)))
            log.info("epoch %d: loss %.4f", epoch, history[-1])
    finally:
        model.eval()
    return history
