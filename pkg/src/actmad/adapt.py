"""Online test-time adaptation by aligning activation statistics.

Each incoming batch is first predicted on, then used for exactly one
gradient step on the L1 distance between its per-location activation
mean/variance and the clean-data statistics, summed over tapped layers.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from . import tensor as T
from .data import StreamBatch
from .models import ConfigError, Model
from .stats import (
    LayerStats,
    StatsBundle,
    batch_central_moments,
    batch_mean_var,
    channel_batch_mean_var,
)
from .tensor import AFFINE_KINDS, Tensor

LR_SCALINGS = ("linear_with_batch", "fixed")
LAYER_MODES = ("multi_layer", "last_layer_only")
STAT_MODES = ("per_location", "channel_averaged")
LOSS_MODES = ("mean_var_l1", "cmd")
PARAM_MODES = ("full", "affine_only")


class CapabilityError(RuntimeError):
    """The requested method cannot run on this model (e.g. entropy on a regressor)."""


class AlignmentError(T.NonFiniteError):
    pass


@dataclass
class AdaptConfig:
    lr: float = 4e-3  # at reference_batch_size
    batch_size: int = 32
    lr_scaling: str = "linear_with_batch"
    reference_batch_size: int = 128
    layer_mode: str = "multi_layer"
    stat_mode: str = "per_location"
    loss_mode: str = "mean_var_l1"
    cmd_order: int = 3
    param_mode: str = "full"
    steps_per_batch: int = 1
    layer_weights: Optional[list[float]] = None
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        checks = [
            (self.lr > 0, f"lr must be positive, got {self.lr}"),
            (self.batch_size >= 2, f"batch_size must be >= 2, got {self.batch_size}"),
            (self.reference_batch_size >= 1, "reference_batch_size must be >= 1"),
            (self.lr_scaling in LR_SCALINGS, f"lr_scaling must be one of {LR_SCALINGS}"),
            (self.layer_mode in LAYER_MODES, f"layer_mode must be one of {LAYER_MODES}"),
            (self.stat_mode in STAT_MODES, f"stat_mode must be one of {STAT_MODES}"),
            (self.loss_mode in LOSS_MODES, f"loss_mode must be one of {LOSS_MODES}"),
            (self.param_mode in PARAM_MODES, f"param_mode must be one of {PARAM_MODES}"),
            (self.loss_mode != "cmd" or self.cmd_order >= 2, "cmd_order must be >= 2"),
            (self.loss_mode != "cmd" or self.stat_mode == "per_location",
             "central moment alignment is only defined for per_location statistics"),
            (self.steps_per_batch >= 1, "steps_per_batch must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(f"adapt config: {msg}")

    @property
    def effective_lr(self) -> float:
        if self.lr_scaling == "linear_with_batch":
            return self.lr * self.batch_size / self.reference_batch_size
        return self.lr

    @property
    def update_mask(self) -> Optional[frozenset]:
        return AFFINE_KINDS if self.param_mode == "affine_only" else None

    def replace(self, **changes) -> "AdaptConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AdaptConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown adapt config keys: {sorted(unknown)}")
        return cls(**d)


# -- losses ------------------------------------------------------------------------
def layer_alignment_loss(batch_mean, batch_var, train_mean, train_var, layer_id: str = "") -> Tensor:
    """|mean_B - mean_train| + |var_B - var_train|, summed over every element."""
    batch_mean, batch_var = T.as_tensor(batch_mean), T.as_tensor(batch_var)
    train_mean = np.asarray(train_mean, dtype=np.float64)
    train_var = np.asarray(train_var, dtype=np.float64)
    for label, b, t in (("mean", batch_mean, train_mean), ("variance", batch_var, train_var)):
        if b.shape != t.shape:
            raise T.ShapeError(f"layer {layer_id or '?'}: batch {label} shape {b.shape} != stored shape {t.shape}")
    return T.l1_distance(batch_mean, Tensor(train_mean)) + T.l1_distance(batch_var, Tensor(train_var))


class AlignmentTarget:
    """Clean-data statistics prepared once for a given adaptation config."""

    def __init__(self, bundle: StatsBundle, cfg: AdaptConfig):
        self.bundle = bundle
        self.cfg = cfg
        layers = bundle.layers
        if cfg.stat_mode == "channel_averaged":
            layers = [layer.channel_averaged() for layer in layers]
        self.layers: list[LayerStats] = layers
        if cfg.loss_mode == "cmd":
            for layer in bundle.layers:
                for k in range(3, cfg.cmd_order + 1):
                    layer.central_moment(k)  # raises if missing
        weights = cfg.layer_weights
        if weights is not None and len(weights) != len(layers):
            raise ConfigError(f"layer_weights has {len(weights)} entries for {len(layers)} layers")
        self.weights = [1.0] * len(layers) if weights is None else [float(w) for w in weights]

    def selected(self) -> list[int]:
        if self.cfg.layer_mode == "last_layer_only":
            return [len(self.layers) - 1]
        return list(range(len(self.layers)))


def _layer_term(tap: Tensor, layer: LayerStats, cfg: AdaptConfig) -> Tensor:
    if cfg.loss_mode == "cmd":
        return cmd_layer_loss(tap, layer, cfg.cmd_order)
    if cfg.stat_mode == "channel_averaged":
        mean, var = channel_batch_mean_var(tap)
    else:
        mean, var = batch_mean_var(tap)
    return layer_alignment_loss(mean, var, layer.mean, layer.var, layer.layer_id)


def cmd_layer_loss(tap: Tensor, layer: LayerStats, max_order: int) -> Tensor:
    """Sum over k = 1..max_order of the element-wise L1 gap between central moments."""
    if max_order < 2:
        raise ValueError("max_order must be >= 2")
    moments = batch_central_moments(tap, max_order)
    total = None
    for k, m in enumerate(moments, start=1):
        ref = layer.central_moment(k)
        if m.shape != ref.shape:
            raise T.ShapeError(f"layer {layer.layer_id}: order-{k} moment shape {m.shape} != stored {ref.shape}")
        term = T.l1_distance(m, Tensor(ref))
        total = term if total is None else total + term
    return total


def cmd_loss(taps: Sequence[Tensor], bundle: StatsBundle, max_order: int) -> Tensor:
    if len(taps) != len(bundle.layers):
        raise T.ShapeError(f"{len(taps)} taps for {len(bundle.layers)} stored layers")
    total = None
    for tap, layer in zip(taps, bundle.layers):
        term = cmd_layer_loss(tap, layer, max_order)
        total = term if total is None else total + term
    return total


def total_alignment_loss(taps: Sequence[Tensor], bundle, cfg: AdaptConfig) -> tuple[Tensor, dict[str, float]]:
    """Unweighted (by default) sum of per-layer alignment losses, plus the breakdown."""
    target = bundle if isinstance(bundle, AlignmentTarget) else AlignmentTarget(bundle, cfg)
    if len(taps) != len(target.layers):
        raise T.ShapeError(f"{len(taps)} taps for {len(target.layers)} stored layers")
    total = None
    breakdown: dict[str, float] = {}
    for i in target.selected():
        layer = target.layers[i]
        term = _layer_term(taps[i], layer, cfg)
        breakdown[layer.layer_id] = term.item()
        if target.weights[i] != 1.0:
            term = term * target.weights[i]
        total = term if total is None else total + term
    return total, breakdown


# -- reports -------------------------------------------------------------------------
@dataclass
class StepRecord:
    batch: int
    n: int
    segment: int
    condition: str
    metric: Optional[float]
    loss: Optional[float]
    layer_losses: dict[str, float]
    drift: float
    updated: bool

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class AdaptReport:
    method: str
    metric_name: str
    records: list[StepRecord] = field(default_factory=list)
    wall_time: float = 0.0

    @property
    def final_metric(self) -> Optional[float]:
        scored = [(r.metric, r.n) for r in self.records if r.metric is not None]
        if not scored:
            return None
        total = sum(n for _, n in scored)
        return float(sum(m * n for m, n in scored) / total)

    @property
    def mean_loss(self) -> Optional[float]:
        losses = [r.loss for r in self.records if r.loss is not None]
        return float(np.mean(losses)) if losses else None

    def segment_metric(self, segment: int) -> Optional[float]:
        scored = [(r.metric, r.n) for r in self.records if r.segment == segment and r.metric is not None]
        if not scored:
            return None
        return float(sum(m * n for m, n in scored) / sum(n for _, n in scored))

    def summary(self) -> dict:
        return {
            "summary": True,
            "method": self.method,
            "metric_name": self.metric_name,
            "n_batches": len(self.records),
            "final_metric": self.final_metric,
            "mean_loss": self.mean_loss,
            "final_drift": self.records[-1].drift if self.records else 0.0,
        }

    def to_jsonl(self) -> str:
        lines = [json.dumps(r.to_dict(), sort_keys=True) for r in self.records]
        lines.append(json.dumps(self.summary(), sort_keys=True))
        return "\n".join(lines) + "\n"


def _metric_on(model: Model, out: Tensor, labels) -> Optional[float]:
    if labels is None:
        return None
    labels = np.asarray(labels)
    if model.cfg.head == "classify":
        return float(np.mean(out.data.argmax(axis=1) == labels))
    return float(np.mean((out.data - labels) ** 2))


def _metric_name(model: Model) -> str:
    return "accuracy" if model.cfg.head == "classify" else "mse"


class _Drift:
    def __init__(self, model: Model):
        self.ref = [p.data.copy() for p in model.parameters()]
        self.ref_norm = float(np.sqrt(sum(float(np.sum(r * r)) for r in self.ref)))

    def __call__(self, model: Model) -> float:
        return float(np.sqrt(sum(float(np.sum((p.data - r) ** 2)) for p, r in zip(model.parameters(), self.ref))))


# -- adaptation ------------------------------------------------------------------------
def adapt_step(model: Model, batch, bundle, cfg: AdaptConfig, labels=None, lr: Optional[float] = None) -> dict:
    """Predict on ``batch``, then take one gradient step on the alignment loss.

    ``labels`` only feed the returned pre-update metric.
    """
    images = batch.data if isinstance(batch, Tensor) else np.asarray(batch)
    if len(images) < 2:
        raise ValueError("adapt_step needs a batch of at least 2 images")
    target = bundle if isinstance(bundle, AlignmentTarget) else AlignmentTarget(bundle, cfg)
    lr = cfg.effective_lr if lr is None else lr
    model.eval()
    metric = None
    loss_value = None
    breakdown: dict[str, float] = {}
    for step in range(cfg.steps_per_batch):
        out, taps = model.forward_with_taps(images)
        if step == 0:
            metric = _metric_on(model, out, labels)
        loss, breakdown = total_alignment_loss(taps, target, cfg)
        if step == 0:
            loss_value = loss.item()
        if not np.isfinite(loss.item()):
            bad = next((k for k, v in breakdown.items() if not np.isfinite(v)), "?")
            raise AlignmentError(f"non-finite alignment loss; first non-finite layer: {bad}")
        model.zero_grad()
        loss.backward()
        T.sgd_step(model.parameters(), lr, cfg.update_mask)
    return {"metric": metric, "loss": loss_value, "layer_losses": breakdown}


def adapt_stream(model: Model, stream: Iterable[StreamBatch], bundle: StatsBundle, cfg: AdaptConfig,
                 method: str = "actmad") -> AdaptReport:
    """Single online pass: each batch is scored, then adapted on once.

    Batches with fewer than 2 images are scored but not adapted on.
    """
    start = time.perf_counter()
    target = AlignmentTarget(bundle, cfg)
    report = AdaptReport(method, _metric_name(model))
    drift = _Drift(model)
    lr = cfg.effective_lr
    model.eval()
    for i, b in enumerate(stream):
        if len(b) >= 2:
            rec = adapt_step(model, b.images, target, cfg, labels=b.labels, lr=lr)
            updated = True
        else:
            with T.no_grad():
                out = model(b.images)
            rec = {"metric": _metric_on(model, out, b.labels), "loss": None, "layer_losses": {}}
            updated = False
        report.records.append(StepRecord(i, len(b), b.segment, b.condition, rec["metric"], rec["loss"],
                                         rec["layer_losses"], drift(model), updated))
    if not report.records:
        raise ValueError("adapt_stream: empty stream")
    report.wall_time = time.perf_counter() - start
    return report


# -- baselines -----------------------------------------------------------------------
def baseline_source(model: Model, stream: Iterable[StreamBatch]) -> AdaptReport:
    """Evaluate without any adaptation."""
    start = time.perf_counter()
    report = AdaptReport("source", _metric_name(model))
    model.eval()
    with T.no_grad():
        for i, b in enumerate(stream):
            out = model(b.images)
            report.records.append(StepRecord(i, len(b), b.segment, b.condition, _metric_on(model, out, b.labels),
                                             None, {}, 0.0, False))
    if not report.records:
        raise ValueError("baseline_source: empty stream")
    report.wall_time = time.perf_counter() - start
    return report


def _batch_stat_forward(model: Model, images) -> tuple[Tensor, list[Tensor]]:
    """Forward with every norm normalizing by, and storing, the current batch statistics."""
    saved = model.cfg.momentum
    model.cfg.momentum = 1.0
    model.train()
    try:
        return model.forward_with_taps(images)
    finally:
        model.cfg.momentum = saved
        model.eval()


def baseline_norm(model: Model, stream: Iterable[StreamBatch]) -> AdaptReport:
    """Replace norm running statistics with each test batch's own statistics."""
    start = time.perf_counter()
    report = AdaptReport("norm", _metric_name(model))
    with T.no_grad():
        for i, b in enumerate(stream):
            out, _ = _batch_stat_forward(model, b.images)
            report.records.append(StepRecord(i, len(b), b.segment, b.condition, _metric_on(model, out, b.labels),
                                             None, {}, 0.0, False))
    if not report.records:
        raise ValueError("baseline_norm: empty stream")
    report.wall_time = time.perf_counter() - start
    return report


def prediction_entropy(logits: Tensor) -> Tensor:
    logp = T.log_softmax(logits)
    return T.tmean(-T.tsum(T.exp(logp) * logp, axis=1))


def baseline_entropy(model: Model, stream: Iterable[StreamBatch], lr: float) -> AdaptReport:
    """Entropy minimization over norm scale/shift, normalizing by batch statistics."""
    if model.cfg.head != "classify":
        raise CapabilityError("entropy minimization needs a probabilistic classifier output; this model regresses")
    start = time.perf_counter()
    report = AdaptReport("entropy", _metric_name(model))
    drift = _Drift(model)
    for i, b in enumerate(stream):
        out, _ = _batch_stat_forward(model, b.images)
        metric = _metric_on(model, out, b.labels)
        loss = prediction_entropy(out)
        model.zero_grad()
        loss.backward()
        T.sgd_step(model.parameters(), lr, AFFINE_KINDS)
        report.records.append(StepRecord(i, len(b), b.segment, b.condition, metric, loss.item(), {}, drift(model), True))
    if not report.records:
        raise ValueError("baseline_entropy: empty stream")
    report.wall_time = time.perf_counter() - start
    return report
