"""Per-location activation statistics: batch estimates, streaming clean-data
estimates, channel pooling, and the on-disk statistics container."""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .models import Model, _Reader
from .tensor import Tensor

STATS_MAGIC = b"ACTMADST"
STATS_VERSION = 1

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


class StatsFileError(ValueError):
    pass


class StatsInvariantError(StatsFileError):
    pass


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a hash."""
    h = _FNV_OFFSET
    for b in data:
        h ^= b
        h = (h * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


@dataclass
class LayerStats:
    layer_id: str
    shape: tuple[int, int, int]
    mean: np.ndarray
    var: np.ndarray
    n_samples: int
    # central moments of order >= 3, keyed by order; kept in memory only
    moments: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(self.shape)
        self.var = np.asarray(self.var, dtype=np.float64).reshape(self.shape)

    def validate(self) -> None:
        if self.mean.size != int(np.prod(self.shape)) or self.var.size != int(np.prod(self.shape)):
            raise StatsInvariantError(f"{self.layer_id}: payload size does not match shape {self.shape}")
        if np.any(self.var < 0):
            raise StatsInvariantError(f"{self.layer_id}: negative variance")
        if not (np.all(np.isfinite(self.mean)) and np.all(np.isfinite(self.var))):
            raise StatsInvariantError(f"{self.layer_id}: non-finite statistics")
        if self.n_samples < 2:
            raise StatsInvariantError(f"{self.layer_id}: n_samples must be >= 2, got {self.n_samples}")

    def central_moment(self, order: int) -> np.ndarray:
        if order == 1:
            return self.mean
        if order == 2:
            return self.var
        if order not in self.moments:
            raise KeyError(f"{self.layer_id}: no reference central moment of order {order}")
        return self.moments[order]

    def channel_averaged(self) -> "LayerStats":
        mean, var = channel_average_stats(self.mean, self.var)
        return LayerStats(self.layer_id, (self.shape[0], 1, 1), mean.reshape(-1, 1, 1), var.reshape(-1, 1, 1), self.n_samples)


@dataclass
class StatsBundle:
    model_fingerprint: int
    resolution: tuple[int, int]
    layers: list[LayerStats]

    def __post_init__(self):
        self.resolution = tuple(int(v) for v in self.resolution)

    @property
    def layer_ids(self) -> list[str]:
        return [layer.layer_id for layer in self.layers]

    def check_matches(self, model: Model) -> None:
        taps = model.tap_points
        if [t.layer_id for t in taps] != self.layer_ids:
            raise StatsFileError(f"statistics layers {self.layer_ids} do not match model taps {[t.layer_id for t in taps]}")
        for tap, layer in zip(taps, self.layers):
            if tuple(tap.expected_shape) != layer.shape:
                raise StatsFileError(f"{layer.layer_id}: statistics shape {layer.shape} != tap shape {tap.expected_shape}")

    def __eq__(self, other) -> bool:
        if not isinstance(other, StatsBundle):
            return NotImplemented
        if (self.model_fingerprint, self.resolution, self.layer_ids) != (other.model_fingerprint, other.resolution, other.layer_ids):
            return False
        for a, b in zip(self.layers, other.layers):
            if a.shape != b.shape or a.n_samples != b.n_samples:
                return False
            if a.mean.tobytes() != b.mean.tobytes() or a.var.tobytes() != b.var.tobytes():
                return False
        return True


# -- batch statistics ---------------------------------------------------------
def batch_mean_var(activations: Tensor) -> tuple[Tensor, Tensor]:
    """Mean and population variance over the batch axis only; stays on the tape."""
    a = T.as_tensor(activations)
    if a.ndim < 2:
        raise T.ShapeError(f"batch_mean_var: expected (N, ...) activations, got shape {a.shape}")
    if a.shape[0] < 2:
        raise ValueError(f"batch_mean_var: need at least 2 samples, got {a.shape[0]}")
    mean = T.tmean(a, axis=0)
    centered = a - mean
    var = T.tmean(centered * centered, axis=0)
    return mean, var


def batch_central_moments(activations: Tensor, max_order: int) -> list[Tensor]:
    """[mean, variance, E[(a-mu)^3], ..., E[(a-mu)^max_order]] over the batch axis."""
    a = T.as_tensor(activations)
    if a.shape[0] < 2:
        raise ValueError(f"batch_central_moments: need at least 2 samples, got {a.shape[0]}")
    mean = T.tmean(a, axis=0)
    centered = a - mean
    moments = [mean]
    power = centered
    for _ in range(2, max_order + 1):
        power = power * centered
        moments.append(T.tmean(power, axis=0))
    return moments


def channel_average_stats(mean: np.ndarray, var: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pool per-location (C, H, W) statistics into per-channel ones.

    The variance is that of the pooled N*H*W population (law of total
    variance), not the average of the per-location variances.
    """
    mean = np.asarray(mean, dtype=np.float64)
    var = np.asarray(var, dtype=np.float64)
    if mean.shape != var.shape or mean.ndim != 3:
        raise T.ShapeError(f"channel_average_stats: need matching (C, H, W) arrays, got {mean.shape} and {var.shape}")
    ch_mean = mean.mean(axis=(1, 2))
    ch_var = (var + (mean - ch_mean[:, None, None]) ** 2).mean(axis=(1, 2))
    return ch_mean, ch_var


def channel_batch_mean_var(activations: Tensor) -> tuple[Tensor, Tensor]:
    """Per-channel mean/variance pooled over N*H*W, shaped (C, 1, 1)."""
    a = T.as_tensor(activations)
    if a.ndim != 4:
        raise T.ShapeError(f"channel_batch_mean_var: expected NCHW, got {a.shape}")
    mean = T.tmean(a, axis=(0, 2, 3), keepdims=True)
    centered = a - mean
    var = T.tmean(centered * centered, axis=(0, 2, 3), keepdims=True)
    c = a.shape[1]
    return mean.reshape(c, 1, 1), var.reshape(c, 1, 1)


def channel_average(stats) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel (mean, var) from a ``LayerStats`` or from raw NCHW activations."""
    if isinstance(stats, LayerStats):
        return channel_average_stats(stats.mean, stats.var)
    a = np.asarray(stats.data if isinstance(stats, Tensor) else stats, dtype=np.float64)
    if a.ndim != 4:
        raise T.ShapeError(f"channel_average: expected NCHW activations, got {a.shape}")
    mean = a.mean(axis=(0, 2, 3))
    var = ((a - mean[None, :, None, None]) ** 2).mean(axis=(0, 2, 3))
    return mean, var


# -- streaming clean-data statistics -------------------------------------------
class RunningMoments:
    """Exact streaming mean and M2 per element, merged chunk-wise (Chan et al.)."""

    def __init__(self, shape: Sequence[int]):
        self.shape = tuple(shape)
        self.count = 0
        self.mean = np.zeros(self.shape)
        self.m2 = np.zeros(self.shape)

    def update(self, batch: np.ndarray) -> None:
        batch = np.asarray(batch, dtype=np.float64)
        if batch.shape[1:] != self.shape:
            raise T.ShapeError(f"activation shape drifted: expected {self.shape}, got {batch.shape[1:]}")
        n_b = batch.shape[0]
        if n_b == 0:
            return
        mean_b = batch.mean(axis=0)
        m2_b = ((batch - mean_b) ** 2).sum(axis=0)
        self.merge(n_b, mean_b, m2_b)

    def merge(self, n_b: int, mean_b: np.ndarray, m2_b: np.ndarray) -> None:
        n_a = self.count
        n = n_a + n_b
        delta = mean_b - self.mean
        self.mean = self.mean + delta * (n_b / n)
        self.m2 = self.m2 + m2_b + delta * delta * (n_a * n_b / n)
        self.count = n

    def merge_from(self, other: "RunningMoments") -> None:
        if other.count:
            self.merge(other.count, other.mean, other.m2)

    @property
    def var(self) -> np.ndarray:
        return self.m2 / self.count


def iter_batches(images: np.ndarray, batch_size: int):
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    for start in range(0, len(images), batch_size):
        yield images[start : start + batch_size]


def compute_training_stats(
    model: Model,
    images: np.ndarray,
    batch_size: int = 64,
    fingerprint: Optional[int] = None,
    max_order: int = 2,
) -> StatsBundle:
    """Clean-data statistics at every tap of ``model`` (eval-mode norms, no tape).

    With ``max_order > 2`` a second pass fills the higher central moments,
    which are only ever needed in memory.
    """
    images = np.asarray(images)
    if len(images) == 0:
        raise ValueError("compute_training_stats: empty dataset")
    if len(images) < 2:
        raise ValueError("compute_training_stats: need at least 2 images")
    was_training = model.training
    model.eval()
    try:
        accs = [RunningMoments(tap.expected_shape) for tap in model.tap_points]
        with T.no_grad():
            for chunk in iter_batches(images, batch_size):
                _, taps = model.forward_with_taps(chunk)
                for acc, tap in zip(accs, taps):
                    acc.update(tap.data)
            higher: list[dict[int, np.ndarray]] = [{} for _ in accs]
            if max_order > 2:
                sums = [{k: np.zeros(acc.shape) for k in range(3, max_order + 1)} for acc in accs]
                for chunk in iter_batches(images, batch_size):
                    _, taps = model.forward_with_taps(chunk)
                    for acc, tap, s in zip(accs, taps, sums):
                        centered = tap.data - acc.mean
                        power = centered * centered
                        for k in range(3, max_order + 1):
                            power = power * centered
                            s[k] += power.sum(axis=0)
                higher = [{k: v / acc.count for k, v in s.items()} for acc, s in zip(accs, sums)]
    finally:
        model.training = was_training
    layers = [
        LayerStats(tap.layer_id, tap.expected_shape, acc.mean, acc.var, acc.count, moments=h)
        for tap, acc, h in zip(model.tap_points, accs, higher)
    ]
    if fingerprint is None:
        from .models import checkpoint_bytes

        fingerprint = fnv1a64(checkpoint_bytes(model))
    return StatsBundle(fingerprint, model.cfg.input_resolution, layers)


# -- stats file ------------------------------------------------------------
def stats_bytes(bundle: StatsBundle) -> bytes:
    buf = io.BytesIO()
    buf.write(STATS_MAGIC)
    buf.write(struct.pack("<IQ", STATS_VERSION, bundle.model_fingerprint))
    buf.write(struct.pack("<II", *bundle.resolution))
    buf.write(struct.pack("<I", len(bundle.layers)))
    for layer in bundle.layers:
        layer.validate()
        raw = layer.layer_id.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<III", *layer.shape))
        buf.write(struct.pack("<Q", layer.n_samples))
        buf.write(np.ascontiguousarray(layer.mean, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(layer.var, dtype="<f8").tobytes())
    return buf.getvalue()


def save_stats(bundle: StatsBundle, path) -> None:
    Path(path).write_bytes(stats_bytes(bundle))


def load_stats_bytes(data: bytes) -> StatsBundle:
    r = _Reader(data, "stats file", StatsFileError)
    if r.take(len(STATS_MAGIC)) != STATS_MAGIC:
        raise StatsFileError("stats file: bad magic")
    version, fingerprint = r.unpack("<IQ")
    if version != STATS_VERSION:
        raise StatsFileError(f"stats file: unsupported version {version}")
    if fingerprint == 0:
        raise StatsFileError("stats file: model fingerprint absent")
    resolution = r.unpack("<II")
    (n_layers,) = r.unpack("<I")
    layers = []
    for _ in range(n_layers):
        (id_len,) = r.unpack("<I")
        try:
            layer_id = r.take(id_len).decode("utf-8")
        except UnicodeDecodeError:
            raise StatsFileError("stats file: layer id is not valid UTF-8") from None
        shape = r.unpack("<III")
        (n_samples,) = r.unpack("<Q")
        size = shape[0] * shape[1] * shape[2]
        mean = r.f64(size).reshape(shape)
        var = r.f64(size).reshape(shape)
        layer = LayerStats(layer_id, shape, mean, var, n_samples)
        layer.validate()
        layers.append(layer)
    if not r.exhausted:
        raise StatsFileError(f"stats file: {len(data) - r.pos} trailing bytes after last layer")
    return StatsBundle(fingerprint, resolution, layers)


def load_stats(path) -> StatsBundle:
    return load_stats_bytes(Path(path).read_bytes())
