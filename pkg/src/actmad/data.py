"""Procedural datasets, seeded image corruptions, and test streams.

All images are float64 arrays in [0, 1] laid out N x C x H x W. Every
generator and corruption is a pure function of its arguments and seed.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
from scipy import ndimage

from .models import _Reader

DATASET_MAGIC = b"ACTMADDS"
DATASET_VERSION = 1

SPLITS = ("train", "test")

# Harness-defined severity tables, index = severity - 1.
SEVERITY_TABLE: dict[str, tuple[float, ...]] = {
    "gaussian_noise": (0.04, 0.08, 0.12, 0.16, 0.2),  # noise std
    "shot_noise": (60.0, 30.0, 18.0, 13.0, 10.0),  # photon count at intensity 1
    "impulse_noise": (0.02, 0.04, 0.06, 0.09, 0.12),  # salt-and-pepper fraction
    "defocus_blur": (0.6, 1.0, 1.3, 1.6, 2.0),  # disk radius in pixels
    "brightness": (0.06, 0.12, 0.18, 0.24, 0.3),  # additive shift
    "contrast": (0.8, 0.7, 0.6, 0.5, 0.45),  # contrast factor around the image mean
    "fog": (0.25, 0.45, 0.7, 1.0, 1.2),  # fog field amplitude
    "snow_specks": (0.015, 0.03, 0.05, 0.07, 0.09),  # speck density
    "pixelate": (0.7, 0.6, 0.5, 0.42, 0.35),  # downsampled size / original size
}
CORRUPTION_KINDS = tuple(SEVERITY_TABLE)


class DatasetError(ValueError):
    pass


@dataclass
class SyntheticDataset:
    images: np.ndarray
    labels: np.ndarray
    kind: str  # "classification" or "localization"
    split: str
    seed: int
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, idx) -> "SyntheticDataset":
        return SyntheticDataset(self.images[idx], self.labels[idx], self.kind, self.split, self.seed, dict(self.meta))


def _split_rng(seed: int, split: str, purpose: int = 0) -> np.random.Generator:
    if split not in SPLITS:
        raise DatasetError(f"split must be one of {SPLITS}, got {split!r}")
    return np.random.default_rng([int(seed), SPLITS.index(split), purpose])


# -- classification ------------------------------------------------------------
def _grid(res: int) -> tuple[np.ndarray, np.ndarray]:
    coords = (np.arange(res) + 0.5) / res
    return np.meshgrid(coords, coords, indexing="ij")  # (y, x)


def _render_class(label: int, rng: np.random.Generator, res: int) -> np.ndarray:
    yy, xx = _grid(res)
    kind = label % 4
    if kind == 0:  # oriented grating
        theta = rng.uniform(0, math.pi)
        freq = rng.uniform(3.0, 5.0)
        phase = rng.uniform(0, 2 * math.pi)
        img = np.sin(2 * math.pi * freq * (xx * math.cos(theta) + yy * math.sin(theta)) + phase)
    elif kind == 1:  # gaussian blobs
        img = np.zeros((res, res))
        for _ in range(rng.integers(2, 5)):
            cy, cx = rng.uniform(0.15, 0.85, size=2)
            s = rng.uniform(0.06, 0.12)
            img += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
        img = 2.0 * np.clip(img, 0.0, 1.0) - 1.0
    elif kind == 2:  # checkerboard
        cells = rng.uniform(3.0, 6.0)
        oy, ox = rng.uniform(0, 1, size=2)
        img = np.sign(np.sin(math.pi * cells * (yy + oy)) * np.sin(math.pi * cells * (xx + ox)))
    else:  # concentric rings
        cy, cx = rng.uniform(0.3, 0.7, size=2)
        freq = rng.uniform(3.0, 5.0)
        phase = rng.uniform(0, 2 * math.pi)
        img = np.sin(2 * math.pi * freq * np.hypot(yy - cy, xx - cx) + phase)
    contrast = rng.uniform(0.3, 0.45)
    level = rng.uniform(0.4, 0.6)
    img = level + contrast * img + rng.normal(0.0, 0.02, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_classification_dataset(
    seed: int, n_classes: int = 4, n: int = 2000, resolution: int = 32, split: str = "train", channels: int = 1
) -> SyntheticDataset:
    """Balanced texture-family classification set (gratings, blobs, checkers, rings)."""
    if n_classes < 1 or n_classes > 4:
        raise DatasetError("n_classes must be between 1 and 4")
    if n % n_classes:
        raise DatasetError(f"n={n} is not divisible by n_classes={n_classes}")
    rng = _split_rng(seed, split)
    labels = np.repeat(np.arange(n_classes), n // n_classes)
    labels = labels[rng.permutation(n)]
    images = np.empty((n, channels, resolution, resolution))
    for i, lab in enumerate(labels):
        img = _render_class(int(lab), rng, resolution)
        images[i] = img[None] if channels == 1 else _tint(img, rng, channels)
    return SyntheticDataset(images, labels.astype(np.int64), "classification", split, seed,
                            {"n_classes": n_classes, "resolution": resolution})


def _tint(img: np.ndarray, rng: np.random.Generator, channels: int) -> np.ndarray:
    weights = rng.uniform(0.7, 1.0, size=channels)
    return np.clip(img[None] * weights[:, None, None], 0.0, 1.0)


# -- localization --------------------------------------------------------------
def generate_localization_dataset(seed: int, n: int = 2000, resolution: int = 32, split: str = "train",
                                  channels: int = 1) -> SyntheticDataset:
    """One bright rectangle on a faint structured background.

    Targets are (cx, cy, w, h) of the rendered pixel box, normalized by the
    resolution, so the rendered center matches the target exactly. Box
    centers are drawn mostly from the lower half of the frame.
    """
    if n < 1:
        raise DatasetError("n must be positive")
    rng = _split_rng(seed, split)
    yy, xx = _grid(resolution)
    images = np.empty((n, channels, resolution, resolution))
    targets = np.empty((n, 4))
    for i in range(n):
        theta = rng.uniform(0, math.pi)
        bg = 0.3 + 0.08 * np.sin(2 * math.pi * rng.uniform(1.5, 3.0) * (xx * math.cos(theta) + yy * math.sin(theta)))
        bg += 0.1 * (yy - 0.5) * rng.uniform(-1, 1)
        bw = int(rng.integers(max(2, resolution // 8), resolution // 3 + 1))
        bh = int(rng.integers(max(2, resolution // 8), resolution // 3 + 1))
        cy_frac = np.clip(rng.normal(0.68, 0.12), 0.0, 1.0)
        y0 = int(np.clip(round(cy_frac * resolution - bh / 2), 0, resolution - bh))
        x0 = int(rng.integers(0, resolution - bw + 1))
        img = bg + rng.normal(0.0, 0.02, size=bg.shape)
        img[y0 : y0 + bh, x0 : x0 + bw] = rng.uniform(0.8, 0.95)
        img = np.clip(img, 0.0, 1.0)
        images[i] = img[None] if channels == 1 else _tint(img, rng, channels)
        targets[i] = ((x0 + bw / 2) / resolution, (y0 + bh / 2) / resolution, bw / resolution, bh / resolution)
    return SyntheticDataset(images, targets, "localization", split, seed, {"resolution": resolution})


def generate_dataset(kind: str, seed: int, n: int, resolution: int, split: str, **kw) -> SyntheticDataset:
    if kind == "classification":
        return generate_classification_dataset(seed, n=n, resolution=resolution, split=split, **kw)
    if kind == "localization":
        return generate_localization_dataset(seed, n=n, resolution=resolution, split=split, **kw)
    raise DatasetError(f"unknown dataset kind {kind!r}")


# -- corruptions ---------------------------------------------------------------
@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SEVERITY_TABLE:
            raise DatasetError(f"unknown corruption kind {self.kind!r}; known: {', '.join(CORRUPTION_KINDS)}")
        if not 1 <= int(self.severity) <= 5:
            raise DatasetError(f"severity must be in 1..5, got {self.severity}")

    @property
    def level(self) -> float:
        return SEVERITY_TABLE[self.kind][self.severity - 1]

    @property
    def tag(self) -> str:
        return f"{self.kind}-{self.severity}"

    def to_dict(self) -> dict:
        return {"kind": self.kind, "severity": self.severity, "seed": self.seed}


def _disk_kernel(radius: float) -> np.ndarray:
    r = int(math.ceil(radius))
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    # supersampled disk coverage so fractional radii blur progressively
    sub = (np.arange(4) + 0.5) / 4 - 0.5
    cover = np.zeros(yy.shape)
    for dy in sub:
        for dx in sub:
            cover += (yy + dy) ** 2 + (xx + dx) ** 2 <= radius * radius
    return cover / cover.sum()


def _fog_field(rng: np.random.Generator, n: int, c: int, h: int, w: int) -> np.ndarray:
    field = np.zeros((n, 1, h, w))
    amp = 1.0
    for cells in (2, 4, 8):
        coarse = rng.uniform(0, 1, size=(n, 1, cells + 1, cells + 1))
        field += amp * ndimage.zoom(coarse, (1, 1, h / (cells + 1), w / (cells + 1)), order=1, mode="nearest")[..., :h, :w]
        amp *= 0.5
    field /= 1.75
    return np.broadcast_to(field, (n, c, h, w))


def _pixelate(images: np.ndarray, frac: float) -> np.ndarray:
    n, c, h, w = images.shape
    sh, sw = max(1, int(round(h * frac))), max(1, int(round(w * frac)))
    # box-average into sh x sw cells, then nearest upsample
    ys = np.minimum((np.arange(h) * sh) // h, sh - 1)
    xs = np.minimum((np.arange(w) * sw) // w, sw - 1)
    small = np.zeros((n, c, sh, sw))
    counts = np.zeros((sh, sw))
    np.add.at(counts, (ys[:, None], xs[None, :]), 1.0)
    for i in range(h):
        for j in range(w):
            small[:, :, ys[i], xs[j]] += images[:, :, i, j]
    small /= counts
    return small[:, :, ys][:, :, :, xs]


def corrupt(images: np.ndarray, spec: CorruptionSpec) -> np.ndarray:
    """Apply ``spec`` to a batch (N, C, H, W) or a single image (C, H, W)."""
    x = np.asarray(images, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4:
        raise DatasetError(f"expected (C, H, W) or (N, C, H, W) images, got shape {x.shape}")
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise DatasetError("images must lie in [0, 1]")
    rng = np.random.default_rng([int(spec.seed), CORRUPTION_KINDS.index(spec.kind), int(spec.severity)])
    level = spec.level
    n, c, h, w = x.shape
    if spec.kind == "gaussian_noise":
        out = x + rng.normal(0.0, level, size=x.shape)
    elif spec.kind == "shot_noise":
        out = rng.poisson(x * level) / level
    elif spec.kind == "impulse_noise":
        u = rng.uniform(size=x.shape)
        out = x.copy()
        out[u < level / 2] = 0.0
        out[(u >= level / 2) & (u < level)] = 1.0
    elif spec.kind == "defocus_blur":
        k = _disk_kernel(level)
        out = ndimage.convolve(x, k[None, None], mode="reflect")
    elif spec.kind == "brightness":
        out = x + level
    elif spec.kind == "contrast":
        means = x.mean(axis=(1, 2, 3), keepdims=True)
        out = (x - means) * level + means
    elif spec.kind == "fog":
        top = x.max(axis=(1, 2, 3), keepdims=True)
        out = (x + level * _fog_field(rng, n, c, h, w)) * top / (top + level)
    elif spec.kind == "snow_specks":
        specks = (rng.uniform(size=(n, 1, h, w)) < level).astype(np.float64)
        specks = np.maximum(specks, 0.6 * ndimage.maximum_filter(specks, size=(1, 1, 2, 1)))
        out = np.maximum(x * (1.0 - 0.5 * level) + 0.5 * level, np.broadcast_to(specks, x.shape))
    else:  # pixelate
        out = _pixelate(x, level)
    out = np.clip(out, 0.0, 1.0)
    return out[0] if single else out


def apply_corruption(image: np.ndarray, spec: CorruptionSpec) -> np.ndarray:
    return corrupt(image, spec)


# -- streams -------------------------------------------------------------------
@dataclass
class StreamBatch:
    images: np.ndarray
    labels: Optional[np.ndarray]
    segment: int = 0
    condition: str = "clean"

    def __len__(self) -> int:
        return len(self.images)


def make_stream(images: np.ndarray, labels, batch_size: int, segment: int = 0,
                condition: str = "clean") -> list[StreamBatch]:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    out = []
    for start in range(0, len(images), batch_size):
        sl = slice(start, start + batch_size)
        out.append(StreamBatch(images[sl], None if labels is None else np.asarray(labels)[sl], segment, condition))
    return out


@dataclass
class CycleSegment:
    condition: Optional[CorruptionSpec]  # None means clean
    n_images: int

    @property
    def tag(self) -> str:
        return "clean" if self.condition is None else self.condition.tag


@dataclass
class CycleSchedule:
    segments: list[CycleSegment]

    def validate(self, batch_size: int) -> None:
        if not self.segments:
            raise DatasetError("cycle schedule has no segments")
        for i, seg in enumerate(self.segments):
            if seg.n_images < batch_size:
                raise DatasetError(f"segment {i} has {seg.n_images} images, fewer than batch_size={batch_size}")

    @classmethod
    def from_list(cls, items: Sequence[dict], default_seed: int = 0) -> "CycleSchedule":
        segs = []
        for item in items:
            cond = item.get("condition", "clean")
            if cond in (None, "clean"):
                spec = None
            else:
                spec = CorruptionSpec(cond, int(item.get("severity", 5)), int(item.get("seed", default_seed)))
            segs.append(CycleSegment(spec, int(item["n_images"])))
        return cls(segs)


def build_cycle_stream(dataset: SyntheticDataset, schedule: CycleSchedule, batch_size: int, seed: int) -> list[StreamBatch]:
    """Concatenate schedule segments, each a seeded draw of dataset images.

    Images are drawn without replacement across the cycle while the dataset
    lasts, then reshuffled. Clean segments carry the source images unchanged.
    """
    schedule.validate(batch_size)
    rng = np.random.default_rng([int(seed), 7])
    pool: list[int] = []
    batches: list[StreamBatch] = []
    for seg_id, seg in enumerate(schedule.segments):
        idx = []
        while len(idx) < seg.n_images:
            if not pool:
                pool = list(rng.permutation(len(dataset)))
            take = min(len(pool), seg.n_images - len(idx))
            idx.extend(pool[:take])
            pool = pool[take:]
        idx = np.asarray(idx)
        imgs = dataset.images[idx]
        if seg.condition is not None:
            spec = CorruptionSpec(seg.condition.kind, seg.condition.severity, seg.condition.seed + seg_id)
            imgs = corrupt(imgs, spec)
        batches.extend(make_stream(imgs, dataset.labels[idx], batch_size, seg_id, seg.tag))
    return batches


def iter_labels_free(stream: Sequence[StreamBatch]) -> Iterator[StreamBatch]:
    for b in stream:
        yield StreamBatch(b.images, None, b.segment, b.condition)


# -- dataset cache file ------------------------------------------------------------
def dataset_bytes(ds: SyntheticDataset) -> bytes:
    labels = np.asarray(ds.labels, dtype=np.float64)
    meta = {
        "kind": ds.kind,
        "split": ds.split,
        "seed": ds.seed,
        "image_shape": list(ds.images.shape),
        "label_shape": list(labels.shape),
        "meta": ds.meta,
    }
    raw = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(DATASET_MAGIC)
    buf.write(struct.pack("<II", DATASET_VERSION, len(raw)))
    buf.write(raw)
    buf.write(np.ascontiguousarray(ds.images, dtype="<f8").tobytes())
    buf.write(np.ascontiguousarray(labels, dtype="<f8").tobytes())
    return buf.getvalue()


def save_dataset(ds: SyntheticDataset, path) -> None:
    Path(path).write_bytes(dataset_bytes(ds))


def load_dataset_bytes(data: bytes) -> SyntheticDataset:
    r = _Reader(data, "dataset file", DatasetError)
    if r.take(len(DATASET_MAGIC)) != DATASET_MAGIC:
        raise DatasetError("dataset file: bad magic")
    version, meta_len = r.unpack("<II")
    if version != DATASET_VERSION:
        raise DatasetError(f"dataset file: unsupported version {version}")
    try:
        meta = json.loads(r.take(meta_len).decode("utf-8"))
        image_shape = tuple(int(v) for v in meta["image_shape"])
        label_shape = tuple(int(v) for v in meta["label_shape"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"dataset file: malformed metadata ({exc})") from None
    if len(image_shape) != 4 or label_shape[:1] != image_shape[:1]:
        raise DatasetError(f"dataset file: inconsistent shapes {image_shape} / {label_shape}")
    images = r.f64(int(np.prod(image_shape))).reshape(image_shape)
    labels = r.f64(int(np.prod(label_shape))).reshape(label_shape)
    if not r.exhausted:
        raise DatasetError(f"dataset file: {len(data) - r.pos} trailing bytes")
    if images.size and (images.min() < 0.0 or images.max() > 1.0):
        raise DatasetError("dataset file: image values outside [0, 1]")
    if meta.get("kind") == "classification":
        labels = labels.astype(np.int64)
    return SyntheticDataset(images, labels, meta.get("kind", "external"), meta.get("split", "test"),
                            int(meta.get("seed", 0)), meta.get("meta", {}))


def load_dataset(path) -> SyntheticDataset:
    return load_dataset_bytes(Path(path).read_bytes())
