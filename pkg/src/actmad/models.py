"""Small conv -> batch-norm -> ReLU backbones with post-norm activation taps."""

from __future__ import annotations

import copy
import dataclasses
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import ParamKind, Parameter, Tensor

CHECKPOINT_MAGIC = b"ACTMADMD"
CHECKPOINT_VERSION = 1
RUNNING_PREFIX = "running."


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    input_resolution: tuple[int, int] = (32, 32)
    in_channels: int = 1
    channels: list[int] = field(default_factory=lambda: [16, 32, 64])
    blocks_per_stage: int = 2
    head: str = "classify"
    n_classes: int = 4
    n_outputs: int = 4
    seed: int = 0
    momentum: float = 0.1
    epsilon: float = 1e-5

    def __post_init__(self):
        self.input_resolution = tuple(int(v) for v in self.input_resolution)
        self.channels = [int(c) for c in self.channels]
        self.validate()

    @property
    def downsampling(self) -> int:
        return 2 ** (len(self.channels) - 1)

    def validate(self) -> None:
        if len(self.input_resolution) != 2 or min(self.input_resolution) < 1:
            raise ConfigError(f"input_resolution must be two positive ints, got {self.input_resolution}")
        if not self.channels or min(self.channels) < 1:
            raise ConfigError("channels must be a non-empty list of positive widths")
        if self.blocks_per_stage < 1 or self.in_channels < 1:
            raise ConfigError("blocks_per_stage and in_channels must be >= 1")
        if self.head not in ("classify", "regress"):
            raise ConfigError(f"head must be 'classify' or 'regress', got {self.head!r}")
        if self.n_classes < 1 or self.n_outputs < 1:
            raise ConfigError("n_classes and n_outputs must be >= 1")
        h, w = self.input_resolution
        if h % self.downsampling or w % self.downsampling:
            raise ConfigError(
                f"input_resolution {h}x{w} is not divisible by the total downsampling factor {self.downsampling}"
            )

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["input_resolution"] = list(self.input_resolution)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class TapPoint:
    layer_id: str
    expected_shape: tuple[int, int, int]
    position: str = "post_norm_pre_activation"


@dataclass
class ConvBlock:
    name: str
    conv_w: Parameter
    conv_b: Parameter
    bn_scale: Parameter
    bn_shift: Parameter
    running_mean: np.ndarray
    running_var: np.ndarray
    stride: int


class Model:
    """Conv stack with one tap after every batch-norm.

    ``training`` selects how the norms behave: batch statistics (and running
    average updates) when True, running statistics when False.
    """

    def __init__(self, cfg: ModelConfig, blocks: list[ConvBlock], head_w: Parameter, head_b: Parameter):
        self.cfg = cfg
        self.blocks = blocks
        self.head_w = head_w
        self.head_b = head_b
        self.training = False
        h, w = cfg.input_resolution
        taps = []
        for blk in blocks:
            h, w = h // blk.stride, w // blk.stride
            taps.append(TapPoint(blk.name, (blk.conv_w.shape[0], h, w)))
        self.tap_points = taps

    # -- state -------------------------------------------------------------
    def train(self) -> "Model":
        self.training = True
        return self

    def eval(self) -> "Model":
        self.training = False
        return self

    def parameters(self) -> list[Parameter]:
        params = []
        for blk in self.blocks:
            params += [blk.conv_w, blk.conv_b, blk.bn_scale, blk.bn_shift]
        return params + [self.head_w, self.head_b]

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        """Every stored array, trainable parameters first, running statistics last."""
        out = [(p.name, p.data) for p in self.parameters()]
        for blk in self.blocks:
            out.append((f"{RUNNING_PREFIX}{blk.name}.mean", blk.running_mean))
            out.append((f"{RUNNING_PREFIX}{blk.name}.var", blk.running_var))
        return out

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def clone(self) -> "Model":
        other = copy.deepcopy(self)
        other.zero_grad()
        return other

    def flat_parameters(self) -> np.ndarray:
        return np.concatenate([p.data.ravel() for p in self.parameters()])

    # -- forward -----------------------------------------------------------
    def forward_with_taps(self, batch) -> tuple[Tensor, list[Tensor]]:
        x = T.as_tensor(batch)
        expected = (self.cfg.in_channels, *self.cfg.input_resolution)
        if x.ndim != 4 or tuple(x.shape[1:]) != expected:
            raise T.ShapeError(f"model expects input of shape (N, {expected[0]}, {expected[1]}, {expected[2]}), got {x.shape}")
        if x.shape[0] < 1:
            raise T.ShapeError("empty batch")
        mode = "train" if self.training else "eval"
        taps = []
        for blk in self.blocks:
            x = T.conv2d(x, blk.conv_w, blk.conv_b, stride=blk.stride, padding=1)
            x = T.batch_norm2d(x, blk.bn_scale, blk.bn_shift, blk.running_mean, blk.running_var,
                               mode=mode, momentum=self.cfg.momentum, epsilon=self.cfg.epsilon)
            taps.append(x)
            x = T.relu(x)
        if self.cfg.head == "classify":
            out = T.dense(T.global_avg_pool(x), self.head_w, self.head_b)
        else:
            out = T.sigmoid(T.dense(x.reshape(x.shape[0], -1), self.head_w, self.head_b))
        return out, taps

    def __call__(self, batch) -> Tensor:
        return self.forward_with_taps(batch)[0]


def build_model(cfg: ModelConfig) -> Model:
    """Deterministic He-initialized backbone for ``cfg``."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    blocks = []
    c_in = cfg.in_channels
    for s, width in enumerate(cfg.channels):
        for b in range(cfg.blocks_per_stage):
            name = f"stage{s}.block{b}"
            stride = 2 if (s > 0 and b == 0) else 1
            fan_in = c_in * 9
            w = rng.standard_normal((width, c_in, 3, 3)) * np.sqrt(2.0 / fan_in)
            blocks.append(ConvBlock(
                name=name,
                conv_w=Parameter(w, f"{name}.conv.weight", ParamKind.CONV_WEIGHT),
                conv_b=Parameter(np.zeros(width), f"{name}.conv.bias", ParamKind.CONV_BIAS),
                bn_scale=Parameter(np.ones(width), f"{name}.norm.scale", ParamKind.NORM_SCALE),
                bn_shift=Parameter(np.zeros(width), f"{name}.norm.shift", ParamKind.NORM_SHIFT),
                running_mean=np.zeros(width),
                running_var=np.ones(width),
                stride=stride,
            ))
            c_in = width
    if cfg.head == "classify":
        fan_in, n_out = c_in, cfg.n_classes
    else:
        h, w = cfg.input_resolution
        fan_in, n_out = c_in * (h // cfg.downsampling) * (w // cfg.downsampling), cfg.n_outputs
    head_w = Parameter(rng.standard_normal((n_out, fan_in)) * np.sqrt(2.0 / fan_in), "head.weight", ParamKind.DENSE_WEIGHT)
    head_b = Parameter(np.zeros(n_out), "head.bias", ParamKind.DENSE_BIAS)
    return Model(cfg, blocks, head_w, head_b)


# -- metrics ---------------------------------------------------------------
def _batched(n: int, batch_size: int):
    for start in range(0, n, batch_size):
        yield slice(start, min(start + batch_size, n))


def predict(model: Model, batch, batch_size: int = 256) -> np.ndarray:
    """Class labels (classification) or (cx, cy, w, h) boxes (regression)."""
    images = np.asarray(batch.data if isinstance(batch, Tensor) else batch)
    outs = []
    with T.no_grad():
        for sl in _batched(len(images), batch_size):
            outs.append(model(images[sl]).data)
    out = np.concatenate(outs, axis=0)
    return out.argmax(axis=1) if model.cfg.head == "classify" else out


def accuracy(model: Model, images, labels) -> float:
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("accuracy of an empty dataset is undefined")
    return float(np.mean(predict(model, images) == labels))


def regression_mse(model: Model, images, targets) -> float:
    targets = np.asarray(targets)
    if len(targets) == 0:
        raise ValueError("MSE of an empty dataset is undefined")
    return float(np.mean((predict(model, images) - targets) ** 2))


def task_metric(model: Model, images, labels) -> float:
    """Accuracy for classifiers, MSE for regressors."""
    if model.cfg.head == "classify":
        return accuracy(model, images, labels)
    return regression_mse(model, images, labels)


# -- checkpoint I/O ----------------------------------------------------------
def checkpoint_bytes(model: Model) -> bytes:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    cfg_json = json.dumps(model.cfg.to_dict(), sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(cfg_json)))
    buf.write(cfg_json)
    for name, arr in model.named_arrays():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def save_checkpoint(model: Model, path) -> bytes:
    data = checkpoint_bytes(model)
    Path(path).write_bytes(data)
    return data


class _Reader:
    def __init__(self, data: bytes, what: str, error_cls):
        self.data = data
        self.pos = 0
        self.what = what
        self.error_cls = error_cls

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise self.error_cls(f"{self.what}: unexpected end of file at byte {self.pos} (wanted {n} more)")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def f64(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)

    @property
    def exhausted(self) -> bool:
        return self.pos >= len(self.data)


def load_checkpoint_bytes(data: bytes) -> Model:
    r = _Reader(data, "checkpoint", CheckpointError)
    if r.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CheckpointError("checkpoint: bad magic")
    (version,) = r.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint: unsupported version {version}")
    (cfg_len,) = r.unpack("<I")
    try:
        cfg = ModelConfig.from_dict(json.loads(r.take(cfg_len).decode("utf-8")))
    except (UnicodeDecodeError, json.JSONDecodeError, TypeError) as exc:
        raise CheckpointError(f"checkpoint: malformed config ({exc})") from None
    arrays = {}
    while not r.exhausted:
        (name_len,) = r.unpack("<I")
        name = r.take(name_len).decode("utf-8")
        (rank,) = r.unpack("<I")
        dims = r.unpack(f"<{rank}Q")
        arrays[name] = r.f64(int(np.prod(dims))).reshape(dims)
    model = build_model(cfg)
    expected = model.named_arrays()
    if set(arrays) != {name for name, _ in expected}:
        missing = sorted({n for n, _ in expected} - set(arrays))
        extra = sorted(set(arrays) - {n for n, _ in expected})
        raise CheckpointError(f"checkpoint: parameter set mismatch (missing {missing}, unexpected {extra})")
    for name, target in expected:
        if arrays[name].shape != target.shape:
            raise CheckpointError(f"checkpoint: {name} has shape {arrays[name].shape}, expected {target.shape}")
        target[...] = arrays[name]
    return model


def load_checkpoint(path) -> Model:
    return load_checkpoint_bytes(Path(path).read_bytes())
