"""Command-line harness: train, stats, adapt, cycle and ablate.

Every subcommand reads a JSON experiment config. Result files are pure
functions of the config and inputs; wall-clock times go to ``run.log``.

Exit codes: 0 success, 1 usage or config error, 2 numerical failure,
3 I/O or file-format error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np

from . import tensor as T
from .adapt import (
    AdaptConfig,
    CapabilityError,
    adapt_stream,
    baseline_entropy,
    baseline_norm,
    baseline_source,
)
from .data import (
    CORRUPTION_KINDS,
    CorruptionSpec,
    CycleSchedule,
    DatasetError,
    build_cycle_stream,
    corrupt,
    generate_dataset,
    make_stream,
)
from .models import (
    CheckpointError,
    ConfigError,
    Model,
    ModelConfig,
    build_model,
    checkpoint_bytes,
    load_checkpoint,
    save_checkpoint,
    task_metric,
)
from .stats import StatsBundle, StatsFileError, compute_training_stats, fnv1a64, load_stats, save_stats
from .train import TrainConfig, train_model

log = logging.getLogger("actmad")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3
BASELINES = ("source", "norm", "entropy")
ABLATION_VARIANTS: dict[str, dict] = {
    "full": {},
    "last_layer_only": {"layer_mode": "last_layer_only"},
    "channel_averaged": {"stat_mode": "channel_averaged"},
    "cmd": {"loss_mode": "cmd", "cmd_order": 3},
    "affine_only": {"param_mode": "affine_only"},
    "cmd_order2": {"loss_mode": "cmd", "cmd_order": 2},
}
DEFAULT_BATCH_SWEEP = [10, 16, 32, 64, 128]


class UsageError(ConfigError):
    pass


# -- config ------------------------------------------------------------------------
def _fmt(x: Optional[float]) -> str:
    return "" if x is None else "%.17g" % x


def _expect(cond: bool, path: str, msg: str) -> None:
    if not cond:
        raise ConfigError(f"{path}: {msg}")


def _check_keys(section: dict, path: str, allowed: set[str]) -> None:
    _expect(isinstance(section, dict), path, "must be an object")
    unknown = sorted(set(section) - allowed)
    _expect(not unknown, f"{path}.{unknown[0]}" if unknown else path, "unknown key")


def _int(section: dict, key: str, path: str, default: int, minimum: int = 0) -> int:
    v = section.get(key, default)
    _expect(isinstance(v, int) and not isinstance(v, bool), f"{path}.{key}", f"must be an integer, got {v!r}")
    _expect(v >= minimum, f"{path}.{key}", f"must be >= {minimum}, got {v}")
    return v


def _float(section: dict, key: str, path: str, default: float, positive: bool = True) -> float:
    v = section.get(key, default)
    _expect(isinstance(v, (int, float)) and not isinstance(v, bool), f"{path}.{key}", f"must be a number, got {v!r}")
    _expect(not positive or v > 0, f"{path}.{key}", f"must be positive, got {v}")
    return float(v)


def _corruption_list(items: Any, path: str, default_seed: int) -> list[CorruptionSpec]:
    if items == "all":
        return [CorruptionSpec(k, 5, default_seed) for k in CORRUPTION_KINDS]
    _expect(isinstance(items, list), path, 'must be a list of corruption specs or "all"')
    specs = []
    for i, item in enumerate(items):
        p = f"{path}[{i}]"
        _check_keys(item, p, {"kind", "severity", "seed"})
        _expect("kind" in item, f"{p}.kind", "is required")
        try:
            specs.append(CorruptionSpec(item["kind"], _int(item, "severity", p, 5, 1), _int(item, "seed", p, default_seed)))
        except DatasetError as exc:
            raise ConfigError(f"{p}: {exc}") from None
    return specs


@dataclass
class DataSection:
    kind: str
    seed: int
    n_train: int
    n_test: int
    corruptions: list[CorruptionSpec]
    cycle: Optional[list[dict]]
    baselines: list[str]
    entropy_lr: float


@dataclass
class AblationSection:
    variants: list[str]
    batch_sizes: list[int]
    corruptions: list[CorruptionSpec]
    n_images: int


@dataclass
class ExperimentConfig:
    name: str
    model: ModelConfig
    train: TrainConfig
    n_train: int
    stats_batch_size: int
    adapt: AdaptConfig
    data: DataSection
    ablation: AblationSection
    output_dir: Path
    raw: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, doc: dict, base_dir: Path = Path(".")) -> "ExperimentConfig":
        _check_keys(doc, "config", {"name", "model", "train", "stats", "adapt", "data", "ablation", "output"})
        name = doc.get("name", "experiment")
        _expect(isinstance(name, str) and name, "config.name", "must be a non-empty string")

        model_doc = doc.get("model", {})
        _expect(isinstance(model_doc, dict), "model", "must be an object")
        try:
            model = ModelConfig.from_dict(model_doc)
        except (ConfigError, TypeError) as exc:
            raise ConfigError(f"model: {exc}") from None

        tr = doc.get("train", {})
        _check_keys(tr, "train", {"epochs", "lr", "batch_size", "momentum", "weight_decay", "seed"})
        train = TrainConfig(
            epochs=_int(tr, "epochs", "train", 8, 1),
            lr=_float(tr, "lr", "train", 0.05),
            batch_size=_int(tr, "batch_size", "train", 32, 2),
            momentum=_float(tr, "momentum", "train", 0.9, positive=False),
            weight_decay=_float(tr, "weight_decay", "train", 5e-4, positive=False),
            seed=_int(tr, "seed", "train", 0),
        )

        st = doc.get("stats", {})
        _check_keys(st, "stats", {"batch_size"})
        stats_bs = _int(st, "batch_size", "stats", 100, 1)

        ad = doc.get("adapt", {})
        _expect(isinstance(ad, dict), "adapt", "must be an object")
        try:
            adapt = AdaptConfig.from_dict(ad)
        except (ConfigError, TypeError) as exc:
            raise ConfigError(f"adapt: {exc}") from None

        dd = doc.get("data", {})
        _check_keys(dd, "data", {"kind", "seed", "n_train", "n_test", "corruptions", "cycle", "baselines", "entropy_lr"})
        kind = dd.get("kind", "classification" if model.head == "classify" else "localization")
        _expect(kind in ("classification", "localization"), "data.kind", f"unknown dataset kind {kind!r}")
        _expect((kind == "classification") == (model.head == "classify"), "data.kind",
                f"dataset kind {kind!r} does not fit model head {model.head!r}")
        seed = _int(dd, "seed", "data", 0)
        baselines = dd.get("baselines", list(BASELINES))
        _expect(isinstance(baselines, list) and all(b in BASELINES for b in baselines), "data.baselines",
                f"must be a list drawn from {list(BASELINES)}")
        cycle = dd.get("cycle")
        if cycle is not None:
            _expect(isinstance(cycle, list) and cycle, "data.cycle", "must be a non-empty list of segments")
            for i, seg in enumerate(cycle):
                p = f"data.cycle[{i}]"
                _check_keys(seg, p, {"condition", "severity", "seed", "n_images"})
                _int(seg, "n_images", p, 0, adapt.batch_size)
                cond = seg.get("condition", "clean")
                _expect(cond == "clean" or cond in CORRUPTION_KINDS, f"{p}.condition", f"unknown condition {cond!r}")
        data = DataSection(
            kind=kind,
            seed=seed,
            n_train=_int(dd, "n_train", "data", 2000, 2),
            n_test=_int(dd, "n_test", "data", 2000, 1),
            corruptions=_corruption_list(dd.get("corruptions", []), "data.corruptions", seed),
            cycle=cycle,
            baselines=list(baselines),
            entropy_lr=_float(dd, "entropy_lr", "data", 1e-3),
        )

        ab = doc.get("ablation", {})
        _check_keys(ab, "ablation", {"variants", "batch_sizes", "corruptions", "n_images"})
        variants = ab.get("variants", list(ABLATION_VARIANTS))
        _expect(isinstance(variants, list) and variants and variants[0] == "full"
                and all(v in ABLATION_VARIANTS for v in variants), "ablation.variants",
                f"must start with 'full' and be drawn from {list(ABLATION_VARIANTS)}")
        sizes = ab.get("batch_sizes", DEFAULT_BATCH_SWEEP)
        _expect(isinstance(sizes, list) and all(isinstance(b, int) and b >= 2 for b in sizes),
                "ablation.batch_sizes", "must be a list of integers >= 2")
        ablation = AblationSection(
            variants=list(variants),
            batch_sizes=list(sizes),
            corruptions=_corruption_list(ab.get("corruptions", [s.to_dict() for s in data.corruptions]),
                                         "ablation.corruptions", seed),
            n_images=_int(ab, "n_images", "ablation", data.n_test, 2),
        )

        out = doc.get("output", {})
        _check_keys(out, "output", {"directory"})
        directory = out.get("directory", f"results/{name}")
        _expect(isinstance(directory, str), "output.directory", "must be a string")
        return cls(name, model, train, data.n_train, stats_bs, adapt, data, ablation, base_dir / directory, doc)


def apply_overrides(doc: dict, overrides: list[str]) -> dict:
    doc = copy.deepcopy(doc)
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        key, value = item.split("=", 1)
        parts = key.split(".")
        if not all(parts):
            raise UsageError(f"--set: malformed key {key!r}")
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value
        node = doc
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise UsageError(f"--set: {key!r} descends into a non-object")
        node[parts[-1]] = parsed
    return doc


def load_config(path: str, overrides: list[str] = ()) -> ExperimentConfig:
    """Load a config file; bare names resolve to the shipped configs."""
    p = Path(path)
    if p.exists():
        text, base = p.read_text(), Path(".")
    else:
        shipped = resources.files("actmad") / "configs" / p.name
        if not shipped.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        text, base = shipped.read_text(), Path(".")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return ExperimentConfig.from_dict(apply_overrides(doc, list(overrides)), base)


# -- shared plumbing ---------------------------------------------------------------------
class RunContext:
    def __init__(self, cfg: ExperimentConfig, out: Optional[str]):
        self.cfg = cfg
        self.out = Path(out) if out else cfg.output_dir
        self.out.mkdir(parents=True, exist_ok=True)
        self._log = []

    def timing(self, what: str, seconds: float) -> None:
        self._log.append(f"{time.strftime('%Y-%m-%dT%H:%M:%S')} {what} {seconds:.3f}s")

    def flush_log(self, command: str) -> None:
        with open(self.out / "run.log", "a") as fh:
            for line in self._log:
                fh.write(f"{command} {line}\n")

    def write_text(self, name: str, text: str) -> Path:
        path = self.out / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
        return path


def _datasets(cfg: ExperimentConfig, split: str, n: int):
    return generate_dataset(cfg.data.kind, cfg.data.seed, n, cfg.model.input_resolution[0], split,
                            channels=cfg.model.in_channels)


def _checkpoint_path(ctx: RunContext, given: Optional[str]) -> Path:
    return Path(given) if given else ctx.out / "model.ckpt"


def _stats_path(ctx: RunContext, given: Optional[str]) -> Path:
    return Path(given) if given else ctx.out / "train.stats"


def _load_model(ctx: RunContext, path: Optional[str]) -> Model:
    model = load_checkpoint(_checkpoint_path(ctx, path))
    if model.cfg.to_dict() != ctx.cfg.model.to_dict():
        raise ConfigError("checkpoint: model config differs from the experiment config's model section")
    return model


def _load_bundle(ctx: RunContext, path: Optional[str], model: Model) -> StatsBundle:
    bundle = load_stats(_stats_path(ctx, path))
    expected = fnv1a64(checkpoint_bytes(model))
    if bundle.model_fingerprint != expected:
        raise ConfigError(
            f"stats: fingerprint {bundle.model_fingerprint:#018x} does not match checkpoint {expected:#018x}"
        )
    bundle.check_matches(model)
    return bundle


def _threads() -> int:
    raw = os.environ.get("ACTMAD_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"ACTMAD_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError("ACTMAD_THREADS must be >= 1")
    return n


def _run_parallel(jobs: list[Callable[[], Any]]) -> list[Any]:
    # results come back in job order regardless of completion order
    n = min(_threads(), len(jobs)) or 1
    if n == 1:
        return [job() for job in jobs]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(lambda job: job(), jobs))


def _csv(header: list[str], rows: list[list[str]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


# -- subcommands ---------------------------------------------------------------------------
def cmd_train(ctx: RunContext, args) -> int:
    cfg = ctx.cfg
    train = _datasets(cfg, "train", cfg.n_train)
    test = _datasets(cfg, "test", cfg.data.n_test)
    model = build_model(cfg.model)
    t0 = time.perf_counter()
    history = train_model(model, train.images, train.labels, cfg.train)
    ctx.timing("train", time.perf_counter() - t0)
    path = _checkpoint_path(ctx, args.checkpoint)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, path)
    metric_name = "accuracy" if cfg.model.head == "classify" else "mse"
    value = task_metric(model, test.images, test.labels)
    ctx.write_text("train.json", json.dumps({"epoch_losses": history, "clean_test_" + metric_name: value},
                                            sort_keys=True, indent=1) + "\n")
    print(f"clean test {metric_name}: {value:.4f}")
    print(f"checkpoint written to {path}")
    return EXIT_OK


def cmd_stats(ctx: RunContext, args) -> int:
    cfg = ctx.cfg
    model = _load_model(ctx, args.checkpoint)
    train = _datasets(cfg, "train", cfg.n_train)
    t0 = time.perf_counter()
    bundle = compute_training_stats(model, train.images, cfg.stats_batch_size)
    ctx.timing("stats", time.perf_counter() - t0)
    path = _stats_path(ctx, args.stats)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_stats(bundle, path)
    for layer in bundle.layers:
        print(f"{layer.layer_id}: shape {layer.shape}, {layer.n_samples} samples")
    print(f"statistics written to {path}")
    return EXIT_OK


def _corrupted_stream(test, spec: CorruptionSpec, batch_size: int, n: Optional[int] = None):
    images, labels = test.images, test.labels
    if n is not None:
        images, labels = images[:n], labels[:n]
    return make_stream(corrupt(images, spec), labels, batch_size, 0, spec.tag)


def _run_methods(model: Model, bundle: StatsBundle, stream, cfg: ExperimentConfig, methods: list[str]) -> dict:
    reports = {}
    for method in methods:
        m = model.clone()
        if method == "source":
            reports[method] = baseline_source(m, stream)
        elif method == "norm":
            reports[method] = baseline_norm(m, stream)
        elif method == "entropy":
            try:
                reports[method] = baseline_entropy(m, stream, cfg.data.entropy_lr)
            except CapabilityError as exc:
                log.warning("entropy baseline refused: %s", exc)
                reports[method] = None
        else:
            reports[method] = adapt_stream(m, stream, bundle, cfg.adapt)
    return reports


def cmd_adapt(ctx: RunContext, args) -> int:
    cfg = ctx.cfg
    if not cfg.data.corruptions:
        raise ConfigError("data.corruptions: adapt needs at least one corruption spec")
    model = _load_model(ctx, args.checkpoint)
    bundle = _load_bundle(ctx, args.stats, model)
    test = _datasets(cfg, "test", cfg.data.n_test)
    methods = list(cfg.data.baselines) + ["actmad"]

    def job(spec):
        def run():
            t0 = time.perf_counter()
            reports = _run_methods(model, bundle, _corrupted_stream(test, spec, cfg.adapt.batch_size), cfg, methods)
            return spec, reports, time.perf_counter() - t0
        return run

    results = _run_parallel([job(s) for s in cfg.data.corruptions])
    rows = []
    for spec, reports, seconds in results:
        ctx.timing(f"adapt {spec.tag}", seconds)
        for method, rep in reports.items():
            if rep is not None:
                ctx.write_text(f"reports/{spec.tag}.{method}.jsonl", rep.to_jsonl())

        def metric(m):
            rep = reports.get(m)
            return None if rep is None else rep.final_metric

        rows.append([spec.kind, str(spec.severity), _fmt(metric("source")), _fmt(metric("norm")),
                     _fmt(metric("entropy")), _fmt(metric("actmad")), _fmt(reports["actmad"].mean_loss)])
        print(f"{spec.tag}: source {_fmt(metric('source'))} actmad {_fmt(metric('actmad'))}")
    header = ["corruption", "severity", "source", "norm", "entropy", "actmad", "mean_alignment_loss"]
    ctx.write_text("adapt_summary.csv", _csv(header, rows))
    return EXIT_OK


def cmd_cycle(ctx: RunContext, args) -> int:
    cfg = ctx.cfg
    if not cfg.data.cycle:
        raise ConfigError("data.cycle: cycle needs a schedule")
    model = _load_model(ctx, args.checkpoint)
    bundle = _load_bundle(ctx, args.stats, model)
    test = _datasets(cfg, "test", cfg.data.n_test)
    try:
        schedule = CycleSchedule.from_list(cfg.data.cycle, cfg.data.seed)
        stream = build_cycle_stream(test, schedule, cfg.adapt.batch_size, cfg.data.seed)
    except DatasetError as exc:
        raise ConfigError(f"data.cycle: {exc}") from None
    t0 = time.perf_counter()
    src = baseline_source(model.clone(), stream)
    act = adapt_stream(model.clone(), stream, bundle, cfg.adapt)
    ctx.timing("cycle", time.perf_counter() - t0)
    rows = []
    for s, a in zip(src.records, act.records):
        rows.append([str(a.batch), str(a.segment), a.condition, str(a.n), _fmt(s.metric), _fmt(a.metric),
                     _fmt(a.loss), _fmt(a.drift)])
    ctx.write_text("cycle_trace.csv",
                   _csv(["batch", "segment", "condition", "n", "source", "actmad", "loss", "drift"], rows))
    ctx.write_text("cycle.actmad.jsonl", act.to_jsonl())
    segments = []
    for seg_id, seg in enumerate(schedule.segments):
        segments.append({"segment": seg_id, "condition": seg.tag, "source": src.segment_metric(seg_id),
                         "actmad": act.segment_metric(seg_id)})
    ctx.write_text("cycle_segments.json", json.dumps(segments, indent=1, sort_keys=True) + "\n")
    for s in segments:
        print(f"segment {s['segment']} {s['condition']}: source {_fmt(s['source'])} actmad {_fmt(s['actmad'])}")
    return EXIT_OK


def cmd_ablate(ctx: RunContext, args) -> int:
    cfg = ctx.cfg
    ab = cfg.ablation
    if not ab.corruptions:
        raise ConfigError("ablation.corruptions: ablate needs at least one corruption spec")
    model = _load_model(ctx, args.checkpoint)
    bundle = _load_bundle(ctx, args.stats, model)
    test = _datasets(cfg, "test", cfg.data.n_test)
    needs_moments = max((ABLATION_VARIANTS[v].get("cmd_order", 2) for v in ab.variants), default=2)
    if needs_moments > 2:
        # higher central moments live in memory only; rebuild them from the training split
        train = _datasets(cfg, "train", cfg.n_train)
        rich = compute_training_stats(model, train.images, cfg.stats_batch_size, bundle.model_fingerprint,
                                      max_order=needs_moments)
        bundle = rich

    runs: list[tuple[str, int, AdaptConfig]] = []
    for v in ab.variants:
        runs.append((v, cfg.adapt.batch_size, cfg.adapt.replace(**ABLATION_VARIANTS[v])))
    for bs in ab.batch_sizes:
        if bs != cfg.adapt.batch_size:
            runs.append(("full", bs, cfg.adapt.replace(batch_size=bs)))

    def job(name, bs, acfg):
        def run():
            t0 = time.perf_counter()
            scores, sources = [], []
            for spec in ab.corruptions:
                stream = _corrupted_stream(test, spec, bs, ab.n_images)
                sources.append(baseline_source(model.clone(), stream).final_metric)
                scores.append(adapt_stream(model.clone(), stream, bundle, acfg).final_metric)
            return name, bs, acfg, float(np.mean(scores)), float(np.mean(sources)), scores, time.perf_counter() - t0
        return run

    results = _run_parallel([job(*r) for r in runs])
    full_metric = results[0][3]
    rows = []
    for name, bs, acfg, metric, source, scores, seconds in results:
        ctx.timing(f"ablate {name} bs={bs}", seconds)
        rows.append([name, str(bs), _fmt(acfg.effective_lr), _fmt(metric), _fmt(source), _fmt(metric - full_metric)]
                    + [_fmt(s) for s in scores])
        print(f"{name} bs={bs}: {_fmt(metric)} (source {_fmt(source)})")
    header = ["variant", "batch_size", "effective_lr", "metric", "source", "delta_vs_full"] + [
        s.tag for s in ab.corruptions]
    ctx.write_text("ablation.csv", _csv(header, rows))
    return EXIT_OK


COMMANDS = {"train": cmd_train, "stats": cmd_stats, "adapt": cmd_adapt, "cycle": cmd_cycle, "ablate": cmd_ablate}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="actmad", description="Test-time adaptation by activation matching.")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="experiment JSON (path or shipped config name)")
    parser.add_argument("--checkpoint", help="model checkpoint (default: <out>/model.ckpt)")
    parser.add_argument("--stats", help="statistics file (default: <out>/train.stats)")
    parser.add_argument("--out", help="output directory (default: config output.directory)")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a config value; the value is parsed as JSON when possible")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.overrides)
        ctx = RunContext(cfg, args.out)
        with np.errstate(over="ignore", invalid="ignore"):
            code = COMMANDS[args.command](ctx, args)
        ctx.flush_log(args.command)
        return code
    except (CheckpointError, StatsFileError, DatasetError, OSError) as exc:
        print(f"actmad: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, T.ShapeError) as exc:
        print(f"actmad: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (T.NonFiniteError, FloatingPointError) as exc:
        print(f"actmad: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
