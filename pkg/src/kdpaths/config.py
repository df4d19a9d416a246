"""Strict JSON run configuration: parsing, validation, grid expansion."""

from __future__ import annotations

import json
import os
import warnings
from dataclasses import dataclass, field

from .aggregation import STRATEGIES
from .distill_paths import LOGIT_KINDS, PATH_KINDS, DistillPath

_MISSING = object()


class ParseError(ValueError):
    """The document is not well-formed JSON."""

    def __init__(self, msg: str, line: int, col: int):
        self.line = line
        self.col = col
        super().__init__(f"line {line}, column {col}: {msg}")


class ValidationError(ValueError):
    """A well-formed document violates the config contract."""


def _join(path: str, key: str) -> str:
    return f"{path}.{key}" if path else key


def _section(raw, path: str, allowed) -> dict:
    if not isinstance(raw, dict):
        raise ValidationError(f"{path or 'config'} must be an object")
    for key in raw:
        if key not in allowed:
            raise ValidationError(f"unknown key {_join(path, key)}")
    return raw


def _get(raw: dict, path: str, key: str, default=_MISSING, kind=None):
    if key not in raw:
        if default is _MISSING:
            raise ValidationError(f"{_join(path, key)} required")
        return default
    value = raw[key]
    if kind is not None and not _typed(value, kind):
        raise ValidationError(f"{_join(path, key)} must be {_type_name(kind)}")
    return value


def _typed(value, kind) -> bool:
    if kind is float:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if kind is int:
        return isinstance(value, int) and not isinstance(value, bool)
    return isinstance(value, kind)


def _type_name(kind) -> str:
    return {int: "an integer", float: "a number", str: "a string",
            bool: "a boolean", list: "a list", dict: "an object"}.get(kind, str(kind))


def _int_list(value, path: str) -> list:
    if not isinstance(value, list) or not all(_typed(v, int) for v in value):
        raise ValidationError(f"{path} must be a list of integers")
    return list(value)


# ------------------------------------------------------------- config blocks


@dataclass
class DatasetConfig:
    kind: str
    classes: int
    synth_kind: str = "gaussian_blobs"
    n: int = 1000
    n_val: int = 200
    noise: float = 0.1
    train_images: str = ""
    train_labels: str = ""
    val_images: str = ""
    val_labels: str = ""
    train_path: str = ""
    val_path: str = ""
    input_dim: int = 0
    header: bool = False


@dataclass
class ModelConfig:
    arch: str
    width_multiplier: int = 1
    hidden: list = field(default_factory=lambda: [64])


@dataclass
class PretrainConfig:
    epochs: int = 5
    batch_size: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    milestones: list = field(default_factory=list)
    decay_factor: float = 0.1


@dataclass
class TeacherConfig:
    model: ModelConfig
    checkpoint: str = ""
    pretrain: PretrainConfig | None = None


@dataclass
class OptimizerConfig:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    milestones: list = field(default_factory=list)
    decay_factor: float = 0.1


@dataclass
class AggregationConfig:
    strategy: str
    label: str
    alpha: float = 1.0
    fixed_v: list | None = None
    layerwise: bool = False
    moo_every: int = 1
    use_paths: list | None = None


@dataclass
class RunConfig:
    dataset: DatasetConfig
    teacher: TeacherConfig
    student: ModelConfig
    paths: list
    aggregations: list
    optimizer: OptimizerConfig
    epochs: int = 10
    batch_size: int = 128
    seeds: list = field(default_factory=lambda: [0])
    output_dir: str = "runs"
    sim_every: int = 50
    seed_was_list: bool = False
    agg_was_list: bool = False

    @property
    def is_grid(self) -> bool:
        return self.seed_was_list or self.agg_was_list


@dataclass
class RunVariant:
    """One grid arm: a label, a seed, and the paths/aggregation it trains."""

    label: str
    seed: int
    aggregation: AggregationConfig
    paths: list

    @property
    def run_id(self) -> str:
        return f"{self.label}-seed{self.seed}"


# ----------------------------------------------------------------- block parsers


def _resolve(path_str: str, base_dir) -> str:
    if base_dir and not os.path.isabs(path_str):
        return os.path.join(base_dir, path_str)
    return path_str


def _require_file(path_str: str, key: str):
    if not os.path.isfile(path_str):
        raise ValidationError(f"{key} references missing file {path_str!r}")


def _parse_dataset(raw, base_dir) -> DatasetConfig:
    _section(raw, "dataset", {
        "kind", "classes", "synth_kind", "n", "n_val", "noise",
        "train_images", "train_labels", "val_images", "val_labels",
        "train_path", "val_path", "input_dim", "header",
    })
    kind = _get(raw, "dataset", "kind", kind=str)
    if kind == "synthetic":
        synth_kind = _get(raw, "dataset", "synth_kind", "gaussian_blobs", str)
        if synth_kind not in ("two_spirals", "gaussian_blobs"):
            raise ValidationError(
                f"dataset.synth_kind must be two_spirals or gaussian_blobs,"
                f" got {synth_kind!r}")
        default_classes = 2 if synth_kind == "two_spirals" else 4
        cfg = DatasetConfig(
            kind=kind,
            classes=_get(raw, "dataset", "classes", default_classes, int),
            synth_kind=synth_kind,
            n=_get(raw, "dataset", "n", 1000, int),
            n_val=_get(raw, "dataset", "n_val", 200, int),
            noise=float(_get(raw, "dataset", "noise", 0.1, float)),
        )
        if synth_kind == "two_spirals" and cfg.classes != 2:
            raise ValidationError("dataset.classes must be 2 for two_spirals")
        if cfg.n < 2 or cfg.n_val < 1:
            raise ValidationError("dataset.n must be >= 2 and n_val >= 1")
        return cfg
    if kind == "idx":
        cfg = DatasetConfig(
            kind=kind,
            classes=_get(raw, "dataset", "classes", kind=int),
            train_images=_resolve(_get(raw, "dataset", "train_images", kind=str), base_dir),
            train_labels=_resolve(_get(raw, "dataset", "train_labels", kind=str), base_dir),
            val_images=_resolve(_get(raw, "dataset", "val_images", kind=str), base_dir),
            val_labels=_resolve(_get(raw, "dataset", "val_labels", kind=str), base_dir),
        )
        for key in ("train_images", "train_labels", "val_images", "val_labels"):
            _require_file(getattr(cfg, key), f"dataset.{key}")
        return cfg
    if kind == "csv":
        cfg = DatasetConfig(
            kind=kind,
            classes=_get(raw, "dataset", "classes", kind=int),
            train_path=_resolve(_get(raw, "dataset", "train_path", kind=str), base_dir),
            val_path=_resolve(_get(raw, "dataset", "val_path", kind=str), base_dir),
            input_dim=_get(raw, "dataset", "input_dim", kind=int),
            header=_get(raw, "dataset", "header", False, bool),
        )
        _require_file(cfg.train_path, "dataset.train_path")
        _require_file(cfg.val_path, "dataset.val_path")
        return cfg
    raise ValidationError(f"dataset.kind must be synthetic, idx, or csv, got {kind!r}")


def _parse_model(raw, path: str, dataset_kind: str, default_width: int,
                 default_hidden: list) -> ModelConfig:
    _section(raw, path, {"arch", "width_multiplier", "hidden"})
    default_arch = "convnet" if dataset_kind == "idx" else "mlp"
    arch = _get(raw, path, "arch", default_arch, str)
    if arch == "convnet":
        if dataset_kind != "idx":
            raise ValidationError(f"{path}.arch convnet requires an idx dataset")
        width = _get(raw, path, "width_multiplier", default_width, int)
        if width < 1:
            raise ValidationError(f"{path}.width_multiplier must be >= 1")
        return ModelConfig(arch=arch, width_multiplier=width)
    if arch == "mlp":
        hidden = _get(raw, path, "hidden", list(default_hidden), list)
        hidden = _int_list(hidden, f"{path}.hidden")
        if not hidden or any(h < 1 for h in hidden):
            raise ValidationError(f"{path}.hidden must be positive integers")
        return ModelConfig(arch=arch, hidden=hidden)
    raise ValidationError(f"{path}.arch must be convnet or mlp, got {arch!r}")


def _parse_schedule(raw, path: str, defaults) -> dict:
    out = {
        "lr": float(_get(raw, path, "lr", defaults.lr, float)),
        "momentum": float(_get(raw, path, "momentum", defaults.momentum, float)),
        "weight_decay": float(_get(raw, path, "weight_decay",
                                   defaults.weight_decay, float)),
        "milestones": _int_list(_get(raw, path, "milestones", [], list),
                                f"{path}.milestones"),
        "decay_factor": float(_get(raw, path, "decay_factor",
                                   defaults.decay_factor, float)),
    }
    if out["lr"] <= 0 or out["decay_factor"] <= 0:
        raise ValidationError(f"{path}.lr and decay_factor must be positive")
    if sorted(out["milestones"]) != out["milestones"] or any(
            m < 0 for m in out["milestones"]):
        raise ValidationError(f"{path}.milestones must be sorted and non-negative")
    return out


def _parse_teacher(raw, base_dir, dataset_kind) -> TeacherConfig:
    _section(raw, "teacher", {"arch", "width_multiplier", "hidden",
                              "checkpoint", "pretrain"})
    model_raw = {k: raw[k] for k in ("arch", "width_multiplier", "hidden")
                 if k in raw}
    model = _parse_model(model_raw, "teacher", dataset_kind,
                         default_width=4, default_hidden=[128, 64])
    checkpoint = _get(raw, "teacher", "checkpoint", "", str)
    pre_raw = _get(raw, "teacher", "pretrain", None, dict)
    if checkpoint and pre_raw is not None:
        raise ValidationError(
            "teacher.checkpoint and teacher.pretrain are mutually exclusive")
    if not checkpoint and pre_raw is None:
        raise ValidationError("teacher.checkpoint or teacher.pretrain required")
    pretrain = None
    if pre_raw is not None:
        _section(pre_raw, "teacher.pretrain",
                 {"epochs", "batch_size", "lr", "momentum", "weight_decay",
                  "milestones", "decay_factor"})
        sched = _parse_schedule(pre_raw, "teacher.pretrain", OptimizerConfig())
        pretrain = PretrainConfig(
            epochs=_get(pre_raw, "teacher.pretrain", "epochs", 5, int),
            batch_size=_get(pre_raw, "teacher.pretrain", "batch_size", 128, int),
            **sched)
        if pretrain.epochs < 1 or pretrain.batch_size < 1:
            raise ValidationError(
                "teacher.pretrain.epochs and batch_size must be >= 1")
    else:
        checkpoint = _resolve(checkpoint, base_dir)
        _require_file(checkpoint, "teacher.checkpoint")
    return TeacherConfig(model=model, checkpoint=checkpoint, pretrain=pretrain)


def _parse_paths(raw) -> list:
    if not isinstance(raw, list):
        raise ValidationError("paths must be a list")
    paths, seen = [], set()
    for i, entry in enumerate(raw):
        where = f"paths[{i}]"
        _section(entry, where, {"id", "kind", "student_tap", "teacher_tap",
                                "temperature", "at_squared"})
        pid = _get(entry, where, "id", kind=str)
        kind = _get(entry, where, "kind", kind=str)
        if kind not in PATH_KINDS:
            raise ValidationError(f"{where}.kind must be one of {PATH_KINDS}")
        if pid in seen:
            raise ValidationError(f"{where}.id duplicate {pid!r}")
        seen.add(pid)
        default_tap = "logits" if kind in LOGIT_KINDS else _MISSING
        student_tap = _get(entry, where, "student_tap", default_tap)
        teacher_tap = _get(entry, where, "teacher_tap", default_tap)
        try:
            paths.append(DistillPath(
                id=pid, kind=kind, student_tap=student_tap,
                teacher_tap=teacher_tap,
                temperature=float(_get(entry, where, "temperature", 4.0, float)),
                at_squared=_get(entry, where, "at_squared", True, bool)))
        except ValueError as err:
            raise ValidationError(f"{where}: {err}") from None
    return paths


def _layerwise_count(paths) -> int:
    total = 0
    for p in paths:
        taps = p.student_tap
        total += len(taps) if isinstance(taps, (list, tuple)) else 1
    return total


def _parse_aggregation(raw, where: str, paths, unsafe_alpha: bool) -> AggregationConfig:
    _section(raw, where, {"strategy", "label", "alpha", "fixed_v",
                          "layerwise", "moo_every", "use_paths"})
    strategy = _get(raw, where, "strategy", kind=str)
    if strategy not in STRATEGIES:
        raise ValidationError(f"{where}.strategy must be one of {STRATEGIES}")
    alpha = float(_get(raw, where, "alpha", 1.0, float))
    if not 0.0 <= alpha <= 1.0:
        if not unsafe_alpha:
            raise ValidationError(f"{where}.alpha must be in [0, 1], got {alpha}"
                                  " (pass --unsafe-alpha to override)")
        warnings.warn(f"{where}.alpha={alpha} is outside [0, 1]", stacklevel=2)
    use_paths = _get(raw, where, "use_paths", None)
    if use_paths is not None:
        if not isinstance(use_paths, list) or not all(
                isinstance(u, str) for u in use_paths):
            raise ValidationError(f"{where}.use_paths must be a list of path ids")
        known = {p.id for p in paths}
        for u in use_paths:
            if u not in known:
                raise ValidationError(f"{where}.use_paths names unknown path {u!r}")
    selected = [p for p in paths
                if use_paths is None or p.id in use_paths]
    layerwise = _get(raw, where, "layerwise", False, bool)
    moo_every = _get(raw, where, "moo_every", 1, int)
    if moo_every < 1:
        raise ValidationError(f"{where}.moo_every must be >= 1")
    fixed_v = _get(raw, where, "fixed_v", None)
    if strategy == "fixed":
        if fixed_v is None:
            raise ValidationError(f"{where}.fixed_v required")
        if not isinstance(fixed_v, list) or not all(
                _typed(v, float) for v in fixed_v):
            raise ValidationError(f"{where}.fixed_v must be a list of numbers")
        expect = _layerwise_count(selected) if layerwise else len(selected)
        if len(fixed_v) != expect:
            raise ValidationError(
                f"{where}.fixed_v has {len(fixed_v)} weights for {expect} paths")
        fixed_v = [float(v) for v in fixed_v]
    elif fixed_v is not None:
        raise ValidationError(f"{where}.fixed_v only applies to strategy fixed")
    label = _get(raw, where, "label", strategy, str)
    return AggregationConfig(strategy=strategy, label=label, alpha=alpha,
                             fixed_v=fixed_v, layerwise=layerwise,
                             moo_every=moo_every, use_paths=use_paths)


# ------------------------------------------------------------------- parsing


def parse_config(document: str, base_dir=None, unsafe_alpha: bool = False) -> RunConfig:
    """Validate a JSON run description into a fully defaulted RunConfig.

    Unknown keys anywhere are hard errors; error messages use dotted key
    paths. File paths are resolved relative to base_dir when given and
    must exist.
    """
    try:
        raw = json.loads(document)
    except json.JSONDecodeError as err:
        raise ParseError(err.msg, err.lineno, err.colno) from None
    _section(raw, "", {"dataset", "teacher", "student", "paths", "aggregation",
                       "optimizer", "epochs", "batch_size", "seed",
                       "output_dir", "sim_every"})
    dataset = _parse_dataset(_get(raw, "", "dataset", kind=dict), base_dir)
    teacher = _parse_teacher(_get(raw, "", "teacher", {}, dict), base_dir,
                             dataset.kind)
    student = _parse_model(_get(raw, "", "student", {}, dict), "student",
                           dataset.kind, default_width=1, default_hidden=[64])
    paths = _parse_paths(_get(raw, "", "paths", [], list))

    agg_raw = _get(raw, "", "aggregation", {"strategy": "equal"})
    agg_was_list = isinstance(agg_raw, list)
    blocks = agg_raw if agg_was_list else [agg_raw]
    if not blocks:
        raise ValidationError("aggregation must not be an empty list")
    aggregations, labels = [], set()
    for i, block in enumerate(blocks):
        where = f"aggregation[{i}]" if agg_was_list else "aggregation"
        cfg = _parse_aggregation(block, where, paths, unsafe_alpha)
        if cfg.label in labels:
            raise ValidationError(f"{where}.label duplicate {cfg.label!r}")
        labels.add(cfg.label)
        aggregations.append(cfg)

    opt_raw = _get(raw, "", "optimizer", {}, dict)
    _section(opt_raw, "optimizer", {"lr", "momentum", "weight_decay",
                                    "milestones", "decay_factor"})
    optimizer = OptimizerConfig(**_parse_schedule(opt_raw, "optimizer",
                                                  OptimizerConfig()))

    seed_raw = _get(raw, "", "seed", 0)
    seed_was_list = isinstance(seed_raw, list)
    seeds = _int_list(seed_raw, "seed") if seed_was_list else [seed_raw]
    if not seeds or not all(_typed(s, int) for s in seeds):
        raise ValidationError("seed must be an integer or a list of integers")
    for s in seeds:
        if not -(2 ** 63) <= s < 2 ** 63:
            raise ValidationError("seed must fit in 64 bits")

    epochs = _get(raw, "", "epochs", 10, int)
    batch_size = _get(raw, "", "batch_size", 128, int)
    sim_every = _get(raw, "", "sim_every", 50, int)
    if epochs < 1 or batch_size < 1 or sim_every < 1:
        raise ValidationError("epochs, batch_size, and sim_every must be >= 1")

    return RunConfig(
        dataset=dataset, teacher=teacher, student=student, paths=paths,
        aggregations=aggregations, optimizer=optimizer, epochs=epochs,
        batch_size=batch_size, seeds=[int(s) for s in seeds],
        output_dir=_resolve(_get(raw, "", "output_dir", "runs", str), base_dir),
        sim_every=sim_every, seed_was_list=seed_was_list,
        agg_was_list=agg_was_list)


def expand_grid(cfg: RunConfig) -> list:
    """All (aggregation, seed) arms of a config, in declaration order."""
    variants = []
    for agg in cfg.aggregations:
        selected = [p for p in cfg.paths
                    if agg.use_paths is None or p.id in agg.use_paths]
        for seed in cfg.seeds:
            variants.append(RunVariant(label=agg.label, seed=seed,
                                       aggregation=agg, paths=selected))
    return variants
