"""Experiment configuration: YAML/JSON file sections mapped onto dataclasses.

Sections: ``model``, ``dataset``, ``optimizer``, ``method``, ``schedule``,
``training``, ``sweep`` plus top-level ``seeds`` and ``out``.  Unknown keys
are configuration errors.  ``apply_overrides`` handles ``section.key=value``
strings from the command line.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from ..baselines import MethodSpec
from ..errors import ConfigError
from ..nn import LayerSpec, OptimizerConfig, infer_shapes, layer_from_dict

PRESETS = {
    # ~93k parameters; one conv stage, one BN'd hidden layer
    "digits_conv": {
        "input_shape": [1, 28, 28],
        "layers": [
            {"kind": "conv2d", "in_channels": 1, "out_channels": 4, "kernel_size": 5},
            {"kind": "relu"},
            {"kind": "flatten"},
            {"kind": "dense", "in_features": 2304, "out_features": 40},
            {"kind": "batchnorm", "num_features": 40},
            {"kind": "relu"},
            {"kind": "dense", "in_features": 40, "out_features": 10},
        ],
    },
    "blobs_mlp": {
        "input_shape": [16],
        "layers": [
            {"kind": "dense", "in_features": 16, "out_features": 64},
            {"kind": "batchnorm", "num_features": 64},
            {"kind": "relu"},
            {"kind": "dense", "in_features": 64, "out_features": 4},
        ],
    },
}


@dataclass
class ModelConfig:
    preset: str = ""
    input_shape: list[int] = field(default_factory=list)
    layers: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if self.preset:
            if self.preset not in PRESETS:
                raise ConfigError(f"unknown model preset {self.preset!r}")
            if not self.layers:
                self.layers = copy.deepcopy(PRESETS[self.preset]["layers"])
            if not self.input_shape:
                self.input_shape = list(PRESETS[self.preset]["input_shape"])
        if not self.layers:
            raise ConfigError("model needs a preset or a layer list")

    def network(self) -> list[LayerSpec]:
        net = [layer_from_dict(d) for d in self.layers]
        if self.input_shape:
            infer_shapes(net, self.input_shape)
        return net


@dataclass
class DatasetConfig:
    kind: str = "synthetic"
    # synthetic blobs
    num_classes: int = 4
    samples: int = 2000
    dims: int = 16
    separation: float = 3.0
    # idx files; `digits` uses the cached 10k subset
    images: str = ""
    labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    data_dir: str = ""
    # splits
    test_size: int = 0
    val_size: int = 0
    split_seed: int = 0
    # preprocessing
    normalize: bool = True
    pad_crop: int = 4
    horizontal_flip: bool = False
    replicate_channels: int = 1

    def __post_init__(self):
        if self.kind not in ("synthetic", "idx", "digits"):
            raise ConfigError(f"unknown dataset kind {self.kind!r}")
        if self.kind == "idx" and not (self.images and self.labels):
            raise ConfigError("dataset.kind=idx needs dataset.images and dataset.labels")


@dataclass
class ScheduleConfig:
    epochs: int = 20
    rate: float = 0.5
    steps: int | None = None
    compression_ratio: float | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("schedule.epochs must be >= 1")
        if not 0 < self.rate < 1:
            raise ConfigError("schedule.rate must lie in (0, 1)")

    @property
    def num_steps(self) -> int:
        if self.steps is not None:
            return int(self.steps)
        if self.compression_ratio is not None:
            return steps_for_ratio(self.compression_ratio, self.rate)
        return 4

    @property
    def target_sparsity(self) -> float:
        return 1.0 - (1.0 - self.rate) ** self.num_steps


def steps_for_ratio(ratio: float, rate: float) -> int:
    """Number of prune events at ``rate`` giving compression ``ratio``."""
    if ratio < 1:
        raise ConfigError("compression ratio must be >= 1")
    return int(round(math.log(1.0 / ratio) / math.log(1.0 - rate)))


@dataclass
class TrainingConfig:
    batch_size: int = 128
    eval_batch_size: int = 1000
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("training.batch_size must be >= 1")


SWEEP_KINDS = ("lambda_grid", "p_grid", "compression_curve", "noise_ablation")
DEFAULT_LAMBDAS = [round(0.75 + 0.05 * k, 2) for k in range(15)]
DEFAULT_PS = [0.0, 0.5, 1.0, 2.0, 4.0]
DEFAULT_RATIOS = [4, 16, 64, 256, 1024]
DEFAULT_ALPHAS = [m * 10.0 ** e for e in range(-7, -2) for m in (1, 3, 6)]
DEFAULT_CURVE_METHODS = ["flipout", "global_magnitude", "random", "snip", "hoyer_square"]
ABLATION_METHODS = ["flipout", "flipout_no_noise", "global_magnitude", "noisy_global_magnitude"]


@dataclass
class SweepConfig:
    kind: str = "compression_curve"
    values: list[float] = field(default_factory=list)
    ratios: list[float] = field(default_factory=list)
    methods: list[str] = field(default_factory=list)
    alphas: list[float] = field(default_factory=list)
    include_dense: bool = True
    workers: int = 1

    def __post_init__(self):
        if self.kind not in SWEEP_KINDS:
            raise ConfigError(f"unknown sweep kind {self.kind!r}; choose from {SWEEP_KINDS}")

    def grid(self) -> list[float]:
        if self.values:
            return [float(v) for v in self.values]
        return {"lambda_grid": DEFAULT_LAMBDAS, "p_grid": DEFAULT_PS}.get(self.kind, [])

    def ratio_list(self) -> list[float]:
        if self.ratios:
            return [float(r) for r in self.ratios]
        if self.kind in ("lambda_grid", "p_grid"):
            return [16, 1024]
        return list(DEFAULT_RATIOS)

    def method_list(self) -> list[str]:
        if self.methods:
            return list(self.methods)
        if self.kind == "noise_ablation":
            return list(ABLATION_METHODS)
        if self.kind == "compression_curve":
            return list(DEFAULT_CURVE_METHODS)
        return ["flipout"]

    def alpha_list(self) -> list[float]:
        return [float(a) for a in self.alphas] if self.alphas else list(DEFAULT_ALPHAS)


def _coerce(value, annotation: str, key: str):
    # YAML 1.1 reads "1e-4" as a string; numeric fields accept such strings
    want = float if "float" in annotation else int if annotation.startswith("int") else None
    if want is None or value is None:
        return value
    if isinstance(value, (list, tuple)):
        return [_coerce(v, annotation, key) for v in value]
    if isinstance(value, str):
        try:
            return want(float(value)) if want is int else float(value)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {value!r}") from None
    return value


def _build(cls, data: dict | None, section: str):
    data = dict(data or {})
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")
    for k in data:
        data[k] = _coerce(data[k], str(known[k].type), f"{section}.{k}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"[{section}]: {exc}") from None


@dataclass
class ExperimentConfig:
    model: ModelConfig
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    method: MethodSpec = field(default_factory=MethodSpec)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    out: str = "runs"

    SECTIONS = {
        "model": ModelConfig,
        "dataset": DatasetConfig,
        "optimizer": OptimizerConfig,
        "method": MethodSpec,
        "schedule": ScheduleConfig,
        "training": TrainingConfig,
        "sweep": SweepConfig,
    }

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config root must be a mapping")
        unknown = sorted(set(doc) - set(cls.SECTIONS) - {"seeds", "out"})
        if unknown:
            raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
        if "model" not in doc:
            raise ConfigError("config needs a [model] section")
        kwargs: dict[str, Any] = {name: _build(kind, doc.get(name), name)
                                  for name, kind in cls.SECTIONS.items() if name in doc}
        if "seeds" in doc:
            seeds = doc["seeds"]
            if isinstance(seeds, int):
                seeds = [seeds]
            kwargs["seeds"] = [int(s) for s in seeds]
        if "out" in doc:
            kwargs["out"] = str(doc["out"])
        cfg = cls(**kwargs)
        cfg.model.network()
        return cfg

    def to_dict(self) -> dict:
        d = {name: asdict(getattr(self, name)) for name in self.SECTIONS}
        d["optimizer"]["lr_decay_epochs"] = list(d["optimizer"]["lr_decay_epochs"])
        d["seeds"] = list(self.seeds)
        d["out"] = self.out
        return d

    def replace(self, **sections) -> "ExperimentConfig":
        """Copy with some section fields changed, e.g. ``replace(method={"lam": 0.5})``."""
        doc = self.to_dict()
        for name, changes in sections.items():
            if name in ("seeds", "out"):
                doc[name] = changes
            else:
                doc[name].update(changes)
        return ExperimentConfig.from_dict(doc)


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML/JSON: {exc}") from None
    return ExperimentConfig.from_dict(doc or {})


def apply_overrides(doc: dict, overrides: list[str]) -> dict:
    """Apply ``section.key=value`` overrides; values are parsed as YAML scalars/lists."""
    doc = copy.deepcopy(doc)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        value = yaml.safe_load(raw)
        parts = key.strip().split(".")
        node = doc
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-section")
        node[parts[-1]] = value
    return doc


def config_bytes(cfg: ExperimentConfig) -> bytes:
    return json.dumps(cfg.to_dict(), sort_keys=True).encode()
