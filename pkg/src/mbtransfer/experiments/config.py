"""Experiment configuration: nested dataclasses with full defaults, loaded
strictly from YAML (unknown keys are errors)."""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from ..data.synthetic import GapConfig
from ..distill import OptimSpec, TrainSettings
from ..errors import ConfigError, InvalidInputError

METHODS = ("ours-irm", "ours-no-irm", "finetune-opt", "finetune-sar", "kd-soft-opt",
           "supervised-fusion", "late-fusion")


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "synthetic"              # synthetic | path
    path: Optional[str] = None           # dataset directory when kind == path
    gap: GapConfig = field(default_factory=GapConfig)


@dataclass(frozen=True)
class SourceTaskSpec:
    """Cloud-free optical task used to pretrain the source encoder."""
    num_classes: int = 10
    samples_per_class: int = 150
    info: float = 1.0


@dataclass(frozen=True)
class CloudSpec:
    fraction: float = 0.5                # image-level share of masked samples
    coverage: float = 0.5                # per-sample masked pixel share
    thin_thick_ratio: float = 1.0        # thin : thick; .inf for thin only
    library_size: int = 16
    library_seed: int = 0
    thin_mask_dir: Optional[str] = None  # optional user mask images (grayscale)
    thick_mask_dir: Optional[str] = None


@dataclass(frozen=True)
class SplitSpec:
    test_fraction: float = 0.2
    labeled_per_class: int = 20


@dataclass(frozen=True)
class ModelSpec:
    blocks: tuple[tuple[int, int, int], ...] = ((16, 3, 2), (32, 3, 2), (64, 3, 2))
    head_init: str = "fan_in"            # fan_in | zeros


@dataclass(frozen=True)
class OptimizerSpec:
    kind: str = "adam"                   # adam | sgd
    lr: float = 1e-3
    momentum: float = 0.0
    decay: float = 0.0                   # inverse-time decay per step
    batch_size: int = 64


@dataclass(frozen=True)
class TrainingSpec:
    pretrain_epochs: int = 30
    finetune_epochs: int = 100
    f1_epochs: int = 40
    f2_epochs: int = 40
    pseudo_labels: str = "soft"          # soft | hard
    aux_init: str = "fresh"              # fresh | warm (auxiliary encoders from the source encoder)
    freeze_encoder: bool = True
    supervised_weight: float = 0.0       # extra CE on the labeled pool during F1/F2


@dataclass(frozen=True)
class IRMSpec:
    rho_min: float = 0.2
    rho_max: float = 5.0


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    source_task: SourceTaskSpec = field(default_factory=SourceTaskSpec)
    clouds: CloudSpec = field(default_factory=CloudSpec)
    split: SplitSpec = field(default_factory=SplitSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)
    training: TrainingSpec = field(default_factory=TrainingSpec)
    irm: IRMSpec = field(default_factory=IRMSpec)
    method: str = "ours-irm"
    seeds: tuple[int, ...] = (0,)
    output_dir: str = "runs"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        if self.dataset.kind not in ("synthetic", "path"):
            raise ConfigError(f"dataset.kind must be synthetic or path, got {self.dataset.kind!r}")
        if self.dataset.kind == "path" and not self.dataset.path:
            raise ConfigError("dataset.path is required when dataset.kind == path")
        if self.model.head_init not in ("fan_in", "zeros"):
            raise ConfigError(f"model.head_init must be fan_in or zeros, got {self.model.head_init!r}")
        if self.optimizer.kind not in ("adam", "sgd"):
            raise ConfigError(f"optimizer.kind must be adam or sgd, got {self.optimizer.kind!r}")
        if self.training.aux_init not in ("fresh", "warm"):
            raise ConfigError(f"training.aux_init must be fresh or warm, got {self.training.aux_init!r}")
        if not 0 < self.irm.rho_min <= self.irm.rho_max:
            raise ConfigError("irm bounds must satisfy 0 < rho_min <= rho_max")

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def settings(self, epochs: int, seed: int) -> TrainSettings:
        o = self.optimizer
        return TrainSettings(
            epochs=epochs, batch_size=o.batch_size, seed=seed,
            optim=OptimSpec(kind=o.kind, lr=o.lr, momentum=o.momentum, decay=o.decay),
            pseudo_labels=self.training.pseudo_labels, supervised_weight=self.training.supervised_weight,
            blocks=self.model.blocks,
        )

    @property
    def clamp(self) -> tuple[float, float]:
        return (self.irm.rho_min, self.irm.rho_max)


# --------------------------------------------------------------------------
# (de)serialisation
# --------------------------------------------------------------------------

def to_dict(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj):
        return {f.name: to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [to_dict(v) for v in obj]
    return obj


def _build(tp: Any, value: Any, where: str) -> Any:
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a mapping, got {type(value).__name__}")
        hints = typing.get_type_hints(tp)
        names = {f.name for f in dataclasses.fields(tp)}
        unknown = sorted(set(value) - names)
        if unknown:
            raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
        kwargs = {k: _build(hints[k], v, f"{where}.{k}" if where else k) for k, v in value.items()}
        try:
            return tp(**kwargs)
        except InvalidInputError as exc:
            raise ConfigError(f"{where or 'config'}: {exc}") from exc
    if origin is typing.Union:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _build(inner[0], value, where)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_build(args[0], v, f"{where}[{i}]") for i, v in enumerate(value))
        if len(args) != len(value):
            raise ConfigError(f"{where}: expected {len(args)} entries, got {len(value)}")
        return tuple(_build(a, v, f"{where}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if tp is float:
        if isinstance(value, str):
            # YAML 1.1 reads "1e-3" as a string
            try:
                value = float(value)
            except ValueError:
                raise ConfigError(f"{where}: expected a number, got {value!r}") from None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    return value


def from_dict(d: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, d or {}, "")


def dumps(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)


def loads(text: str) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from exc
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    return from_dict(raw or {})


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} does not exist")
    return loads(p.read_text())


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(dumps(cfg))

