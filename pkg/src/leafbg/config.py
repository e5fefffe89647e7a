"""Flat ``key: value`` pipeline configuration (YAML syntax, dotted keys)."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from fractions import Fraction
from pathlib import Path

import yaml

from .classifier import BackboneSpec, HeadSpec, PreprocessSpec
from .errors import ConfigError
from .segmenter import SegmenterBackendId
from .trainer import OPTIMIZERS, OptimizerConfig, TrainConfig, default_optimizer

DEFAULTS = {
    "paths.label_table": None,
    "paths.image_dir": None,
    "paths.work_dir": "work",
    "seed": 0,
    "seeds.balance": None,
    "seeds.split": None,
    "seeds.init": None,
    "seeds.shuffle": None,
    "split.ratios": "3/5,1/5,1/5",
    "segment.backend": "baseline",
    "segment.model_path": None,
    "segment.threshold": 0.5,
    "segment.gate_min": 0.05,
    "segment.gate_max": 0.95,
    "segment.manual_rejects": None,
    "preprocess.size": 224,
    "preprocess.interpolation": "bilinear",
    "backbone.weights": "imagenet",
    "backbone.freeze_boundary": 2,
    "proxy.images": 1500,
    "proxy.size": 96,
    "proxy.epochs": 4,
    "train.epochs": 50,
    "train.batch_size": 16,
    "train.cache_frozen": True,
    "evaluate.checkpoint": "best",
    "synthetic.n_per_class": 60,
}
for _kind in OPTIMIZERS:
    for _k, _v in vars(default_optimizer(_kind)).items():
        if _k != "kind":
            DEFAULTS[f"optimizer.{_kind}.{_k}"] = _v

BACKEND_ALIASES = {"baseline": "color_index_baseline", "salient": "salient_model",
                   "color_index_baseline": "color_index_baseline", "salient_model": "salient_model"}


@dataclass
class PipelineConfig:
    values: dict = field(default_factory=lambda: dict(DEFAULTS))
    source: Path | None = None

    def __getitem__(self, key):
        return self.values[key]

    def with_overrides(self, **overrides) -> "PipelineConfig":
        vals = dict(self.values)
        for key, value in overrides.items():
            if value is None:
                continue
            if key not in vals:
                raise ConfigError(f"unknown config key {key!r}")
            vals[key] = value
        return PipelineConfig(vals, self.source)

    # derived views ------------------------------------------------------------
    def seed_for(self, name: str) -> int:
        value = self.values[f"seeds.{name}"]
        return int(self.values["seed"] if value is None else value)

    @property
    def seeds(self) -> dict[str, int]:
        return {name: self.seed_for(name) for name in ("balance", "split", "init", "shuffle")}

    @property
    def work_dir(self) -> Path:
        return Path(self.values["paths.work_dir"])

    @property
    def split_ratios(self) -> tuple[Fraction, ...]:
        raw = self.values["split.ratios"]
        parts = raw.split(",") if isinstance(raw, str) else list(raw)
        try:
            return tuple(Fraction(str(p).strip()) for p in parts)
        except (ValueError, ZeroDivisionError) as exc:
            raise ConfigError(f"bad split.ratios {raw!r}: {exc}") from exc

    @property
    def segmenter_backend(self) -> SegmenterBackendId:
        kind = BACKEND_ALIASES.get(self.values["segment.backend"])
        if kind is None:
            raise ConfigError(f"unknown segmentation backend {self.values['segment.backend']!r}")
        return SegmenterBackendId(kind, self.values["segment.model_path"])

    @property
    def gate_bounds(self) -> tuple[float, float]:
        return float(self.values["segment.gate_min"]), float(self.values["segment.gate_max"])

    @property
    def preprocess(self) -> PreprocessSpec:
        size = int(self.values["preprocess.size"])
        return PreprocessSpec((size, size), self.values["preprocess.interpolation"])

    @property
    def backbone(self) -> BackboneSpec:
        return BackboneSpec(str(self.values["backbone.weights"]), int(self.values["backbone.freeze_boundary"]))

    @property
    def head(self) -> HeadSpec:
        return HeadSpec()

    def optimizer(self, kind: str) -> OptimizerConfig:
        if kind not in OPTIMIZERS:
            raise ConfigError(f"unknown optimizer {kind!r}")
        kwargs = {f.name: self.values[f"optimizer.{kind}.{f.name}"]
                  for f in fields(OptimizerConfig) if f.name != "kind"}
        kwargs = {k: (bool(v) if k == "amsgrad" else float(v)) for k, v in kwargs.items()}
        return OptimizerConfig(kind, **kwargs)

    def train_config(self, dataset: str = "dataset_1", kind: str = "adam") -> TrainConfig:
        return TrainConfig(epochs=int(self.values["train.epochs"]), batch_size=int(self.values["train.batch_size"]),
                           shuffle_seed=self.seed_for("shuffle"), dataset=dataset,
                           optimizer=self.optimizer(kind), cache_frozen=bool(self.values["train.cache_frozen"]))

    def to_dict(self) -> dict:
        return {k: self.values[k] for k in sorted(self.values)}

    def digest(self) -> str:
        from .evaluator import digest
        return digest(self.to_dict())


def load_config(path=None) -> PipelineConfig:
    cfg = PipelineConfig()
    if path is None:
        return cfg
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a flat mapping of key: value pairs")
    nested = [k for k, v in data.items() if isinstance(v, dict)]
    if nested:
        raise ConfigError(f"{path}: nested sections are not supported, use dotted keys ({', '.join(nested)})")
    cfg = cfg.with_overrides(**data)
    return replace(cfg, source=path)


def write_config(cfg: PipelineConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))


def provenance(cfg: PipelineConfig, stage: str, **extra) -> str:
    body = {"stage": stage, "config_digest": cfg.digest(), "seeds": cfg.seeds, "config": cfg.to_dict(), **extra}
    return json.dumps(body, indent=2, sort_keys=True, default=str) + "\n"
