"""Run configuration: one JSON document with data/model/train/metrics sections.

Unknown keys are rejected at every level, and :func:`resolved` returns the
fully materialized document (defaults included) for echoing into outputs.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .data import DatasetConfig, PhantomConfig
from .errors import ConfigError
from .metrics import SSIMConfig
from .model import ModelConfig, PromptConfig
from .training import TrainConfig

_TUPLE_FIELDS = {"dims", "delta_range", "semi_axes", "hot_amplitude", "cold_amplitude", "blob_sigma", "base_size", "betas", "patch_dims"}


@dataclass
class MetricsConfig:
    ssim: SSIMConfig = field(default_factory=SSIMConfig)
    data_range: float | None = None
    use_support_mask: bool = False


@dataclass
class RunConfig:
    data: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    seed: int = 0

    def apply_seed(self) -> None:
        """Propagate the single top-level seed to every section."""
        self.data.seed = self.seed
        self.train.seed = self.seed


_NESTED = {
    (RunConfig, "data"): DatasetConfig,
    (RunConfig, "model"): ModelConfig,
    (RunConfig, "train"): TrainConfig,
    (RunConfig, "metrics"): MetricsConfig,
    (DatasetConfig, "phantom"): PhantomConfig,
    (ModelConfig, "prompt"): PromptConfig,
    (MetricsConfig, "ssim"): SSIMConfig,
}


def _build(cls, doc: Any, where: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where or 'config'}: expected an object, got {type(doc).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - names)
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown keys {unknown}")
    kwargs = {}
    for key, value in doc.items():
        path = f"{where}.{key}" if where else key
        sub = _NESTED.get((cls, key))
        if sub is not None:
            value = _build(sub, value, path)
        elif key in _TUPLE_FIELDS and isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where or 'config'}: {e}") from e


def from_dict(doc: dict) -> RunConfig:
    cfg = _build(RunConfig, doc, "")
    cfg.apply_seed()
    return cfg


def load(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e.strerror}") from e
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}") from e
    return from_dict(doc)


def _plain(x):
    if dataclasses.is_dataclass(x):
        return {f.name: _plain(getattr(x, f.name)) for f in dataclasses.fields(x)}
    if isinstance(x, (tuple, list)):
        return [_plain(v) for v in x]
    return x


def resolved(cfg: RunConfig) -> dict:
    return _plain(cfg)


def echo(cfg: RunConfig, out_dir, name: str = "resolved_config.json") -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    path.write_text(json.dumps(resolved(cfg), indent=1, sort_keys=True) + "\n")
    return path
