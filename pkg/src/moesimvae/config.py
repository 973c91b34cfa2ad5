"""Configuration dataclasses and strict key-value parsing.

Config files are YAML mappings whose keys mirror the dataclass field names.
Unknown keys are fatal so that a typo never silently falls back to a default.
"""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

import yaml

from .errors import ConfigError


@dataclass
class ModelConfig:
    input_dim: Optional[int] = None
    latent_dim: int = 10
    num_experts: int = 10
    encoder_hidden: tuple[int, ...] = (512, 256)
    expert_hidden: tuple[int, ...] = (256, 512)
    clustering_hidden: tuple[int, ...] = (128,)
    depict_dropout_rate: float = 0.2
    pi1: float = 1.0
    pi2: float = 1.0
    # ablation switches
    soft_routing: bool = False
    soft_kl_variance: bool = False
    similarity_diagonal: bool = True
    empty_cluster_patience: int = 50
    # (rows, cols) when features are flattened images; enables PGM export
    image_shape: Optional[tuple[int, int]] = None

    def validate(self) -> None:
        if self.input_dim is None or self.input_dim < 1:
            raise ConfigError(f"model.input_dim must be a positive integer, got {self.input_dim!r}")
        if self.latent_dim < 1:
            raise ConfigError("model.latent_dim must be positive")
        if self.num_experts < 1:
            raise ConfigError("model.num_experts must be >= 1")
        for name in ("encoder_hidden", "expert_hidden", "clustering_hidden"):
            if any(w < 1 for w in getattr(self, name)):
                raise ConfigError(f"model.{name} widths must be positive")
        if not 0.0 <= self.depict_dropout_rate < 1.0:
            raise ConfigError("model.depict_dropout_rate must lie in [0, 1)")
        if self.empty_cluster_patience < 1:
            raise ConfigError("model.empty_cluster_patience must be positive")
        if self.image_shape is not None:
            rows, cols = self.image_shape
            if rows * cols != self.input_dim:
                raise ConfigError(
                    f"model.image_shape {rows}x{cols} does not match input_dim {self.input_dim}")


@dataclass
class SimilarityConfig:
    source: str = "raw_features"  # raw_features | precomputed_embedding | labels
    method: str = "knn"  # knn | threshold
    k_neighbors: int = 10
    distance_threshold: float = 1.0
    metric: str = "euclidean"

    def validate(self) -> None:
        if self.source not in ("raw_features", "precomputed_embedding", "labels"):
            raise ConfigError(f"similarity.source: unknown value {self.source!r}")
        if self.method not in ("knn", "threshold"):
            raise ConfigError(f"similarity.method: unknown value {self.method!r}")
        if self.metric != "euclidean":
            raise ConfigError(f"similarity.metric: only 'euclidean' is supported, got {self.metric!r}")
        if self.k_neighbors < 1:
            raise ConfigError("similarity.k_neighbors must be positive")
        if self.distance_threshold <= 0:
            raise ConfigError("similarity.distance_threshold must be positive")


@dataclass
class DataConfig:
    format: str = "idx"  # idx | csv | blobs
    path: Optional[str] = None
    labels_path: Optional[str] = None
    label_column: Optional[str] = None
    arcsinh_cofactor: Optional[float] = None
    embedding_path: Optional[str] = None
    limit: Optional[int] = None
    # synthetic blobs
    n_samples: int = 2000
    n_features: int = 20
    n_centers: int = 4
    separation: float = 10.0
    data_seed: int = 0

    def validate(self) -> None:
        if self.format not in ("idx", "csv", "blobs"):
            raise ConfigError(f"data.format: unknown value {self.format!r}")
        if self.format in ("idx", "csv") and not self.path:
            raise ConfigError(f"data.path is required for format {self.format!r}")
        if self.limit is not None and self.limit < 1:
            raise ConfigError("data.limit must be positive")


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 256
    learning_rate: float = 1e-3
    seed: int = 0
    eval_every: int = 1
    patience: Optional[int] = None
    warmup_epochs: int = 0
    checkpoint_every: int = 1
    model: ModelConfig = field(default_factory=ModelConfig)
    similarity: SimilarityConfig = field(default_factory=SimilarityConfig)
    data: DataConfig = field(default_factory=DataConfig)
    output_dir: Optional[str] = None

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ConfigError("epochs, batch_size and learning_rate must be positive")
        if self.eval_every < 0 or self.warmup_epochs < 0 or self.checkpoint_every < 0:
            raise ConfigError("eval_every, warmup_epochs and checkpoint_every must be >= 0")
        if self.patience is not None and self.patience < 1:
            raise ConfigError("patience must be positive when set")
        self.model.validate()
        self.similarity.validate()


def to_dict(cfg) -> dict[str, Any]:
    """Plain-data view of a config dataclass (tuples become lists)."""
    out = {}
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            value = to_dict(value)
        elif isinstance(value, tuple):
            value = list(value)
        out[f.name] = value
    return out


def _coerce(value, tp, path):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], path)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a mapping")
        return from_dict(tp, value, prefix=path + ".")
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        elem = args[0]
        return tuple(_coerce(v, elem, path) for v in value)
    if tp is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0", "yes", "no"):
            return value.lower() in ("true", "1", "yes")
        raise ConfigError(f"{path}: expected a boolean, got {value!r}")
    if tp is int:
        if isinstance(value, bool):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        try:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{path}: expected an integer, got {value!r}") from None
    if tp is float:
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{path}: expected a number, got {value!r}") from None
    if tp is str:
        return str(value)
    return value


def from_dict(cls, data: dict[str, Any], prefix: str = ""):
    """Build ``cls`` from a mapping, rejecting unknown keys."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError("unknown config key(s): " + ", ".join(prefix + k for k in unknown))
    kwargs = {k: _coerce(v, hints[k], prefix + k) for k, v in data.items()}
    return cls(**kwargs)


def apply_override(raw: dict[str, Any], assignment: str) -> None:
    """Apply one ``dotted.key=value`` override to a raw config mapping in place."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    key, text = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = raw
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key!r}: {part!r} is not a section")
    node[parts[-1]] = yaml.safe_load(text) if text.strip() else None


def load_train_config(path: Optional[str | Path], overrides: Sequence[str] = ()) -> TrainConfig:
    raw: dict[str, Any] = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        raw = yaml.safe_load(text) or {}
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    for item in overrides:
        apply_override(raw, item)
    return from_dict(TrainConfig, raw)

