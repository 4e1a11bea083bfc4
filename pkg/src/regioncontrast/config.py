"""Run configuration: nested frozen dataclasses with strict JSON loading.

Unknown keys anywhere in the JSON are an error — silent typos in
experiment configs are how results stop being reproducible.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields, is_dataclass, replace
from pathlib import Path

from .elastic import ElasticParams
from .felzenszwalb import FelzParams
from .phantoms import PhantomConfig

__all__ = ["DataConfig", "TrainConfig", "RunConfig", "load_run_config"]


@dataclass(frozen=True)
class DataConfig:
    """How many phantoms each stage sees.

    Pretraining uses images [0, count); fine-tuning uses ``finetune_count``
    fresh images after those, and validation takes a further
    ``val_fraction`` * count images.  Index-seeded generation keeps all
    three windows stable.
    """

    count: int = 200
    finetune_count: int = 10
    val_fraction: float = 0.2

    def __post_init__(self):
        if self.count < 1:
            raise ValueError(f"DataConfig: count must be >= 1, got {self.count}")
        if self.finetune_count < 1:
            raise ValueError(f"DataConfig: finetune_count must be >= 1, got {self.finetune_count}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError(f"DataConfig: val_fraction must be in (0, 1), got {self.val_fraction}")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    global_epochs: int = 200
    local_epochs: int = 30
    finetune_epochs: int = 100
    n_samples: int = 50          # feature vectors drawn per region
    tau_global: float = 0.07
    tau_local: float = 0.1
    lr_global: float = 0.03     # SGD + momentum
    lr_local: float = 1e-3      # Adam
    lr_finetune: float = 1e-3   # Adam
    momentum: float = 0.9
    weight_decay: float = 1e-4
    feature_dim: int = 64
    embed_dim: int = 128
    n_classes: int = 6
    seed: int = 0
    elastic: ElasticParams = ElasticParams()
    felz: FelzParams = FelzParams()
    # behavioral switches for ambiguous protocol details
    normalize_local_means: bool = False
    exclude_self_similarity: bool = False
    literal_global_denominator: bool = False
    symmetric_global_queries: bool = False
    cache_regions: bool = False

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError(f"TrainConfig: batch_size must be >= 2, got {self.batch_size}")
        for name in ("global_epochs", "local_epochs", "finetune_epochs", "n_samples"):
            if getattr(self, name) < 1:
                raise ValueError(f"TrainConfig: {name} must be >= 1, got {getattr(self, name)}")
        for name in ("tau_global", "tau_local", "lr_global", "lr_local", "lr_finetune"):
            if getattr(self, name) <= 0:
                raise ValueError(f"TrainConfig: {name} must be > 0, got {getattr(self, name)}")
        if self.n_classes < 2:
            raise ValueError(f"TrainConfig: n_classes must be >= 2, got {self.n_classes}")


@dataclass(frozen=True)
class RunConfig:
    phantom: PhantomConfig = PhantomConfig()
    train: TrainConfig = TrainConfig()
    data: DataConfig = DataConfig()

    def with_seed(self, seed: int) -> "RunConfig":
        """Propagate one seed to both phantom generation and training."""
        return replace(self,
                       phantom=replace(self.phantom, seed=seed),
                       train=replace(self.train, seed=seed))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _build_dataclass(cls, d, "")


def _coerce(value, target_type, path: str):
    if is_dataclass(target_type):
        if not isinstance(value, dict):
            raise ValueError(f"config key '{path}': expected an object, got {type(value).__name__}")
        return _build_dataclass(target_type, value, path)
    if target_type is tuple:
        if not isinstance(value, (list, tuple)):
            raise ValueError(f"config key '{path}': expected a list, got {type(value).__name__}")
        return tuple(value)
    if target_type is bool:
        if not isinstance(value, bool):
            raise ValueError(f"config key '{path}': expected a bool, got {value!r}")
        return value
    if target_type is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValueError(f"config key '{path}': expected an int, got {value!r}")
        return value
    if target_type is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValueError(f"config key '{path}': expected a number, got {value!r}")
        return float(value)
    return value


def _build_dataclass(dc_type, d: dict, path: str):
    known = {f.name: f for f in fields(dc_type)}
    kwargs = {}
    for key, value in d.items():
        where = f"{path}.{key}" if path else key
        if key not in known:
            raise ValueError(f"unknown config key '{where}'")
        f = known[key]
        target = f.type
        if isinstance(target, str):  # from __future__ annotations
            target = _ANNOTATION_TYPES.get(target, None)
        if target is None:
            target = type(f.default) if f.default is not dataclasses.MISSING else None
        kwargs[key] = _coerce(value, target, where)
    return dc_type(**kwargs)


_ANNOTATION_TYPES = {
    "int": int,
    "float": float,
    "bool": bool,
    "str": str,
    "tuple": tuple,
    "PhantomConfig": PhantomConfig,
    "TrainConfig": TrainConfig,
    "DataConfig": DataConfig,
    "ElasticParams": ElasticParams,
    "FelzParams": FelzParams,
}


def load_run_config(path) -> RunConfig:
    """Parse a JSON file into a RunConfig, rejecting unknown keys."""
    text = Path(path).read_text()
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise ValueError(f"config file {path} is not valid JSON: {e}") from e
    if not isinstance(d, dict):
        raise ValueError(f"config file {path}: top level must be an object")
    return RunConfig.from_dict(d)
