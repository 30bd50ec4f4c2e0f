"""Run configuration: nested dataclasses with strict JSON round-tripping."""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .fields import ColorNetworkConfig, SdfNetworkConfig
from .losses import LossWeights
from .model import ModelConfig
from .sensing import PatchConfig


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    """Training run settings.  Published values are the defaults where they exist.

    ``iters_per_epoch`` of None means one optimizer step per view per epoch.
    ``threads`` of None means all available cores.
    """

    seed: int = 0
    epochs: int = 200
    iters_per_epoch: int | None = None
    batch_rays: int = 1024
    chunk_rays: int = 256
    n_coarse: int = 64
    n_fine: int = 64
    lr: float = 5e-4
    lr_final_ratio: float = 0.05
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    beta_lr_mult: float = 1.0
    eikonal_uniform: int = 512
    visibility_mm: float = 15.0
    n_neighbors: int = 8
    depth_alignment: bool = False
    use_wj: bool = True
    use_eta: bool = True
    pixel_ncc: bool = False
    checkpoint_every: int = 50
    dump_patches: bool = False
    threads: int | None = None
    init_radius: float | None = None
    model: ModelConfig = field(default_factory=ModelConfig)
    patch: PatchConfig = field(default_factory=PatchConfig)
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        self.adam_betas = tuple(self.adam_betas)
        for name in ("epochs", "batch_rays", "chunk_rays", "n_coarse"):
            if getattr(self, name) < (0 if name == "epochs" else 1):
                raise ConfigError(f"{name} is out of range")
        if self.n_fine < 0 or self.eikonal_uniform < 0:
            raise ConfigError("sample counts must be non-negative")
        if self.iters_per_epoch is not None and self.iters_per_epoch < 1:
            raise ConfigError("iters_per_epoch must be positive")
        if not self.beta_lr_mult > 0:
            raise ConfigError("beta_lr_mult must be positive")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.threads is not None and self.threads < 1:
            raise ConfigError("threads must be positive")


def to_dict(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [to_dict(x) for x in obj]
    return obj


def _dataclass_type(tp):
    if dataclasses.is_dataclass(tp):
        return tp
    for arg in typing.get_args(tp):
        if dataclasses.is_dataclass(arg):
            return arg
    return None


def from_dict(cls, data: dict, path: str = ""):
    """Build ``cls`` from a mapping, rejecting unknown keys at every level."""
    if not isinstance(data, dict):
        raise ConfigError(f"{path or cls.__name__}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{path or cls.__name__}: unknown keys {unknown}")
    kwargs = {}
    for key, value in data.items():
        sub = _dataclass_type(hints.get(key))
        if sub is not None and isinstance(value, dict):
            kwargs[key] = from_dict(sub, value, f"{path}.{key}" if path else key)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or cls.__name__}: {exc}") from exc


def merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path) -> TrainConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return from_dict(TrainConfig, data)


def save_config(path, cfg: TrainConfig) -> None:
    Path(path).write_text(json.dumps(to_dict(cfg), indent=2, sort_keys=True))


def desk_config(**overrides) -> TrainConfig:
    """Reduced settings that train a 96x96 synthetic scene in minutes on one core."""
    base = TrainConfig(
        iters_per_epoch=2, batch_rays=192, chunk_rays=96, n_coarse=32, n_fine=32,
        lr=2e-3, beta_lr_mult=10.0, eikonal_uniform=256, checkpoint_every=0,
        model=ModelConfig(sdf=SdfNetworkConfig(hidden=64, layers=3, frequencies=6),
                          color=ColorNetworkConfig(hidden=64, layers=2)),
    )
    return from_dict(TrainConfig, merge(to_dict(base), overrides))
