"""Run configuration: defaults < JSON config file < command-line flags."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .errors import ConfigError


def _f(default, help: str, **kw):
    return field(default=default, metadata={"help": help, **kw})


@dataclass
class RunConfig:
    seed: int = _f(0, "global random seed")
    d_z: int = _f(32, "token feature dimension (must match the dataset)")
    d_p: int = _f(1024, "projection head output dimension")
    d_h: int = _f(64, "hidden width of the projection head, discriminator and classifier MLPs")
    C: int = _f(4, "number of emotion classes")
    M: int = _f(4, "batch size")
    lr: float = _f(1e-5, "AdamW learning rate")
    weight_decay: float = _f(0.01, "AdamW decoupled weight decay")
    alpha: float = _f(0.2, "weight of the MSE term inside the augmentation loss")
    beta: float = _f(0.2, "weight of the contrastive MI loss")
    gamma: float = _f(1.0, "weight of the emotion classification loss")
    delta: float = _f(0.2, "weight of the emotion discrimination loss (0 disables the discriminator)")
    tau: float = _f(0.1, "contrastive temperature")
    fe_layers: int = _f(1, "fusion encoder depth")
    fe_heads: int = _f(8, "fusion encoder attention heads")
    pos_emb: bool = _f(False, "add learned absolute positional embeddings in the fusion encoder")
    fuse_input: str = _f("augmented", "sequences fed to the fusion encoder", choices=("augmented", "original"))
    ae_init_scale: float = _f(1e-3, "std of the residual autoencoder weights at init")
    steps: int = _f(1000, "number of optimizer steps")
    epochs: int | None = _f(None, "if set, overrides steps with epochs * batches-per-epoch")
    drop_last: bool = _f(False, "drop the incomplete final batch of each epoch")
    train_data: str | None = _f(None, "training fixture (JSONL)")
    val_data: str | None = _f(None, "validation fixture (JSONL)")
    out: str = _f("runs/emofuse", "output directory")

    def validate(self) -> "RunConfig":
        for name in ("lr", "weight_decay", "alpha", "beta", "gamma", "delta", "tau", "ae_init_scale"):
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or isinstance(v, bool) or not math.isfinite(v):
                raise ConfigError(f"{name} must be a finite number, got {v!r}")
        if self.tau <= 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.ae_init_scale < 0 or self.weight_decay < 0:
            raise ConfigError("ae_init_scale and weight_decay must be >= 0")
        for name in ("d_z", "d_p", "d_h", "M", "fe_layers", "fe_heads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.C < 2:
            raise ConfigError(f"C must be >= 2, got {self.C}")
        if self.d_z % self.fe_heads:
            raise ConfigError(f"d_z={self.d_z} is not divisible by fe_heads={self.fe_heads}")
        if self.fuse_input not in ("augmented", "original"):
            raise ConfigError(f"fuse_input must be 'augmented' or 'original', got {self.fuse_input!r}")
        if self.steps < 0 or (self.epochs is not None and self.epochs < 0):
            raise ConfigError("steps and epochs must be >= 0")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        return self

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def replace(self, **overrides) -> "RunConfig":
        return merge(self, overrides)


def config_fields():
    return fields(RunConfig)


def _coerce(name: str, value, current):
    ftype = {f.name: f.type for f in fields(RunConfig)}[name]
    if value is None:
        if "None" in str(ftype):
            return None
        raise ConfigError(f"{name} may not be null")
    if "bool" in str(ftype):
        if not isinstance(value, bool):
            raise ConfigError(f"{name} must be a boolean, got {value!r}")
        return value
    if "int" in str(ftype):
        if isinstance(value, bool) or not (isinstance(value, int) or (isinstance(value, float) and value.is_integer())):
            raise ConfigError(f"{name} must be an integer, got {value!r}")
        return int(value)
    if "float" in str(ftype):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name} must be a number, got {value!r}")
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(f"{name} must be a string, got {value!r}")
    return value


def merge(cfg: RunConfig, overrides: dict[str, Any]) -> RunConfig:
    known = {f.name for f in fields(RunConfig)}
    data = cfg.to_dict()
    for k, v in overrides.items():
        if k not in known:
            raise ConfigError(f"unknown config key {k!r}")
        data[k] = _coerce(k, v, data[k])
    return RunConfig(**data)


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None,
                base: RunConfig | None = None) -> RunConfig:
    """``base`` (or the defaults), then the flat JSON file at ``path``, then ``overrides``."""
    cfg = base if base is not None else RunConfig()
    if path is not None:
        p = Path(path)
        try:
            raw = json.loads(p.read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ConfigError(f"{p}: config file not found") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON ({exc.msg})") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{p}: config must be a flat JSON object")
        cfg = merge(cfg, raw)
    if overrides:
        cfg = merge(cfg, overrides)
    return cfg.validate()
