"""Run configuration: a flat key=value file with typed defaults.

Every field has a default; unknown keys are rejected. `--set key=value`
overrides parse the same way.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path
from typing import Tuple

from .model import ConfigError

__all__ = ["RunConfig", "load_config", "apply_overrides", "parse_value"]


@dataclass
class RunConfig:
    # model
    model: str = "twin"  # rgb | flow | twin
    blocks: str = "none"  # none | residual | attention
    n_blocks: int = 0
    fc_width: int = 500
    filters: str = "30,60,80"
    # data
    n_classes: int = 6
    per_class: int = 40
    frames: int = 16
    height: int = 32
    width: int = 32
    jitter: int = 1
    split: str = "0.7,0.15,0.15"
    data_dir: str = "data/desk6"
    # training
    epochs: int = 50
    batch_size: int = 5
    lr: float = 0.01
    momentum: float = 0.9
    patience: int = 50
    lr_floor: float = 1e-5
    recent_window: int = 25
    previous_window: int = 35
    drop_factor: float = 0.7
    stop_at_val_acc: float = 0.0  # 0 disables early stop
    clip_grad_norm: float = 5.0  # global gradient norm bound; 0 disables
    # augmentation
    augment: bool = True
    rotation_deg: float = 10.0
    scale_min: float = 0.9
    scale_max: float = 1.1
    translate_frac: float = 0.05
    # input pipeline: rgb is shifted then scaled, flow only scaled
    rgb_center: float = 0.5
    rgb_scale: float = 2.0
    flow_scale: float = 0.125
    # bookkeeping
    seed: int = 0
    out_dir: str = "runs/run0"
    # compare subcommand
    threshold: float = 0.85
    compare_seeds: int = 3
    compare_modes: str = "attention,none"

    def split_ratios(self) -> Tuple[float, float, float]:
        parts = self.split.split(",")
        if len(parts) != 3:
            raise ConfigError(f"split must be three comma-separated ratios, got {self.split!r}")
        try:
            return tuple(float(p) for p in parts)
        except ValueError:
            raise ConfigError(f"unparseable split ratios {self.split!r}") from None

    def filter_schedule(self) -> Tuple[int, int, int]:
        try:
            parts = tuple(int(p) for p in self.filters.split(","))
        except ValueError:
            raise ConfigError(f"unparseable filter schedule {self.filters!r}") from None
        if len(parts) != 3:
            raise ConfigError(f"filters must list three widths, got {self.filters!r}")
        return parts


_FIELDS = {f.name: f.type for f in fields(RunConfig)}


def parse_value(key: str, raw: str):
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    ftype = _FIELDS[key]
    raw = raw.strip()
    try:
        if ftype == "bool" or ftype is bool:
            lowered = raw.lower()
            if lowered in ("true", "1", "yes", "on"):
                return True
            if lowered in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if ftype == "int" or ftype is int:
            return int(raw)
        if ftype == "float" or ftype is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"cannot parse {key}={raw!r}") from None


def load_config(path=None) -> RunConfig:
    cfg = RunConfig()
    if path is None:
        return cfg
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    for lineno, line in enumerate(p.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{p}:{lineno}: expected key=value, got {line!r}")
        key, raw = line.split("=", 1)
        setattr(cfg, key.strip(), parse_value(key.strip(), raw))
    return cfg


def apply_overrides(cfg: RunConfig, pairs) -> RunConfig:
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        setattr(cfg, key.strip(), parse_value(key.strip(), raw))
    return cfg
