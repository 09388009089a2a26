"""Training configuration and its plain-text key=value file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass


class ConfigError(Exception):
    pass


GRL_MODES = ("single-pass", "alternating")


@dataclass
class TrainConfig:
    alpha: float = 1.0              # weight on alignment + expert losses
    beta: float = 3.0               # weight on the auxiliary classifier loss
    m: float = 0.4                  # pruning quantile fraction; q = 100 * m
    learning_rate: float = 0.005
    momentum: float = 0.9
    weight_decay: float = 5e-4
    total_steps: int = 400
    batch_size_per_domain: int = 32
    seed: int = 0
    lr_decay_points: tuple = (0.7, 0.9)
    grl_mode: str = "single-pass"
    mask_enabled: bool = True
    mask_warmup_steps: int = 0      # ablation only; masking is on from step 0
    dropout_rate: float = 0.0       # channel-dropout baseline; 0 disables
    snapshot_every: int = 100
    conv_channels: int = 16
    feature_channels: int = 32
    approx_hidden: int = 64

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("alpha and beta must be nonnegative")
        if not 0 <= self.m < 1:
            raise ConfigError(f"m must be in [0, 1), got {self.m}")
        if not 0 <= self.dropout_rate < 1:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.grl_mode not in GRL_MODES:
            raise ConfigError(f"grl_mode must be one of {GRL_MODES}, got {self.grl_mode!r}")
        if self.total_steps < 0:
            raise ConfigError("total_steps must be nonnegative")
        pts = tuple(float(p) for p in self.lr_decay_points)
        if any(not 0 < p <= 1 for p in pts):
            raise ConfigError(f"decay points must lie in (0, 1], got {pts}")
        if any(b <= a for a, b in zip(pts, pts[1:])):
            raise ConfigError(f"decay points must be strictly increasing, got {pts}")
        object.__setattr__(self, "lr_decay_points", pts)

    @property
    def quantile(self) -> float:
        return 100.0 * self.m


def parse_field_value(field: dataclasses.Field, raw: str):
    raw = raw.strip()
    if field.type in ("int", int):
        return int(raw)
    if field.type in ("float", float):
        return float(raw)
    if field.type in ("bool", bool):
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{field.name}: cannot parse boolean from {raw!r}")
    if field.type in ("tuple", tuple):
        if not raw:
            return ()
        return tuple(float(v) for v in raw.split(","))
    return raw


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse `key = value` lines into typed TrainConfig field values."""
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, _, raw = stripped.partition("=")
        key = key.strip().replace("-", "_")
        if key not in fields:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        try:
            out[key] = parse_field_value(fields[key], raw)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    return out


def load_config(path, overrides: dict | None = None) -> TrainConfig:
    """Build a TrainConfig from a file plus explicit overrides."""
    try:
        with open(path) as fh:
            values = parse_config_text(fh.read(), source=str(path))
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    if overrides:
        values.update(overrides)
    try:
        return TrainConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
