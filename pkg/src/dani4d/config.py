"""Flat key-value run configuration.

Values resolve in order: defaults, YAML file, ``DANI4D_<KEY>`` environment
variables, then explicit overrides (``key=value`` strings from the CLI).
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, Mapping

import yaml

from .dataio import ConfigurationError

ENV_PREFIX = "DANI4D_"


@dataclass
class RunConfig:
    seed: int = 0
    # phantom cohort
    n_subjects: int = 60
    visits_per_subject: int = 4
    visit_interval: float = 1.0
    age_lo: float = 60.0
    age_hi: float = 85.0
    image_side: int = 32
    noise_std: float = 0.02
    gender_effect: float = 0.05
    subject_jitter: float = 0.15
    # preprocessing and splits
    n_slices: int = 9
    split_train: float = 0.72
    split_val: float = 0.14
    split_test: float = 0.14
    min_followup: float = 2.0
    # regions and age bins
    region_radii: str = "1,2"
    n_bins: int = 5
    c_sigma: float = 1.0
    # slice models
    epochs: int = 50
    batch_size: int = 16
    latent_dim: int = 200
    channels: int = 16
    lr: float = 2e-4
    rec_form: str = "weighted"
    vox_form: str = "literal"
    reg_form: str = "squared"
    # profile weight functions
    rho: float = 0.99
    v: float = 10.0
    b_reg: float = 1.25
    b_vox: float = 1.25
    b_b: float = 0.002
    b_z: float = 0.05
    b_rec: float = 100.0
    u_reg: int = 1
    u_vox: int = 1
    u_b: int = 1
    u_z: int = 1
    u_rec: int = -1
    search_budget: int = 4
    search_epochs: int = 15
    # temporal consistency: profile weights + common init + cross-slice smoothing
    temporal_consistency: bool = True
    init_iterations: int = 10
    smooth_sigma: float = 1.5
    smooth_window: int = 2
    # super-resolution
    sr_enabled: bool = True
    sr_depth: int = 4
    sr_growth: int = 8
    sr_patch: int = 16
    sr_epochs: int = 100
    sr_lr: float = 1e-3
    sr_batch: int = 8
    # personalization
    tl_enabled: bool = True
    tl_iterations: int = 50
    tl_rec_only: bool = True
    # evaluation
    volume_mode: str = "weighted"

    def validate(self) -> None:
        if self.n_bins < 2:
            raise ConfigurationError("n_bins: need at least 2 age bins")
        if self.epochs < 0 or self.sr_epochs < 0 or self.tl_iterations < 0 or self.init_iterations < 0:
            raise ConfigurationError("epochs/iterations must be non-negative")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.volume_mode not in ("binary", "weighted"):
            raise ConfigurationError("volume_mode must be 'binary' or 'weighted'")
        self.radii()

    def radii(self) -> tuple[int, ...]:
        try:
            return tuple(int(r) for r in str(self.region_radii).split(",") if r.strip())
        except ValueError as e:
            raise ConfigurationError(f"region_radii: expected comma-separated integers, got {self.region_radii!r}") from e

    def pwf_dict(self) -> dict:
        keys = ["rho", "v"] + [f"{p}_{n}" for p in ("b", "u") for n in ("reg", "vox", "b", "z", "rec")]
        return {k: getattr(self, k) for k in keys}

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(key: str, value):
    if key not in _FIELDS:
        raise ConfigurationError(f"unknown config key {key!r}")
    default = getattr(RunConfig(), key)
    kind = type(default)
    try:
        if kind is bool:
            if isinstance(value, str):
                low = value.strip().lower()
                if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                    raise ValueError(value)
                return low in ("1", "true", "yes", "on")
            return bool(value)
        if kind is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if kind is float:
            return float(value)
        if kind is str and isinstance(value, (list, tuple)):
            return ",".join(str(v) for v in value)
        return kind(value)
    except (TypeError, ValueError) as e:
        raise ConfigurationError(f"config key {key!r}: cannot read {value!r} as {kind.__name__}") from e


def parse_overrides(items: Iterable[str]) -> dict:
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = yaml.safe_load(v) if v.strip() else v
    return out


def load_config(path: str | Path | None = None, overrides: Mapping | None = None,
                env: Mapping[str, str] | None = None) -> RunConfig:
    values: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigurationError(f"config file not found: {p}")
        data = yaml.safe_load(p.read_text()) or {}
        if not isinstance(data, dict):
            raise ConfigurationError(f"{p}: expected a flat key-value mapping")
        values.update(data)
    env = os.environ if env is None else env
    for k, v in env.items():
        if k.startswith(ENV_PREFIX):
            values[k[len(ENV_PREFIX):].lower()] = yaml.safe_load(v) if v.strip() else v
    values.update(overrides or {})
    cfg = RunConfig(**{k: _coerce(k, v) for k, v in values.items()})
    cfg.validate()
    return cfg


def dump_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
