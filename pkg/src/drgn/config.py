"""Run configuration: hyperparameters, ablation flags, file round-trip, overrides.

The on-disk format is YAML with three sections (``model``, ``training``,
``ablation``) whose leaf keys mirror the :class:`RunConfig` fields one to one.
Unknown keys are rejected, both in files and in ``--set section.key=value``
overrides.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError

__all__ = [
    "AblationFlags",
    "RunConfig",
    "config_to_dict",
    "config_from_dict",
    "load_config",
    "save_config",
    "apply_overrides",
    "config_digest",
    "architecture_digest",
]


@dataclass(frozen=True)
class AblationFlags:
    """Component toggles for ablation runs; all on by default."""

    dl_da: bool = True
    msr: bool = True
    kl: bool = True
    ssim: bool = True


@dataclass(frozen=True)
class RunConfig:
    # model
    pyramid_levels: int = 3
    rcabs_per_branch: tuple[int, ...] = (2, 3, 4)
    rcab_depth: tuple[int, ...] = (3, 3, 3)
    base_channels: int = 64
    # training
    patch_size: int = 96
    batch_size: int = 16
    lr0: float = 5e-4
    lr_decay: float = 0.9
    lr_decay_steps: int = 6000
    epochs_stage1: int = 20
    epochs_stage2: int = 40
    alpha: float = 1e-5
    lambda_ssim: float = -0.2
    epsilon_charb: float = 1e-3
    seed: int = 0
    ablation: AblationFlags = field(default_factory=AblationFlags)

    def __post_init__(self) -> None:
        n = self.pyramid_levels
        if n < 1:
            raise ConfigError(f"pyramid_levels must be >= 1, got {n}")
        if len(self.rcabs_per_branch) != n or len(self.rcab_depth) != n:
            raise ConfigError(
                "rcabs_per_branch and rcab_depth must have exactly "
                f"pyramid_levels={n} entries, got {len(self.rcabs_per_branch)} "
                f"and {len(self.rcab_depth)}"
            )
        if self.patch_size % (2 ** (n - 1)) != 0:
            raise ConfigError(
                f"patch_size={self.patch_size} not divisible by 2^(n-1)={2 ** (n - 1)}"
            )
        if self.alpha <= 0:
            raise ConfigError(f"alpha must be > 0, got {self.alpha}")
        if self.epsilon_charb <= 0:
            raise ConfigError(f"epsilon_charb must be > 0, got {self.epsilon_charb}")

    @staticmethod
    def desk_scale(**overrides: Any) -> "RunConfig":
        """Small profile that trains in minutes on one CPU core."""
        base = dict(base_channels=16, batch_size=2, epochs_stage1=2, epochs_stage2=4)
        base.update(overrides)
        return RunConfig(**base)


_MODEL_FIELDS = ("pyramid_levels", "rcabs_per_branch", "rcab_depth", "base_channels")
_TRAINING_FIELDS = (
    "patch_size",
    "batch_size",
    "lr0",
    "lr_decay",
    "lr_decay_steps",
    "epochs_stage1",
    "epochs_stage2",
    "alpha",
    "lambda_ssim",
    "epsilon_charb",
    "seed",
)
_ABLATION_FIELDS = ("dl_da", "msr", "kl", "ssim")


def config_to_dict(cfg: RunConfig) -> dict:
    return {
        "model": {k: _plain(getattr(cfg, k)) for k in _MODEL_FIELDS},
        "training": {k: _plain(getattr(cfg, k)) for k in _TRAINING_FIELDS},
        "ablation": {k: getattr(cfg.ablation, k) for k in _ABLATION_FIELDS},
    }


def _plain(v: Any) -> Any:
    return list(v) if isinstance(v, tuple) else v


def _field_type(section: str, key: str):
    cls = AblationFlags if section == "ablation" else RunConfig
    for f in dataclasses.fields(cls):
        if f.name == key:
            return f.type
    raise ConfigError(f"unknown config key: {section}.{key}")


_SECTION_KEYS = {
    "model": _MODEL_FIELDS,
    "training": _TRAINING_FIELDS,
    "ablation": _ABLATION_FIELDS,
}


def config_from_dict(d: dict) -> RunConfig:
    if not isinstance(d, dict):
        raise ConfigError("config root must be a mapping")
    for section in d:
        if section not in _SECTION_KEYS:
            raise ConfigError(f"unknown config section: {section}")
        if not isinstance(d[section], dict):
            raise ConfigError(f"config section {section!r} must be a mapping")
        for key in d[section]:
            if key not in _SECTION_KEYS[section]:
                raise ConfigError(f"unknown config key: {section}.{key}")

    kwargs: dict[str, Any] = {}
    for section in ("model", "training"):
        for key, value in d.get(section, {}).items():
            kwargs[key] = _coerce(section, key, value)
    ab = {k: _coerce("ablation", k, v) for k, v in d.get("ablation", {}).items()}
    kwargs["ablation"] = AblationFlags(**ab)
    return RunConfig(**kwargs)


def _coerce(section: str, key: str, value: Any) -> Any:
    """Coerce a YAML/override value to the declared field type."""
    ftype = str(_field_type(section, key))
    if "tuple" in ftype:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{section}.{key} expects a list, got {value!r}")
        try:
            return tuple(int(v) for v in value)
        except (TypeError, ValueError):
            raise ConfigError(f"{section}.{key} expects integers, got {value!r}")
    if ftype == "bool":
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{section}.{key} expects a boolean, got {value!r}")
    if ftype == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{section}.{key} expects an integer, got {value!r}")
        return value
    if ftype == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{section}.{key} expects a number, got {value!r}")
        return float(value)
    raise ConfigError(f"unsupported field type for {section}.{key}")


def load_config(path: str | Path) -> RunConfig:
    try:
        with open(path, "r") as fh:
            data = yaml.safe_load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except yaml.YAMLError as e:
        raise ConfigError(f"config file {path} is not valid YAML: {e}")
    return config_from_dict(data or {})


def save_config(cfg: RunConfig, path: str | Path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(config_to_dict(cfg), fh, sort_keys=True)


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``section.key=value`` strings on top of an existing config."""
    d = config_to_dict(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        dotted, raw = item.split("=", 1)
        parts = dotted.split(".")
        if len(parts) != 2:
            raise ConfigError(f"override key {dotted!r} must be section.key")
        section, key = parts
        if section not in _SECTION_KEYS or key not in _SECTION_KEYS[section]:
            raise ConfigError(f"unknown config key: {dotted}")
        d[section][key] = _parse_override_value(section, key, raw)
    return config_from_dict(d)


def _parse_override_value(section: str, key: str, raw: str) -> Any:
    ftype = str(_field_type(section, key))
    raw = raw.strip()
    if ftype == "bool":
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"{section}.{key} expects a boolean, got {raw!r}")
    if "tuple" in ftype:
        try:
            parsed = json.loads(raw) if raw.startswith("[") else [int(x) for x in raw.split(",")]
        except (json.JSONDecodeError, ValueError):
            raise ConfigError(f"{section}.{key} expects a list, got {raw!r}")
        return parsed
    if ftype == "int":
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{section}.{key} expects an integer, got {raw!r}")
    if ftype == "float":
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{section}.{key} expects a number, got {raw!r}")
    raise ConfigError(f"unsupported field type for {section}.{key}")


def config_digest(cfg: RunConfig) -> str:
    """SHA-256 over the canonical JSON form of the full config."""
    blob = json.dumps(config_to_dict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def architecture_digest(cfg: RunConfig) -> str:
    """Digest over the fields that fix network shapes.

    Two configs with equal architecture digests produce parameter sets that can
    be loaded into each other's networks.
    """
    d = config_to_dict(cfg)
    arch = dict(d["model"])
    arch["msr"] = d["ablation"]["msr"]
    blob = json.dumps(arch, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()
