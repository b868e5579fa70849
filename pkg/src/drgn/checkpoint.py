"""Checkpoint persistence.

A checkpoint is an ``.npz`` container of named float arrays (network weights
and optimizer moments, one entry per parameter) plus a ``__meta__`` entry
holding a JSON header: stage, step, config digest, and the full serialized
config for inspection. Arrays round-trip bit-exactly.
"""

from __future__ import annotations

import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig, architecture_digest, config_digest, config_from_dict, config_to_dict
from .errors import ConfigMismatchError, FormatError

__all__ = ["Checkpoint", "save_checkpoint", "load_checkpoint"]

_FORMAT = "drgn-checkpoint"
_VERSION = 1

ParamDict = dict[str, np.ndarray]


@dataclass
class Checkpoint:
    stage: int
    config: RunConfig
    step: int = 0
    deg_params: ParamDict | None = None
    re_params: ParamDict | None = None
    disc_low: ParamDict | None = None
    disc_de: ParamDict | None = None
    optimizer_state: ParamDict = field(default_factory=dict)

    @property
    def config_digest(self) -> str:
        return config_digest(self.config)


_GROUPS = ("deg", "re", "disc_low", "disc_de", "opt")


def save_checkpoint(ck: Checkpoint, path: str | Path) -> None:
    if ck.stage == 2 and (ck.deg_params is None or ck.re_params is None):
        raise FormatError("stage-2 checkpoints must contain deg and re parameters")
    arrays: dict[str, np.ndarray] = {}
    groups = {
        "deg": ck.deg_params,
        "re": ck.re_params,
        "disc_low": ck.disc_low,
        "disc_de": ck.disc_de,
        "opt": ck.optimizer_state or None,
    }
    for group, params in groups.items():
        if params is None:
            continue
        for name, arr in params.items():
            arrays[f"{group}/{name}"] = np.asarray(arr)
    meta = {
        "format": _FORMAT,
        "version": _VERSION,
        "stage": ck.stage,
        "step": ck.step,
        "config_digest": config_digest(ck.config),
        "architecture_digest": architecture_digest(ck.config),
        "config": config_to_dict(ck.config),
        "groups": sorted(g for g, p in groups.items() if p is not None),
    }
    arrays["__meta__"] = np.frombuffer(
        json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8
    )
    _write_npz(path, arrays)


def _write_npz(path: str | Path, arrays: dict[str, np.ndarray]) -> None:
    """np.savez-compatible container with fixed zip metadata, so identical
    checkpoints are byte-identical across runs."""
    import io

    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asanyarray(arrays[name]))
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, buf.getvalue())


def load_checkpoint(path: str | Path, expected_config: RunConfig | None = None) -> Checkpoint:
    """Read a checkpoint; verify its digest against ``expected_config`` if given."""
    try:
        with np.load(path) as npz:
            if "__meta__" not in npz.files:
                raise FormatError(f"{path}: missing checkpoint header")
            try:
                meta = json.loads(bytes(npz["__meta__"]).decode())
            except (json.JSONDecodeError, UnicodeDecodeError) as e:
                raise FormatError(f"{path}: bad checkpoint header: {e}")
            if meta.get("format") != _FORMAT:
                raise FormatError(f"{path}: not a checkpoint file")
            arrays = {name: npz[name] for name in npz.files if name != "__meta__"}
    except FormatError:
        raise
    except (OSError, ValueError, zipfile.BadZipFile, KeyError) as e:
        raise FormatError(f"{path}: cannot read checkpoint: {e}")

    cfg = config_from_dict(meta["config"])
    if config_digest(cfg) != meta["config_digest"]:
        raise FormatError(f"{path}: stored config does not match its digest")
    if expected_config is not None and config_digest(expected_config) != meta["config_digest"]:
        raise ConfigMismatchError(
            f"{path}: checkpoint config digest {meta['config_digest'][:12]} does not "
            f"match supplied config {config_digest(expected_config)[:12]}"
        )

    grouped: dict[str, ParamDict] = {g: {} for g in _GROUPS}
    for name, arr in arrays.items():
        group, _, param = name.partition("/")
        if group not in grouped or not param:
            raise FormatError(f"{path}: unexpected entry {name!r}")
        grouped[group][param] = arr
    return Checkpoint(
        stage=int(meta["stage"]),
        config=cfg,
        step=int(meta["step"]),
        deg_params=grouped["deg"] or None,
        re_params=grouped["re"] or None,
        disc_low=grouped["disc_low"] or None,
        disc_de=grouped["disc_de"] or None,
        optimizer_state=grouped["opt"],
    )
