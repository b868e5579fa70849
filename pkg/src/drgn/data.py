"""Image I/O, paired dataset ingestion, and shape plumbing.

Images are stored channels-last as float32 arrays in [0, 1] (8-bit values
divided by 255). Networks consume NCHW torch tensors; :func:`to_tensor` /
:func:`from_tensor` convert between the two layouts.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import DecodeError, PairingError, ShapeError

__all__ = [
    "SamplePair",
    "SyntheticPair",
    "list_images",
    "load_image",
    "save_image",
    "to_tensor",
    "from_tensor",
    "load_dataset",
    "load_references",
    "reference_ids",
    "pad_to_multiple",
    "pad_tensor_to_multiple",
    "crop_to_shape",
    "num_workers",
]

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp")


@dataclass(frozen=True)
class SamplePair:
    """One (low-light, normal-light) training pair."""

    lowlight: np.ndarray
    normal: np.ndarray
    id: str


@dataclass(frozen=True)
class SyntheticPair:
    """A reference image and its synthesized low-light counterpart."""

    reference: np.ndarray
    synthetic_lowlight: np.ndarray
    source_degradation_id: str


def num_workers(n_items: int) -> int:
    """Data-pipeline parallelism, capped by the DRGN_NUM_WORKERS env var."""
    cap = os.environ.get("DRGN_NUM_WORKERS")
    limit = int(cap) if cap else 4
    return max(1, min(limit, n_items))


def load_image(path: str | Path) -> np.ndarray:
    """Decode an 8-bit image file to float32 HWC in [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (OSError, ValueError) as e:
        raise DecodeError(f"cannot decode image {path}: {e}")
    return arr.astype(np.float32) / 255.0


def save_image(img: np.ndarray, path: str | Path) -> None:
    """Write a [0, 1] HWC float image as 8-bit PNG (round-half-even)."""
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"expected HxWx3 image, got shape {tuple(img.shape)}")
    quantized = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(quantized, mode="RGB").save(path)


def to_tensor(img: np.ndarray) -> torch.Tensor:
    """HWC float array -> (1, C, H, W) float32 tensor."""
    if img.ndim != 3:
        raise ShapeError(f"expected HxWxC array, got shape {tuple(img.shape)}")
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1))).float().unsqueeze(0)


def from_tensor(t: torch.Tensor) -> np.ndarray:
    """(1, C, H, W) or (C, H, W) tensor -> HWC float32 array."""
    if t.dim() == 4:
        if t.shape[0] != 1:
            raise ShapeError(f"expected batch of 1, got {t.shape[0]}")
        t = t[0]
    if t.dim() != 3:
        raise ShapeError(f"expected CHW tensor, got shape {tuple(t.shape)}")
    return t.detach().cpu().float().numpy().transpose(1, 2, 0)


def list_images(directory: str | Path) -> list[str]:
    """Image filenames in a directory, lexicographically sorted."""
    names = [
        f for f in os.listdir(directory) if f.lower().endswith(IMAGE_EXTENSIONS)
    ]
    return sorted(names)


def load_dataset(dir_lowlight: str | Path, dir_normal: str | Path) -> list[SamplePair]:
    """Load matching low/normal image pairs, lexicographically ordered by name.

    Raises:
        PairingError: a filename present in one directory but not the other.
        DecodeError: an image file that cannot be decoded.
        ShapeError: a pair whose two images have different shapes.
    """
    dir_lowlight, dir_normal = Path(dir_lowlight), Path(dir_normal)
    low_names = list_images(dir_lowlight)
    high_names = list_images(dir_normal)
    for orphan in sorted(set(low_names) ^ set(high_names)):
        raise PairingError(orphan)

    def decode(name: str) -> SamplePair:
        low = load_image(dir_lowlight / name)
        high = load_image(dir_normal / name)
        if low.shape != high.shape:
            raise ShapeError(
                f"pair {name!r}: low {low.shape} vs normal {high.shape}"
            )
        return SamplePair(lowlight=low, normal=high, id=Path(name).stem)

    if not low_names:
        return []
    with ThreadPoolExecutor(max_workers=num_workers(len(low_names))) as pool:
        return list(pool.map(decode, low_names))


def load_references(directory: str | Path) -> list[np.ndarray]:
    """Load all images in a flat directory, sorted by filename."""
    directory = Path(directory)
    names = list_images(directory)
    if not names:
        return []
    with ThreadPoolExecutor(max_workers=num_workers(len(names))) as pool:
        return list(pool.map(lambda n: load_image(directory / n), names))


def reference_ids(directory: str | Path) -> list[str]:
    """Stems of the reference images, in the same order as load_references."""
    return [Path(n).stem for n in list_images(Path(directory))]


def pad_to_multiple(img: np.ndarray, m: int) -> tuple[np.ndarray, tuple[int, int]]:
    """Reflection-pad H and W up to the next multiple of ``m``.

    Returns the padded image and the original (H, W) for :func:`crop_to_shape`.
    """
    if m < 1:
        raise ShapeError(f"multiple must be >= 1, got {m}")
    h, w = img.shape[:2]
    pad_h = (-h) % m
    pad_w = (-w) % m
    if pad_h == 0 and pad_w == 0:
        return img, (h, w)
    widths = [(0, pad_h), (0, pad_w)] + [(0, 0)] * (img.ndim - 2)
    return np.pad(img, widths, mode="reflect"), (h, w)


def crop_to_shape(img: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Undo :func:`pad_to_multiple`."""
    h, w = shape
    return img[:h, :w]


def pad_tensor_to_multiple(x: torch.Tensor, m: int) -> tuple[torch.Tensor, tuple[int, int]]:
    """Reflection-pad a (B, C, H, W) tensor up to the next multiple of ``m``."""
    h, w = x.shape[-2:]
    pad_h = (-h) % m
    pad_w = (-w) % m
    if pad_h == 0 and pad_w == 0:
        return x, (h, w)
    if pad_h >= h or pad_w >= w:
        raise ShapeError(f"input {h}x{w} too small to pad to a multiple of {m}")
    return torch.nn.functional.pad(x, (0, pad_w, 0, pad_h), mode="reflect"), (h, w)
