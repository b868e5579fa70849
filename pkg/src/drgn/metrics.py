"""Full-reference quality metrics and directory-level evaluation reports.

PSNR is computed jointly over RGB with peak 1.0. SSIM follows the standard
windowed formulation (11x11 Gaussian window, sigma 1.5, C1=0.01^2, C2=0.03^2
for unit dynamic range) on the channel-mean luminance, and is differentiable,
so the same code serves both evaluation and the structural term of the
stage-2 loss.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .data import list_images, load_image, num_workers
from .errors import EmptyDatasetError, PairingError, ShapeError

__all__ = ["psnr", "ssim_index", "MetricReport", "evaluate_dirs", "write_report"]

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def _to_bchw(x) -> tuple[torch.Tensor, bool]:
    """Accept HWC numpy arrays or (B)CHW tensors; return (B, C, H, W)."""
    if isinstance(x, np.ndarray):
        if x.ndim != 3:
            raise ShapeError(f"expected HxWxC array, got shape {tuple(x.shape)}")
        t = torch.from_numpy(np.ascontiguousarray(x.transpose(2, 0, 1))).double()
        return t.unsqueeze(0), True
    if isinstance(x, torch.Tensor):
        if x.dim() == 3:
            return x.unsqueeze(0), False
        if x.dim() == 4:
            return x, False
        raise ShapeError(f"expected CHW or BCHW tensor, got shape {tuple(x.shape)}")
    raise TypeError(f"unsupported image type {type(x)!r}")


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB for [0, 1] images; inf when identical."""
    ta, _ = _to_bchw(a)
    tb, _ = _to_bchw(b)
    if ta.shape != tb.shape:
        raise ShapeError(f"shape mismatch: {tuple(ta.shape)} vs {tuple(tb.shape)}")
    mse = float(((ta.detach().double() - tb.detach().double()) ** 2).mean())
    if mse == 0.0:
        return math.inf
    return -10.0 * math.log10(mse)


def _ssim_window(dtype, device) -> torch.Tensor:
    half = (SSIM_WINDOW - 1) / 2
    x = torch.arange(SSIM_WINDOW, dtype=torch.float64, device=device) - half
    g = torch.exp(-(x**2) / (2 * SSIM_SIGMA**2))
    k = torch.outer(g, g)
    return (k / k.sum()).to(dtype=dtype).view(1, 1, SSIM_WINDOW, SSIM_WINDOW)


def ssim_index(a, b):
    """Mean local SSIM.

    Returns a float for numpy inputs and a scalar tensor (with autograd) for
    tensor inputs.
    """
    ta, a_np = _to_bchw(a)
    tb, b_np = _to_bchw(b)
    if ta.shape != tb.shape:
        raise ShapeError(f"shape mismatch: {tuple(ta.shape)} vs {tuple(tb.shape)}")
    h, w = ta.shape[-2:]
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ShapeError(f"image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    gray_a = ta.mean(dim=1, keepdim=True)
    gray_b = tb.mean(dim=1, keepdim=True)
    window = _ssim_window(gray_a.dtype, gray_a.device)

    mu_a = F.conv2d(gray_a, window)
    mu_b = F.conv2d(gray_b, window)
    var_a = F.conv2d(gray_a * gray_a, window) - mu_a * mu_a
    var_b = F.conv2d(gray_b * gray_b, window) - mu_b * mu_b
    cov = F.conv2d(gray_a * gray_b, window) - mu_a * mu_b
    ssim_map = ((2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)) / (
        (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    )
    value = ssim_map.mean()
    if a_np and b_np:
        return float(value)
    return value


@dataclass
class MetricReport:
    per_image: list[dict]
    aggregate: dict
    meta: dict


def _mean(values: list[float]) -> float:
    return sum(values) / len(values)


def evaluate_dirs(pred_dir: str | Path, gt_dir: str | Path) -> MetricReport:
    """Score every prediction against its ground truth by matching filename."""
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    pred_names = list_images(pred_dir)
    gt_names = list_images(gt_dir)
    for orphan in sorted(set(pred_names) ^ set(gt_names)):
        raise PairingError(orphan)
    if not pred_names:
        raise EmptyDatasetError(f"no images under {pred_dir}")

    def score(name: str) -> dict:
        pred = load_image(pred_dir / name)
        gt = load_image(gt_dir / name)
        return {
            "id": Path(name).stem,
            "psnr": psnr(pred, gt),
            "ssim": ssim_index(pred, gt),
        }

    with ThreadPoolExecutor(max_workers=num_workers(len(pred_names))) as pool:
        per_image = list(pool.map(score, pred_names))
    aggregate = {
        "mean_psnr": _mean([e["psnr"] for e in per_image]),
        "mean_ssim": _mean([e["ssim"] for e in per_image]),
    }
    meta = {
        "pred_dir": str(pred_dir),
        "gt_dir": str(gt_dir),
        "timestamp": datetime.now(timezone.utc).isoformat(),
    }
    return MetricReport(per_image=per_image, aggregate=aggregate, meta=meta)


def _jsonable(v: float):
    return "inf" if math.isinf(v) else v


def write_report(report: MetricReport, json_path: str | Path, csv_path: str | Path | None = None) -> None:
    payload = {
        "per_image": [
            {"id": e["id"], "psnr": _jsonable(e["psnr"]), "ssim": e["ssim"]}
            for e in report.per_image
        ],
        "aggregate": {
            "mean_psnr": _jsonable(report.aggregate["mean_psnr"]),
            "mean_ssim": report.aggregate["mean_ssim"],
        },
        "meta": report.meta,
    }
    with open(json_path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id", "psnr", "ssim"])
            for e in report.per_image:
                writer.writerow([e["id"], _jsonable(e["psnr"]), e["ssim"]])
