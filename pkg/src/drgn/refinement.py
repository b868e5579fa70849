"""Stage 2: refine the base-enhanced image into the final prediction.

The refinement generator runs the shared backbone as a global residual over
its input and clamps to [0, 1]. Supervision combines a Charbonnier content
term with a (negatively weighted) SSIM term; with augmentation enabled both
the original and the synthesized pair contribute.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .config import RunConfig
from .data import crop_to_shape, from_tensor, pad_tensor_to_multiple, pad_to_multiple, to_tensor
from .degradation import base_enhance, predict_degradation
from .errors import ShapeError
from .metrics import ssim_index
from .mfn import Mfn

__all__ = ["refine", "charbonnier", "Stage2Losses", "stage2_loss", "enhance"]


def refine(base: torch.Tensor, re: Mfn) -> torch.Tensor:
    """Run the refinement generator; output matches the input shape exactly."""
    factor = 2 ** (re.levels - 1)
    padded, (h, w) = pad_tensor_to_multiple(base, factor)
    return re(padded)[..., :h, :w]


def charbonnier(a: torch.Tensor, b: torch.Tensor, eps: float) -> torch.Tensor:
    """Smooth L1 surrogate: mean of sqrt((a - b)^2 + eps^2)."""
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if eps <= 0:
        raise ValueError(f"eps must be > 0, got {eps}")
    return torch.sqrt((a - b) ** 2 + eps * eps).mean()


@dataclass
class Stage2Losses:
    con_img: torch.Tensor
    ssim_term: torch.Tensor
    total: torch.Tensor


def stage2_loss(
    pred: torch.Tensor,
    target: torch.Tensor,
    pred_ref: torch.Tensor | None,
    target_ref: torch.Tensor | None,
    cfg: RunConfig,
) -> Stage2Losses:
    """Content + structural objective over the original (and augmented) pairs.

    With ``ablation.dl_da`` off the reference-pair terms are omitted; with
    ``ablation.ssim`` off the structural term is dropped and the total equals
    the content term.
    """
    eps = cfg.epsilon_charb
    con = charbonnier(pred, target, eps)
    if cfg.ablation.dl_da:
        if pred_ref is None or target_ref is None:
            raise ValueError("augmented pair required when ablation.dl_da is enabled")
        con = con + charbonnier(pred_ref, target_ref, eps)
    if cfg.ablation.ssim:
        ssim = ssim_index(pred, target)
        if cfg.ablation.dl_da:
            ssim = ssim + ssim_index(pred_ref, target_ref)
        total = con + cfg.lambda_ssim * ssim
    else:
        ssim = torch.zeros((), dtype=con.dtype, device=con.device)
        total = con
    return Stage2Losses(con_img=con, ssim_term=ssim, total=total)


def enhance(lowlight: np.ndarray, deg: Mfn, re: Mfn, cfg: RunConfig) -> np.ndarray:
    """Full two-stage pipeline on one HWC image of arbitrary size."""
    factor = 2 ** (max(deg.levels, re.levels) - 1)
    padded, original = pad_to_multiple(lowlight, factor)
    with torch.no_grad():
        low_t = to_tensor(padded)
        deg_map = predict_degradation(low_t, deg)
        base = base_enhance(low_t, deg_map)
        out = refine(base, re)
    return crop_to_shape(from_tensor(out), original)
