"""Stage 1: degradation prediction, paired-data synthesis, adversarial losses.

The degradation generator maps a low-light image to a signed per-pixel map in
[-1, 1]. Subtracting the map gives the base enhancement; adding it to a clean
reference synthesizes a new low-light sample. Two binary classifiers keep the
synthetic low-light images and predicted maps distributionally close to the
real ones, together with a KL term over soft histograms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import SamplePair, SyntheticPair, from_tensor, pad_tensor_to_multiple, to_tensor
from .errors import DistributionError, EmptyDatasetError, EmptyReferenceError, ShapeError
from .mfn import Mfn, init_weights

__all__ = [
    "Discriminator",
    "Stage1Losses",
    "build_discriminator",
    "predict_degradation",
    "base_enhance",
    "compose_synthetic",
    "adv_loss_low",
    "adv_loss_de",
    "discriminator_loss",
    "generator_fool_loss",
    "soft_histogram",
    "kl_div",
    "stage1_loss",
    "augment_dataset",
]

LOG_FLOOR = 1e-12
HIST_BINS = 64
HIST_SMOOTHING = 1e-8


class Discriminator(nn.Module):
    """Strided conv stack -> 1x1 projection -> global average -> sigmoid.

    Returns one score per batch item, strictly inside (0, 1).
    """

    def __init__(self, widths: tuple[int, ...] = (32, 64, 128, 256)):
        super().__init__()
        layers: list[nn.Module] = []
        in_ch = 3
        for w in widths:
            layers.append(nn.Conv2d(in_ch, w, 3, stride=2, padding=1))
            layers.append(nn.LeakyReLU(0.2, inplace=True))
            in_ch = w
        self.features = nn.Sequential(*layers)
        self.head = nn.Conv2d(in_ch, 1, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected (B, 3, H, W) input, got {tuple(x.shape)}")
        logits = self.head(self.features(x)).mean(dim=(1, 2, 3))
        return torch.sigmoid(logits)


def build_discriminator(generator: torch.Generator | None = None) -> Discriminator:
    d = Discriminator()
    init_weights(d, generator)
    return d


def predict_degradation(lowlight: torch.Tensor, deg: Mfn) -> torch.Tensor:
    """Run the degradation generator; output matches the input shape exactly."""
    factor = 2 ** (deg.levels - 1)
    padded, (h, w) = pad_tensor_to_multiple(lowlight, factor)
    return deg(padded)[..., :h, :w]


def base_enhance(lowlight: torch.Tensor, degradation: torch.Tensor) -> torch.Tensor:
    """Subtract the predicted degradation and clamp back into image range."""
    if lowlight.shape != degradation.shape:
        raise ShapeError(
            f"image {tuple(lowlight.shape)} vs degradation {tuple(degradation.shape)}"
        )
    return torch.clamp(lowlight - degradation, 0.0, 1.0)


def compose_synthetic(reference: torch.Tensor, degradation: torch.Tensor) -> torch.Tensor:
    """Add a degradation map onto a clean reference, resizing it if needed."""
    if degradation.shape[-2:] != reference.shape[-2:]:
        degradation = F.interpolate(
            degradation, size=reference.shape[-2:], mode="bilinear", align_corners=False
        )
    return torch.clamp(reference + degradation, 0.0, 1.0)


def _adv(d_real: torch.Tensor, d_fake: torch.Tensor) -> torch.Tensor:
    real = torch.clamp(d_real, min=LOG_FLOOR)
    fake = torch.clamp(1.0 - d_fake, min=LOG_FLOOR)
    return (-torch.log(real) - torch.log(fake)).mean()


def adv_loss_low(lowlight: torch.Tensor, synthetic: torch.Tensor, d_low: Discriminator) -> torch.Tensor:
    """-log D(real low-light) - log(1 - D(synthetic low-light))."""
    return _adv(d_low(lowlight), d_low(synthetic))


def adv_loss_de(deg: torch.Tensor, deg_ref: torch.Tensor, d_de: Discriminator) -> torch.Tensor:
    """Same objective over degradation maps, rescaled from [-1, 1] to [0, 1]."""
    return _adv(d_de((deg + 1.0) / 2.0), d_de((deg_ref + 1.0) / 2.0))


def discriminator_loss(real: torch.Tensor, fake: torch.Tensor, d: Discriminator) -> torch.Tensor:
    """Classifier objective. Both branches are detached so gradients flow into
    the discriminator only, never back into a generator."""
    return _adv(d(real.detach()), d(fake.detach()))


def generator_fool_loss(d_fake: torch.Tensor) -> torch.Tensor:
    """Non-saturating generator term -log D(fake): drives the synthetic branch
    toward the score the discriminator assigns to real inputs."""
    return -torch.log(torch.clamp(d_fake, min=LOG_FLOOR)).mean()


def soft_histogram(x: torch.Tensor, bins: int = HIST_BINS) -> torch.Tensor:
    """Differentiable histogram over [0, 1] with triangular bin kernels.

    Each value contributes linearly to its two nearest bin centers; the result
    is smoothed and normalized to sum to 1, so every entry is positive.
    """
    flat = x.reshape(-1)
    centers = (torch.arange(bins, dtype=flat.dtype, device=flat.device) + 0.5) / bins
    weights = torch.relu(1.0 - (flat.unsqueeze(1) - centers).abs() * bins)
    counts = weights.sum(dim=0) + HIST_SMOOTHING
    return counts / counts.sum()


def kl_div(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """Forward KL divergence sum(p * ln(p / q)), natural log."""
    if p.shape != q.shape:
        raise DistributionError(f"p has {tuple(p.shape)} entries, q has {tuple(q.shape)}")
    for name, dist in (("p", p), ("q", q)):
        total = float(dist.detach().sum())
        if abs(total - 1.0) > 1e-6:
            raise DistributionError(f"{name} sums to {total}, expected 1")
        if float(dist.detach().min()) <= 0.0:
            raise DistributionError(f"{name} has non-positive entries")
    return (p * torch.log(p / q)).sum()


@dataclass
class Stage1Losses:
    adv_low: torch.Tensor
    adv_de: torch.Tensor
    kl: torch.Tensor
    total: torch.Tensor


def stage1_loss(
    lowlight: torch.Tensor,
    synthetic_lowlight: torch.Tensor,
    deg: torch.Tensor,
    deg_ref: torch.Tensor,
    d_low: Discriminator,
    d_de: Discriminator,
    alpha: float,
    include_kl: bool = True,
) -> Stage1Losses:
    """Generator objective: alpha * (both adversarial terms) + histogram KL."""
    a_low = adv_loss_low(lowlight, synthetic_lowlight, d_low)
    a_de = adv_loss_de(deg, deg_ref, d_de)
    if include_kl:
        kl = kl_div(soft_histogram((deg + 1.0) / 2.0), soft_histogram((deg_ref + 1.0) / 2.0))
    else:
        kl = torch.zeros((), dtype=a_low.dtype, device=a_low.device)
    total = alpha * (a_low + a_de) + kl
    return Stage1Losses(adv_low=a_low, adv_de=a_de, kl=kl, total=total)


def augment_dataset(
    pairs: list[SamplePair],
    refs: list[np.ndarray],
    deg: Mfn,
    seed: int,
) -> list[SyntheticPair]:
    """Synthesize one low-light counterpart for every reference image.

    For each reference, one low-light source is drawn uniformly (seeded per
    item, so the result is deterministic and order-independent), its predicted
    degradation is composed onto the reference, and the pair is emitted.
    """
    if not refs:
        raise EmptyReferenceError("reference set is empty")
    if not pairs:
        raise EmptyDatasetError("low-light dataset is empty")
    out: list[SyntheticPair] = []
    with torch.no_grad():
        for i, ref in enumerate(refs):
            rng = np.random.default_rng([seed, i])
            src = pairs[int(rng.integers(len(pairs)))]
            low_t = to_tensor(src.lowlight)
            ref_t = to_tensor(ref)
            deg_map = predict_degradation(low_t, deg)
            synth = compose_synthetic(ref_t, deg_map)
            out.append(
                SyntheticPair(
                    reference=ref,
                    synthetic_lowlight=from_tensor(synth),
                    source_degradation_id=src.id,
                )
            )
    return out
