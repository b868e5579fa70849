"""Multi-resolution fusion network.

A pyramid of branches processes the input at halved resolutions. Each branch
extracts initial features, receives strided-down features from all finer
branches (cross-scale fusion), runs a residual group of channel-attention
blocks, and the branch outputs are deconvolved back to full resolution, fused,
and projected to image space. Two instances of the same backbone act as the
degradation generator (direct output, tanh head) and the refinement generator
(global residual, clamped to [0, 1]).
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import RunConfig
from .errors import ShapeError

__all__ = [
    "gaussian_kernel",
    "gaussian_downsample",
    "build_pyramid",
    "ChannelAttention",
    "Rcab",
    "ResidualGroup",
    "CrossScaleFuse",
    "UpsampleFuse",
    "Mfn",
    "init_weights",
    "build_generator",
    "count_parameters",
    "single_scale_rcab_count",
]

GAUSS_SIZE = 5
GAUSS_SIGMA = 1.0


def gaussian_kernel(size: int = GAUSS_SIZE, sigma: float = GAUSS_SIGMA) -> torch.Tensor:
    """Normalized 2-D Gaussian, sum exactly 1."""
    half = (size - 1) / 2
    x = torch.arange(size, dtype=torch.float64) - half
    g = torch.exp(-(x**2) / (2 * sigma**2))
    k = torch.outer(g, g)
    return (k / k.sum()).float()


def gaussian_downsample(x: torch.Tensor) -> torch.Tensor:
    """Low-pass filter (5x5 Gaussian, reflection boundary) then drop every
    second row/column. Input (B, C, H, W) with H, W even."""
    if x.dim() != 4:
        raise ShapeError(f"expected BCHW input, got shape {tuple(x.shape)}")
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ShapeError(f"H and W must be even, got {h}x{w}; pad first")
    pad = GAUSS_SIZE // 2
    if h <= pad or w <= pad:
        raise ShapeError(f"input {h}x{w} too small for a {GAUSS_SIZE}x{GAUSS_SIZE} filter")
    kernel = gaussian_kernel().to(dtype=x.dtype, device=x.device)
    kernel = kernel.expand(x.shape[1], 1, GAUSS_SIZE, GAUSS_SIZE)
    padded = F.pad(x, (pad, pad, pad, pad), mode="reflect")
    return F.conv2d(padded, kernel, stride=2, groups=x.shape[1])


def build_pyramid(x: torch.Tensor, n: int) -> list[torch.Tensor]:
    """Level 1 is the input; each further level halves H and W."""
    if n < 1:
        raise ShapeError(f"pyramid needs at least one level, got n={n}")
    h, w = x.shape[-2:]
    factor = 2 ** (n - 1)
    if h % factor or w % factor:
        raise ShapeError(f"{h}x{w} not divisible by 2^(n-1)={factor}")
    levels = [x]
    for _ in range(n - 1):
        levels.append(gaussian_downsample(levels[-1]))
    return levels


class ChannelAttention(nn.Module):
    """Global-average-pool bottleneck gate, one multiplier per channel."""

    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        squeezed = max(channels // reduction, 1)
        self.body = nn.Sequential(
            nn.Conv2d(channels, squeezed, 1),
            nn.ReLU(inplace=True),
            nn.Conv2d(squeezed, channels, 1),
            nn.Sigmoid(),
        )

    def forward(self, x):
        gate = self.body(x.mean(dim=(2, 3), keepdim=True))
        return x * gate


class Rcab(nn.Module):
    """conv-relu-conv with channel attention and a skip connection."""

    def __init__(self, channels: int, kernel_size: int = 3, reduction: int = 16):
        super().__init__()
        pad = kernel_size // 2
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, kernel_size, padding=pad),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, kernel_size, padding=pad),
            ChannelAttention(channels, reduction),
        )

    def forward(self, x):
        return x + self.body(x)


class ResidualGroup(nn.Module):
    """Cascaded RCABs with a 1x1 long-term fusion of output and input."""

    def __init__(self, channels: int, n_rcabs: int, kernel_size: int = 3):
        super().__init__()
        self.rcabs = nn.Sequential(*[Rcab(channels, kernel_size) for _ in range(n_rcabs)])
        self.fuse = nn.Conv2d(2 * channels, channels, 1)

    def forward(self, x):
        return self.fuse(torch.cat([self.rcabs(x), x], dim=1))


class CrossScaleFuse(nn.Module):
    """Inject strided-down features of all finer branches into branch ``index``.

    One stride-2 conv per octave gap. Branch 0 (and any branch when fusion is
    disabled) passes its own features through unchanged.
    """

    def __init__(self, index: int, channels: int, enabled: bool = True):
        super().__init__()
        self.index = index
        self.enabled = enabled and index > 0
        if self.enabled:
            self.down = nn.ModuleList(
                nn.Sequential(
                    *[nn.Conv2d(channels, channels, 3, stride=2, padding=1) for _ in range(index - j)]
                )
                for j in range(index)
            )
            self.fuse = nn.Conv2d((index + 1) * channels, channels, 1)

    def forward(self, own: torch.Tensor, finer: list[torch.Tensor]) -> torch.Tensor:
        if not self.enabled:
            return own
        if len(finer) != self.index:
            raise ShapeError(f"branch {self.index} expects {self.index} finer inputs, got {len(finer)}")
        parts = [own]
        for j, feat in enumerate(finer):
            down = self.down[j](feat)
            if down.shape[-2:] != own.shape[-2:]:
                raise ShapeError(
                    f"branch {j} features stride to {tuple(down.shape[-2:])}, "
                    f"branch {self.index} is {tuple(own.shape[-2:])}"
                )
            parts.append(down)
        return self.fuse(torch.cat(parts, dim=1))


class UpsampleFuse(nn.Module):
    """Deconvolve every coarse branch back to full resolution and fuse."""

    def __init__(self, levels: int, channels: int):
        super().__init__()
        self.up = nn.ModuleList(
            nn.Sequential(
                *[nn.ConvTranspose2d(channels, channels, 4, stride=2, padding=1) for _ in range(i)]
            )
            for i in range(1, levels)
        )
        self.fuse = nn.Conv2d(levels * channels, channels, 1)

    def forward(self, branch_outputs: list[torch.Tensor]) -> torch.Tensor:
        full = branch_outputs[0]
        parts = [full]
        for i, feat in enumerate(branch_outputs[1:]):
            up = self.up[i](feat)
            if up.shape[-2:] != full.shape[-2:]:
                raise ShapeError(
                    f"level {i + 2} upsamples to {tuple(up.shape[-2:])}, "
                    f"full resolution is {tuple(full.shape[-2:])}"
                )
            parts.append(up)
        return self.fuse(torch.cat(parts, dim=1))


class Mfn(nn.Module):
    """The full pyramid backbone.

    Args:
        levels: number of pyramid branches.
        base_channels: feature width shared by every branch.
        rcabs_per_branch: RCAB count per branch, finest first.
        rcab_kernels: conv kernel size inside the RCABs of each branch.
        output_mode: "direct" predicts from features alone, "residual" adds
            the input image back before the range mapping.
        out_activation: "tanh" for signed maps in [-1, 1], "clamp" for images
            in [0, 1].
        msr: disable to cut all cross-scale fusion (each branch sees only its
            own initial features).
    """

    def __init__(
        self,
        levels: int,
        base_channels: int,
        rcabs_per_branch: tuple[int, ...],
        rcab_kernels: tuple[int, ...],
        output_mode: str = "direct",
        out_activation: str = "tanh",
        msr: bool = True,
    ):
        super().__init__()
        if levels < 1:
            raise ShapeError(f"levels must be >= 1, got {levels}")
        if len(rcabs_per_branch) != levels or len(rcab_kernels) != levels:
            raise ShapeError("rcabs_per_branch and rcab_kernels must have one entry per level")
        if output_mode not in ("direct", "residual"):
            raise ValueError(f"unknown output_mode {output_mode!r}")
        if out_activation not in ("tanh", "clamp"):
            raise ValueError(f"unknown out_activation {out_activation!r}")
        self.levels = levels
        self.output_mode = output_mode
        self.out_activation = out_activation
        self.msr = msr
        self.initial = nn.ModuleList(
            nn.Conv2d(3, base_channels, 3, padding=1) for _ in range(levels)
        )
        self.cross_scale = nn.ModuleList(
            CrossScaleFuse(i, base_channels, enabled=msr) for i in range(levels)
        )
        self.groups = nn.ModuleList(
            ResidualGroup(base_channels, rcabs_per_branch[i], rcab_kernels[i])
            for i in range(levels)
        )
        self.upsample = UpsampleFuse(levels, base_channels)
        self.rec = nn.Conv2d(base_channels, 3, 3, padding=1)

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        if img.dim() != 4 or img.shape[1] != 3:
            raise ShapeError(f"expected (B, 3, H, W) input, got {tuple(img.shape)}")
        pyramid = build_pyramid(img, self.levels)
        f_ini = [self.initial[i](level) for i, level in enumerate(pyramid)]
        f_msr = [self.cross_scale[i](f_ini[i], f_ini[:i]) for i in range(self.levels)]
        f_long = [self.groups[i](f_msr[i]) for i in range(self.levels)]
        fused = self.upsample(f_long)
        out = self.rec(fused)
        if self.output_mode == "residual":
            out = img + out
        if self.out_activation == "tanh":
            return torch.tanh(out)
        return torch.clamp(out, 0.0, 1.0)


def init_weights(module: nn.Module, generator: torch.Generator | None = None) -> None:
    """Fan-in-scaled normal conv weights, zero biases. Deterministic under a
    seeded generator; the attention gates start near 0.5 (zero bias)."""
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            fan_in = m.weight.shape[1] * m.weight.shape[2] * m.weight.shape[3]
        elif isinstance(m, nn.ConvTranspose2d):
            fan_in = m.weight.shape[0] * m.weight.shape[2] * m.weight.shape[3]
        else:
            continue
        with torch.no_grad():
            m.weight.normal_(0.0, 1.0 / math.sqrt(fan_in), generator=generator)
            if m.bias is not None:
                m.bias.zero_()


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def _backbone_kwargs(cfg: RunConfig) -> dict:
    if cfg.ablation.msr:
        return dict(
            levels=cfg.pyramid_levels,
            base_channels=cfg.base_channels,
            rcabs_per_branch=tuple(cfg.rcabs_per_branch),
            rcab_kernels=tuple(cfg.rcab_depth),
            msr=True,
        )
    # Single-scale replacement: one full-resolution branch, RCAB count chosen
    # so the parameter total stays within 10% of the multi-scale model.
    return dict(
        levels=1,
        base_channels=cfg.base_channels,
        rcabs_per_branch=(single_scale_rcab_count(cfg),),
        rcab_kernels=(cfg.rcab_depth[0],),
        msr=False,
    )


def single_scale_rcab_count(cfg: RunConfig) -> int:
    """RCAB count for the single-branch variant that best matches the
    parameter count of the full multi-scale model."""
    full = count_parameters(
        Mfn(
            cfg.pyramid_levels,
            cfg.base_channels,
            tuple(cfg.rcabs_per_branch),
            tuple(cfg.rcab_depth),
            msr=True,
        )
    )
    k0 = sum(cfg.rcabs_per_branch)
    single = count_parameters(
        Mfn(1, cfg.base_channels, (k0,), (cfg.rcab_depth[0],), msr=False)
    )
    per_rcab = count_parameters(Rcab(cfg.base_channels, cfg.rcab_depth[0]))
    return max(1, k0 + round((full - single) / per_rcab))


def build_generator(
    cfg: RunConfig, role: str, generator: torch.Generator | None = None
) -> Mfn:
    """Instantiate and initialize a backbone for one of the two roles.

    ``role="degradation"`` predicts a signed map directly (tanh head);
    ``role="refinement"`` predicts a [0, 1] image as a global residual.
    """
    if role == "degradation":
        head = dict(output_mode="direct", out_activation="tanh")
    elif role == "refinement":
        head = dict(output_mode="residual", out_activation="clamp")
    else:
        raise ValueError(f"unknown role {role!r}")
    model = Mfn(**_backbone_kwargs(cfg), **head)
    init_weights(model, generator)
    return model
