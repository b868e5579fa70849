"""Two-stage degradation-to-refinement network for low-light image enhancement."""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import AblationFlags, RunConfig, load_config, save_config
from .data import SamplePair, SyntheticPair, load_dataset, load_image, save_image
from .degradation import (
    Discriminator,
    augment_dataset,
    base_enhance,
    compose_synthetic,
    predict_degradation,
)
from .metrics import evaluate_dirs, psnr, ssim_index
from .mfn import Mfn, build_generator
from .refinement import charbonnier, enhance, refine
from .training import lr_schedule, train_all, train_stage1, train_stage2

__version__ = "0.1.0"

__all__ = [
    "AblationFlags",
    "Checkpoint",
    "Discriminator",
    "Mfn",
    "RunConfig",
    "SamplePair",
    "SyntheticPair",
    "augment_dataset",
    "base_enhance",
    "build_generator",
    "charbonnier",
    "compose_synthetic",
    "enhance",
    "evaluate_dirs",
    "load_checkpoint",
    "load_config",
    "load_dataset",
    "load_image",
    "lr_schedule",
    "predict_degradation",
    "psnr",
    "refine",
    "save_checkpoint",
    "save_config",
    "save_image",
    "ssim_index",
    "train_all",
    "train_stage1",
    "train_stage2",
]
