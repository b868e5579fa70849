"""Two-phase optimization: adversarial degradation learning, then supervised
refinement on original plus synthesized pairs.

All randomness flows through explicitly seeded generators (weight init from a
torch generator, data sampling from numpy generators derived per stage and
epoch), so a fixed seed reproduces the loss trajectory bit-for-bit on the same
platform.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import Checkpoint, save_checkpoint
from .config import RunConfig, architecture_digest
from .data import SamplePair, from_tensor, pad_to_multiple, to_tensor
from .degradation import (
    Discriminator,
    base_enhance,
    build_discriminator,
    compose_synthetic,
    discriminator_loss,
    generator_fool_loss,
    kl_div,
    soft_histogram,
    stage1_loss,
)
from .errors import ConfigMismatchError, EmptyDatasetError, GradientError
from .mfn import Mfn, build_generator
from .refinement import stage2_loss

__all__ = [
    "lr_schedule",
    "AdamState",
    "adam_step",
    "sample_patches",
    "augment_geometric",
    "TrainState",
    "TrainLogger",
    "train_stage1",
    "train_stage2",
    "train_all",
]

SCALE_FACTORS = (1.0, 0.8, 0.6)


def lr_schedule(step: int, cfg: RunConfig) -> float:
    """Initial rate decayed by a fixed factor every lr_decay_steps steps.

    Evaluated in exact decimal arithmetic so e.g. one decay of 5e-4 by 0.9 is
    the float 4.5e-4, not an accumulation of rounding error.
    """
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    k = step // cfg.lr_decay_steps
    return float(Fraction(str(cfg.lr0)) * Fraction(str(cfg.lr_decay)) ** k)


@dataclass
class AdamState:
    """First/second moment accumulators, keyed like the parameter dict."""

    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(
    params: dict[str, torch.Tensor],
    grads: dict[str, torch.Tensor | None],
    state: AdamState,
    lr: float,
) -> tuple[dict[str, torch.Tensor], AdamState]:
    """One bias-corrected Adam update, in place.

    Raises:
        GradientError: a gradient contains NaN/Inf (names the parameter).
    """
    state.t += 1
    t = state.t
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            if not torch.isfinite(g).all():
                raise GradientError(f"non-finite gradient for parameter {name!r}")
            if name not in state.m:
                state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            m, v = state.m[name], state.v[name]
            m.mul_(state.beta1).add_(g, alpha=1 - state.beta1)
            v.mul_(state.beta2).addcmul_(g, g, value=1 - state.beta2)
            m_hat = m / (1 - state.beta1**t)
            v_hat = v / (1 - state.beta2**t)
            p.add_(-lr * m_hat / (v_hat.sqrt() + state.eps))
    return params, state


def sample_patches(
    pair: SamplePair, size: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Draw one cell of the non-overlapping size x size grid, co-located in
    both images. Images smaller than the patch are reflection-padded first."""
    low, _ = pad_to_multiple(pair.lowlight, size) if min(pair.lowlight.shape[:2]) < size else (pair.lowlight, None)
    high, _ = pad_to_multiple(pair.normal, size) if min(pair.normal.shape[:2]) < size else (pair.normal, None)
    rows = low.shape[0] // size
    cols = low.shape[1] // size
    r = int(rng.integers(rows)) * size
    c = int(rng.integers(cols)) * size
    return (
        np.ascontiguousarray(low[r : r + size, c : c + size]),
        np.ascontiguousarray(high[r : r + size, c : c + size]),
    )


def sample_ref_patch(ref: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    padded, _ = pad_to_multiple(ref, size) if min(ref.shape[:2]) < size else (ref, None)
    rows = padded.shape[0] // size
    cols = padded.shape[1] // size
    r = int(rng.integers(rows)) * size
    c = int(rng.integers(cols)) * size
    return np.ascontiguousarray(padded[r : r + size, c : c + size])


def _resize_hwc(img: np.ndarray, hw: tuple[int, int]) -> np.ndarray:
    t = to_tensor(img)
    r = F.interpolate(t, size=hw, mode="bilinear", align_corners=False)
    return from_tensor(r)


def augment_geometric(
    crop_pair: tuple[np.ndarray, np.ndarray], rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Shared horizontal flip (p=0.5) and scale jitter for both crops.

    The scale factor is drawn from {1.0, 0.8, 0.6}; the crop is resized down
    and bilinearly resized back, so the output size never changes.
    """
    a, b = crop_pair
    if rng.random() < 0.5:
        a = np.ascontiguousarray(a[:, ::-1])
        b = np.ascontiguousarray(b[:, ::-1])
    scale = float(SCALE_FACTORS[int(rng.integers(len(SCALE_FACTORS)))])
    if scale != 1.0:
        size = (a.shape[0], a.shape[1])
        small = (max(1, round(size[0] * scale)), max(1, round(size[1] * scale)))
        a = _resize_hwc(_resize_hwc(a, small), size)
        b = _resize_hwc(_resize_hwc(b, small), size)
    return a, b


@dataclass
class TrainState:
    stage: int
    global_step: int = 0
    epoch: int = 0
    current_lr: float = 0.0
    adam: dict[str, AdamState] = field(default_factory=dict)


class TrainLogger:
    """Collects (step, stage, term, value) rows; optionally appends to CSV."""

    def __init__(self, path: str | Path | None = None):
        self.rows: list[tuple[int, int, str, float]] = []
        self._path = Path(path) if path is not None else None
        if self._path is not None and not self._path.exists():
            with open(self._path, "w", newline="") as fh:
                csv.writer(fh).writerow(["step", "stage", "term", "value"])

    def log(self, step: int, stage: int, term: str, value: float) -> None:
        self.rows.append((step, stage, term, value))
        if self._path is not None:
            with open(self._path, "a", newline="") as fh:
                csv.writer(fh).writerow([step, stage, term, f"{value:.10g}"])

    def terms(self) -> set[str]:
        return {r[2] for r in self.rows}

    def values(self, term: str) -> list[float]:
        return [r[3] for r in self.rows if r[2] == term]


def _named_params(module: nn.Module) -> dict[str, nn.Parameter]:
    return dict(module.named_parameters())


def _grads(params: dict[str, nn.Parameter]) -> dict[str, torch.Tensor | None]:
    return {k: p.grad for k, p in params.items()}


def _zero_grads(*modules: nn.Module) -> None:
    for m in modules:
        m.zero_grad(set_to_none=True)


def module_arrays(module: nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def load_module_arrays(module: nn.Module, arrays: dict[str, np.ndarray]) -> None:
    state = {k: torch.from_numpy(np.asarray(v)) for k, v in arrays.items()}
    module.load_state_dict(state)


def _flatten_adam(states: dict[str, AdamState]) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for group, st in states.items():
        out[f"{group}.t"] = np.asarray(st.t, dtype=np.int64)
        for name, m in st.m.items():
            out[f"{group}.{name}.m"] = m.cpu().numpy().copy()
            out[f"{group}.{name}.v"] = st.v[name].cpu().numpy().copy()
    return out


def _batch_from_pairs(
    pairs: list[SamplePair], idxs: np.ndarray, cfg: RunConfig, rng: np.random.Generator
) -> tuple[torch.Tensor, torch.Tensor]:
    lows, highs = [], []
    for i in idxs:
        low, high = sample_patches(pairs[int(i)], cfg.patch_size, rng)
        low, high = augment_geometric((low, high), rng)
        lows.append(to_tensor(low))
        highs.append(to_tensor(high))
    return torch.cat(lows), torch.cat(highs)


def _batch_from_refs(
    refs: list[np.ndarray], count: int, cfg: RunConfig, rng: np.random.Generator
) -> torch.Tensor:
    crops = []
    for _ in range(count):
        ref = refs[int(rng.integers(len(refs)))]
        crops.append(to_tensor(sample_ref_patch(ref, cfg.patch_size, rng)))
    return torch.cat(crops)


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def _maybe_save(ck: Checkpoint, out_dir: Path | None, name: str) -> None:
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(ck, out_dir / name)


def train_stage1(
    cfg: RunConfig,
    dataset_s: list[SamplePair],
    dataset_r: list[np.ndarray],
    out_dir: str | Path | None = None,
    logger: TrainLogger | None = None,
    save_every: int = 0,
) -> Checkpoint:
    """Adversarial degradation learning.

    Each batch: predict degradations on real low-light patches, compose them
    onto reference patches, re-predict on the synthetic patches, update both
    discriminators, then update the generator. With ``ablation.dl_da`` off the
    whole stage is a no-op (the generator only trains through stage 2) and no
    discriminators are allocated.
    """
    if not dataset_s:
        raise EmptyDatasetError("empty low/normal training set")
    out_dir = Path(out_dir) if out_dir is not None else None
    logger = logger if logger is not None else TrainLogger()
    gen = torch.Generator().manual_seed(cfg.seed)
    deg = build_generator(cfg, "degradation", gen)

    if not cfg.ablation.dl_da:
        ck = Checkpoint(stage=1, config=cfg, step=0, deg_params=module_arrays(deg))
        _maybe_save(ck, out_dir, "stage1.npz")
        return ck

    if not dataset_r:
        raise EmptyDatasetError("reference set required when ablation.dl_da is enabled")
    d_low = build_discriminator(gen)
    d_de = build_discriminator(gen)
    deg_params = _named_params(deg)
    d_low_params = _named_params(d_low)
    d_de_params = _named_params(d_de)
    state = TrainState(stage=1)
    state.adam = {"deg": AdamState(), "disc_low": AdamState(), "disc_de": AdamState()}

    for epoch in range(cfg.epochs_stage1):
        state.epoch = epoch
        rng = np.random.default_rng([cfg.seed, 1, epoch])
        for idxs in _epoch_batches(len(dataset_s), cfg.batch_size, rng):
            lr = lr_schedule(state.global_step, cfg)
            state.current_lr = lr
            low, _ = _batch_from_pairs(dataset_s, idxs, cfg, rng)
            ref = _batch_from_refs(dataset_r, low.shape[0], cfg, rng)

            deg_map = deg(low)
            synth = compose_synthetic(ref, deg_map)
            deg_map_ref = deg(synth)

            _zero_grads(deg, d_low, d_de)
            discriminator_loss(low, synth, d_low).backward()
            adam_step(d_low_params, _grads(d_low_params), state.adam["disc_low"], lr)

            _zero_grads(deg, d_low, d_de)
            discriminator_loss((deg_map + 1) / 2, (deg_map_ref + 1) / 2, d_de).backward()
            adam_step(d_de_params, _grads(d_de_params), state.adam["disc_de"], lr)

            # Generator plays the opposing side: fool both (just updated)
            # discriminators and keep the two map histograms consistent.
            _zero_grads(deg, d_low, d_de)
            objective = cfg.alpha * (
                generator_fool_loss(d_low(synth))
                + generator_fool_loss(d_de((deg_map_ref + 1) / 2))
            )
            if cfg.ablation.kl:
                objective = objective + kl_div(
                    soft_histogram((deg_map + 1) / 2),
                    soft_histogram((deg_map_ref + 1) / 2),
                )
            objective.backward()
            adam_step(deg_params, _grads(deg_params), state.adam["deg"], lr)

            with torch.no_grad():
                losses = stage1_loss(
                    low, synth, deg_map, deg_map_ref, d_low, d_de,
                    alpha=cfg.alpha, include_kl=cfg.ablation.kl,
                )
            logger.log(state.global_step, 1, "adv_low", losses.adv_low.item())
            logger.log(state.global_step, 1, "adv_de", losses.adv_de.item())
            if cfg.ablation.kl:
                logger.log(state.global_step, 1, "kl", losses.kl.item())
            state.global_step += 1
            if save_every and state.global_step % save_every == 0:
                _maybe_save(
                    _stage1_checkpoint(cfg, state, deg, d_low, d_de),
                    out_dir,
                    f"stage1_step{state.global_step}.npz",
                )

    ck = _stage1_checkpoint(cfg, state, deg, d_low, d_de)
    _maybe_save(ck, out_dir, "stage1.npz")
    return ck


def _stage1_checkpoint(
    cfg: RunConfig, state: TrainState, deg: Mfn, d_low: Discriminator, d_de: Discriminator
) -> Checkpoint:
    return Checkpoint(
        stage=1,
        config=cfg,
        step=state.global_step,
        deg_params=module_arrays(deg),
        disc_low=module_arrays(d_low),
        disc_de=module_arrays(d_de),
        optimizer_state=_flatten_adam(state.adam),
    )


def train_stage2(
    cfg: RunConfig,
    dataset_s: list[SamplePair],
    stage1_ck: Checkpoint,
    dataset_r: list[np.ndarray],
    out_dir: str | Path | None = None,
    logger: TrainLogger | None = None,
    save_every: int = 0,
) -> Checkpoint:
    """Supervised refinement training.

    The degradation generator is loaded from the stage-1 checkpoint and frozen;
    augmented pairs are regenerated on the fly each epoch. With
    ``ablation.dl_da`` off there is no augmented branch and the degradation
    generator trains jointly through the composed pipeline instead.
    """
    if not dataset_s:
        raise EmptyDatasetError("empty low/normal training set")
    if stage1_ck.deg_params is None:
        raise ConfigMismatchError("stage-1 checkpoint has no degradation parameters")
    if architecture_digest(stage1_ck.config) != architecture_digest(cfg):
        raise ConfigMismatchError(
            "stage-1 checkpoint was trained with a different architecture"
        )
    if cfg.ablation.dl_da and not dataset_r:
        raise EmptyDatasetError("reference set required when ablation.dl_da is enabled")
    out_dir = Path(out_dir) if out_dir is not None else None
    logger = logger if logger is not None else TrainLogger()

    gen = torch.Generator().manual_seed(cfg.seed + 1)
    deg = build_generator(cfg, "degradation")
    load_module_arrays(deg, stage1_ck.deg_params)
    re = build_generator(cfg, "refinement", gen)
    freeze_deg = cfg.ablation.dl_da
    deg.requires_grad_(not freeze_deg)

    re_params = _named_params(re)
    deg_params = _named_params(deg)
    state = TrainState(stage=2)
    state.adam = {"re": AdamState()}
    if not freeze_deg:
        state.adam["deg"] = AdamState()

    for epoch in range(cfg.epochs_stage2):
        state.epoch = epoch
        rng = np.random.default_rng([cfg.seed, 2, epoch])
        for idxs in _epoch_batches(len(dataset_s), cfg.batch_size, rng):
            lr = lr_schedule(state.global_step, cfg)
            state.current_lr = lr
            low, target = _batch_from_pairs(dataset_s, idxs, cfg, rng)

            _zero_grads(deg, re)
            if freeze_deg:
                with torch.no_grad():
                    deg_map = deg(low)
                    base = base_enhance(low, deg_map)
                    ref = _batch_from_refs(dataset_r, low.shape[0], cfg, rng)
                    synth = compose_synthetic(ref, deg_map)
                    base_ref = base_enhance(synth, deg(synth))
                pred = re(base)
                pred_ref = re(base_ref)
                losses = stage2_loss(pred, target, pred_ref, ref, cfg)
            else:
                base = base_enhance(low, deg(low))
                pred = re(base)
                losses = stage2_loss(pred, target, None, None, cfg)

            losses.total.backward()
            adam_step(re_params, _grads(re_params), state.adam["re"], lr)
            if not freeze_deg:
                adam_step(deg_params, _grads(deg_params), state.adam["deg"], lr)

            logger.log(state.global_step, 2, "con_img", losses.con_img.item())
            if cfg.ablation.ssim:
                logger.log(state.global_step, 2, "ssim_term", losses.ssim_term.item())
            state.global_step += 1
            if save_every and state.global_step % save_every == 0:
                _maybe_save(
                    _stage2_checkpoint(cfg, state, deg, re),
                    out_dir,
                    f"stage2_step{state.global_step}.npz",
                )

    ck = _stage2_checkpoint(cfg, state, deg, re)
    _maybe_save(ck, out_dir, "stage2.npz")
    return ck


def _stage2_checkpoint(cfg: RunConfig, state: TrainState, deg: Mfn, re: Mfn) -> Checkpoint:
    return Checkpoint(
        stage=2,
        config=cfg,
        step=state.global_step,
        deg_params=module_arrays(deg),
        re_params=module_arrays(re),
        optimizer_state=_flatten_adam(state.adam),
    )


def train_all(
    cfg: RunConfig,
    dataset_s: list[SamplePair],
    dataset_r: list[np.ndarray],
    out_dir: str | Path | None = None,
    logger: TrainLogger | None = None,
    save_every: int = 0,
) -> Checkpoint:
    """Stage 1 followed by stage 2; returns the final checkpoint."""
    ck1 = train_stage1(cfg, dataset_s, dataset_r, out_dir, logger, save_every)
    return train_stage2(cfg, dataset_s, ck1, dataset_r, out_dir, logger, save_every)
