"""Command-line surface: train / augment / enhance / evaluate.

Exit codes: 0 success, 2 usage or configuration error, 3 data error. The env
var DRGN_NUM_WORKERS caps internal data-pipeline parallelism.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

from . import checkpoint as ckpt
from . import config as cfgmod
from .data import load_dataset, load_image, load_references, reference_ids, save_image, SamplePair
from .degradation import augment_dataset
from .errors import (
    ConfigError,
    DecodeError,
    DrgnError,
    EmptyDatasetError,
    EmptyReferenceError,
    FormatError,
    GradientError,
    PairingError,
    ShapeError,
)
from .metrics import evaluate_dirs, write_report
from .mfn import build_generator
from .refinement import enhance
from .training import TrainLogger, load_module_arrays, train_all, train_stage1, train_stage2

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3

_DATA_ERRORS = (
    PairingError,
    DecodeError,
    FormatError,
    ShapeError,
    EmptyDatasetError,
    EmptyReferenceError,
    GradientError,
)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="drgn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run stage 1, stage 2, or both")
    p_train.add_argument("--config", required=True, help="YAML run configuration")
    p_train.add_argument("--stage", choices=["1", "2", "all"], default="all")
    p_train.add_argument("--data", required=True, help="dataset root with low/ and high/")
    p_train.add_argument("--refs", help="directory of clean reference images")
    p_train.add_argument("--out", required=True, help="output directory")
    p_train.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
        help="override a config value (repeatable)",
    )
    p_train.add_argument("--save-every", type=int, default=0, metavar="N",
                         help="also write a checkpoint every N steps")

    p_aug = sub.add_parser("augment", help="synthesize low-light pairs from references")
    p_aug.add_argument("--checkpoint", required=True)
    p_aug.add_argument("--lowlight", required=True, help="directory of low-light images")
    p_aug.add_argument("--refs", required=True, help="directory of clean reference images")
    p_aug.add_argument("--out", required=True)
    p_aug.add_argument("--seed", type=int, default=0)

    p_enh = sub.add_parser("enhance", help="enhance every image in a directory")
    p_enh.add_argument("--checkpoint", required=True)
    p_enh.add_argument("--input", required=True, help="directory of low-light images")
    p_enh.add_argument("--out", required=True)

    p_eval = sub.add_parser("evaluate", help="PSNR/SSIM report for predictions vs ground truth")
    p_eval.add_argument("--pred", required=True)
    p_eval.add_argument("--gt", required=True)
    p_eval.add_argument("--out", required=True, help="path of the JSON report")
    return parser


def _cmd_train(args: argparse.Namespace) -> int:
    cfg = cfgmod.load_config(args.config)
    cfg = cfgmod.apply_overrides(cfg, args.overrides)
    data_root = Path(args.data)
    dataset_s = load_dataset(data_root / "low", data_root / "high")
    if not dataset_s:
        raise EmptyDatasetError(f"no image pairs under {data_root}")
    dataset_r = load_references(args.refs) if args.refs else []

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    logger = TrainLogger(out_dir / "train_log.csv")
    kwargs = dict(out_dir=out_dir, logger=logger, save_every=args.save_every)

    if args.stage == "1":
        train_stage1(cfg, dataset_s, dataset_r, **kwargs)
    elif args.stage == "2":
        ck1 = ckpt.load_checkpoint(out_dir / "stage1.npz")
        train_stage2(cfg, dataset_s, ck1, dataset_r, **kwargs)
    else:
        train_all(cfg, dataset_s, dataset_r, **kwargs)
    return EXIT_OK


def _load_models(ck: ckpt.Checkpoint, need_re: bool):
    if ck.deg_params is None:
        raise ConfigError("checkpoint has no degradation generator parameters")
    deg = build_generator(ck.config, "degradation")
    load_module_arrays(deg, ck.deg_params)
    deg.eval()
    re = None
    if need_re:
        if ck.re_params is None:
            raise ConfigError("checkpoint has no refinement generator parameters")
        re = build_generator(ck.config, "refinement")
        load_module_arrays(re, ck.re_params)
        re.eval()
    return deg, re


def _cmd_augment(args: argparse.Namespace) -> int:
    ck = ckpt.load_checkpoint(args.checkpoint)
    deg, _ = _load_models(ck, need_re=False)

    low_dir = Path(args.lowlight)
    low_ids = reference_ids(low_dir)
    lows = load_references(low_dir)
    pairs = [SamplePair(lowlight=img, normal=img, id=i) for img, i in zip(lows, low_ids)]
    refs = load_references(args.refs)
    ref_names = reference_ids(args.refs)
    if not refs:
        raise EmptyReferenceError(f"no reference images under {args.refs}")

    synthetic = augment_dataset(pairs, refs, deg, seed=args.seed)

    out_dir = Path(args.out)
    (out_dir / "ref").mkdir(parents=True, exist_ok=True)
    (out_dir / "low").mkdir(parents=True, exist_ok=True)
    items = []
    for name, pair in zip(ref_names, synthetic):
        save_image(pair.reference, out_dir / "ref" / f"{name}.png")
        save_image(pair.synthetic_lowlight, out_dir / "low" / f"{name}.png")
        items.append(
            {"ref": f"{name}.png", "low": f"{name}.png", "source_id": pair.source_degradation_id}
        )
    manifest = {
        "seed": args.seed,
        "checkpoint_digest": hashlib.sha256(Path(args.checkpoint).read_bytes()).hexdigest(),
        "items": items,
    }
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return EXIT_OK


def _cmd_enhance(args: argparse.Namespace) -> int:
    ck = ckpt.load_checkpoint(args.checkpoint)
    deg, re = _load_models(ck, need_re=True)
    in_dir = Path(args.input)
    names = sorted(
        f for f in in_dir.iterdir() if f.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp")
    )
    if not names:
        raise EmptyDatasetError(f"no images under {in_dir}")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    failures = 0
    for path in names:
        try:
            img = load_image(path)
        except DecodeError as e:
            print(f"error: {e}", file=sys.stderr)
            failures += 1
            continue
        result = enhance(img, deg, re, ck.config)
        save_image(result, out_dir / f"{path.stem}.png")
    return EXIT_DATA if failures else EXIT_OK


def _cmd_evaluate(args: argparse.Namespace) -> int:
    report = evaluate_dirs(args.pred, args.gt)
    json_path = Path(args.out)
    write_report(report, json_path, json_path.with_suffix(".csv"))
    agg = report.aggregate
    print(f"mean_psnr={agg['mean_psnr']:.4f} mean_ssim={agg['mean_ssim']:.4f}")
    return EXIT_OK


_COMMANDS = {
    "train": _cmd_train,
    "augment": _cmd_augment,
    "enhance": _cmd_enhance,
    "evaluate": _cmd_evaluate,
}


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except _DATA_ERRORS as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except DrgnError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
