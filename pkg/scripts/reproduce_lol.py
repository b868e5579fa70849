#!/usr/bin/env python3
"""Full-scale training run on a LOL-style dataset.

This is a reproduction script, not part of the test suite: with the default
configuration (64 channels, batch 16, 20 + 40 epochs) it needs a GPU-class
machine or many CPU-hours. Expected result on the standard 485/15 split is
roughly 19-20 dB PSNR on the held-out images.

Layout expected under --data:
    <data>/train/low/*.png   <data>/train/high/*.png
    <data>/eval/low/*.png    <data>/eval/high/*.png
Reference images (any clean photos, e.g. the training highs of another
dataset) go in a flat directory passed as --refs; without one, the training
highs are reused as references.

Usage:
    python scripts/reproduce_lol.py --data /path/to/LOL --out runs/lol \
        [--refs /path/to/refs]
"""

import argparse
import sys
from pathlib import Path

from drgn.cli import main as drgn_main


def run() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--data", required=True)
    parser.add_argument("--refs")
    parser.add_argument("--out", default="runs/lol")
    args = parser.parse_args()

    data = Path(args.data)
    refs = args.refs or str(data / "train" / "high")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    config = out / "run.yaml"
    if not config.exists():
        config.write_text(Path(__file__).with_name("lol_config.yaml").read_text())

    rc = drgn_main([
        "train", "--config", str(config), "--stage", "all",
        "--data", str(data / "train"), "--refs", refs, "--out", str(out),
    ])
    if rc != 0:
        return rc

    rc = drgn_main([
        "enhance", "--checkpoint", str(out / "stage2.npz"),
        "--input", str(data / "eval" / "low"), "--out", str(out / "predictions"),
    ])
    if rc != 0:
        return rc

    return drgn_main([
        "evaluate", "--pred", str(out / "predictions"),
        "--gt", str(data / "eval" / "high"), "--out", str(out / "report.json"),
    ])


if __name__ == "__main__":
    sys.exit(run())
