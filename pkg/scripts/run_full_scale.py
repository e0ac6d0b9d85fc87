#!/usr/bin/env python3
"""Launch a full-scale training run on a real dataset manifest.

Defaults follow the published recipe: 150 epochs with the 100/50 learning
rate split, batch 8 and drop rate 0.18 for DRIVE geometry (use
``--profile chase`` for batch 4 / 0.13), base 16 channels, DropBlock size 7,
augmentation to 256 images.  Expect this to take a very long time on CPU;
the command exists so the pipeline can be pointed at DRIVE/CHASE_DB1 when
the data and compute are available.

The manifest is line-delimited JSON (see README); masks/images are PNG.
"""

import argparse
import sys

from saunet.cli import main


def parse_args():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("manifest", help="path to the dataset manifest.jsonl")
    p.add_argument("--out", default="out/full_scale")
    p.add_argument("--profile", choices=("drive", "chase"), default="drive")
    p.add_argument("--variant", default="sa-unet")
    p.add_argument("--seed", type=int, default=0)
    return p.parse_args()


if __name__ == "__main__":
    a = parse_args()
    sys.exit(
        main(
            [
                "train",
                "--manifest", a.manifest,
                "--profile", a.profile,
                "--variant", a.variant,
                "--seed", str(a.seed),
                "--out", a.out,
            ]
        )
    )
