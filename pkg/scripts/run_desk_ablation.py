#!/usr/bin/env python3
"""Desk-scale ablation of all five variants on synthetic data.

Runs in minutes on a laptop CPU and reproduces the qualitative ladder
(plain U-Net through the attention-gated backbone); full-scale numbers need
the real datasets and a long run, see run_full_scale.py.
"""

import argparse
import sys

from saunet.cli import main


def parse_args():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", default="out/desk_ablation")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--train-images", type=int, default=80)
    p.add_argument("--test-images", type=int, default=20)
    p.add_argument("--epochs", type=int, default=12)
    p.add_argument("--base-channels", type=int, default=4)
    return p.parse_args()


if __name__ == "__main__":
    a = parse_args()
    sys.exit(
        main(
            [
                "ablate",
                "--synthetic",
                "--synth-train", str(a.train_images),
                "--synth-test", str(a.test_images),
                "--epochs", str(a.epochs),
                "--base-channels", str(a.base_channels),
                "--seed", str(a.seed),
                "--out", a.out,
            ]
        )
    )
