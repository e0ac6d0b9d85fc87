"""Command-line workflows: train, eval, predict, count-params, ablate,
gradcheck, and synth-data.

Every run that writes outputs also writes its fully-resolved configuration
next to them, so (command, config, seed) reproduces every artifact.  Exit
codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure,
5 verification failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import metrics as metrics_mod
from . import verification
from .layers import DropBlockConfig
from .models import (
    REFERENCE_PARAM_COUNTS,
    VARIANT_LADDER,
    ArchitectureSpec,
    CheckpointError,
    Network,
    SpecMismatchError,
    count_params,
    load_checkpoint,
    predict_binary,
)
from .optim import TrainConfig, TrainingDivergedError, evaluate_probs, run_training
from .tensor import Tensor

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_VERIFY = 5

_PROFILES = {
    "drive": {"batch_size": 8, "drop_rate": 0.18, "val_count": 26, "augment_total": 256},
    "chase": {"batch_size": 4, "drop_rate": 0.13, "val_count": 13, "augment_total": 256},
}


def _add_spec_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--variant", choices=VARIANT_LADDER, default="sa-unet")
    p.add_argument("--base-channels", type=int, default=16)
    p.add_argument("--depth", type=int, default=3)
    p.add_argument("--upconv-kernel", type=int, default=3)
    p.add_argument("--block-size", type=int, default=7)
    p.add_argument("--drop-rate", type=float, default=None, help="defaults to the profile value")


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--manifest", type=Path, default=None)
    p.add_argument("--synthetic", action="store_true")
    p.add_argument("--synth-train", type=int, default=48)
    p.add_argument("--synth-test", type=int, default=12)
    p.add_argument("--synth-size", type=int, default=64)
    p.add_argument("--profile", choices=("drive", "chase"), default="drive")
    p.add_argument("--seed", type=int, default=0)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int, default=150)
    p.add_argument("--batch-size", type=int, default=None, help="defaults to the profile value")
    p.add_argument("--lr-phase1", type=float, default=1e-3)
    p.add_argument("--lr-phase2", type=float, default=1e-4)
    p.add_argument("--phase1-epochs", type=int, default=None)
    p.add_argument("--val-count", type=int, default=None, help="defaults to the profile value")
    p.add_argument("--augment-total", type=int, default=None, help="0 disables augmentation")
    p.add_argument("--precision", choices=("float32", "float64"), default="float32")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="saunet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one variant and write checkpoints and curve logs")
    _add_spec_flags(p)
    _add_data_flags(p)
    _add_train_flags(p)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint against ground truth")
    _add_data_flags(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--variant", choices=VARIANT_LADDER, default=None, help="assert the checkpoint's variant")
    p.add_argument("--split", choices=data_mod.SPLITS, default="test")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--use-fov", action="store_true")
    p.add_argument("--per-image", action="store_true")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="write probability maps, masks, and overlays")
    _add_data_flags(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--split", choices=data_mod.SPLITS, default="test")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("count-params", help="per-layer parameter accounting")
    _add_spec_flags(p)
    p.add_argument("--verify-table4", action="store_true", help="check all five variants against the reference totals")
    p.set_defaults(func=cmd_count_params)

    p = sub.add_parser("ablate", help="train and evaluate all five variants under one seed")
    _add_spec_flags(p)
    _add_data_flags(p)
    _add_train_flags(p)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference verification of all gradients")
    p.add_argument("--skip-end-to-end", action="store_true")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth-data", help="generate a synthetic vessel-style dataset on disk")
    p.add_argument("--train-count", type=int, default=48)
    p.add_argument("--test-count", type=int, default=12)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_synth_data)

    return parser


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------


def _spec_from_args(args, drop_rate: float) -> ArchitectureSpec:
    return ArchitectureSpec(
        variant=args.variant,
        base_channels=args.base_channels,
        depth=args.depth,
        upconv_kernel=args.upconv_kernel,
        dropblock=DropBlockConfig(block_size=args.block_size, drop_rate=drop_rate),
    )


def resolve_train_settings(args) -> dict:
    """Fill profile-dependent defaults; explicit flags always win."""
    profile = _PROFILES[args.profile]
    if args.synthetic:
        n_train = args.synth_train
        val_count = args.val_count if args.val_count is not None else max(1, n_train // 10)
        augment_total = args.augment_total if args.augment_total is not None else 0
    else:
        val_count = args.val_count if args.val_count is not None else profile["val_count"]
        augment_total = args.augment_total if args.augment_total is not None else profile["augment_total"]
    return {
        "batch_size": args.batch_size if args.batch_size is not None else profile["batch_size"],
        "drop_rate": args.drop_rate if args.drop_rate is not None else profile["drop_rate"],
        "val_count": val_count,
        "augment_total": augment_total,
    }


def _resolved_config(args, extra: dict) -> dict:
    cfg = {k: v for k, v in vars(args).items() if k != "func"}
    for key, value in cfg.items():
        if isinstance(value, Path):
            cfg[key] = str(value)
    cfg.update(extra)
    return cfg


def _write_config(out_dir: Path, cfg: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "resolved_config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


def _synthetic_pool(args) -> tuple[list, list]:
    rng = np.random.default_rng([args.seed, 101])
    size = (args.synth_size, args.synth_size)
    pool = data_mod.generate_synthetic_dataset(args.synth_train + args.synth_test, size=size, rng=rng)
    return pool[: args.synth_train], pool[args.synth_train :]


def _manifest_samples(manifest, split: str) -> list:
    entries = manifest.split_entries(split)
    if not entries:
        raise data_mod.ManifestError(f"manifest has no {split!r} samples")
    return [data_mod.load_sample(e, manifest.base_dir) for e in entries]


def _prepare_training_data(args, settings) -> tuple[list, list, tuple]:
    """(train samples, val samples, pad_target), already padded and augmented."""
    if args.synthetic == (args.manifest is not None):
        raise ValueError("choose exactly one of --synthetic or --manifest")
    if args.synthetic:
        train_pool, _ = _synthetic_pool(args)
        pad_target = (args.synth_size, args.synth_size)
    else:
        manifest = data_mod.load_manifest(args.manifest)
        pad_target = manifest.pad_target
        train_pool = [
            data_mod.pad_to_target(s, pad_target)[0] for s in _manifest_samples(manifest, "train")
        ]
    if settings["augment_total"]:
        train_pool = data_mod.build_augmented_set(
            train_pool, rng=np.random.default_rng([args.seed, 102]), target_total=settings["augment_total"]
        )
    train, val = data_mod.split_validation(
        train_pool, settings["val_count"], rng=np.random.default_rng([args.seed, 103])
    )
    return train, val, pad_target


def _print_metric_table(rows: list[dict], label_key: str) -> None:
    header = [label_key] + [c.upper() for c in metrics_mod.METRIC_COLUMNS]
    print("  ".join(f"{h:>10}" for h in header))
    for row in rows:
        cells = [f"{row[label_key]:>10}"]
        for c in metrics_mod.METRIC_COLUMNS:
            v = row[c]
            cells.append(f"{v:>10.4f}" if v is not None else f"{'n/a':>10}")
        print("  ".join(cells))


def _evaluate_net(net: Network, samples: list, pad_target, threshold: float, use_fov: bool,
                  per_image: bool, overlay_dir: Path | None = None) -> tuple[dict, list[dict]]:
    """Pad, run eval-mode forward, crop back, threshold, and pool metrics."""
    probs, preds, gts, regions = [], [], [], []
    per_rows = []
    for sample in samples:
        padded, off = data_mod.pad_to_target(sample, pad_target)
        prob_map = evaluate_probs(net, padded.image[None], batch_size=1)[0]
        prob_map = data_mod.crop_back(prob_map, off)
        pred_map = predict_binary(prob_map, threshold)
        region = None
        if use_fov and sample.fov is not None:
            region = sample.fov.astype(bool)
        if overlay_dir is not None:
            data_mod.write_overlay(sample.image, pred_map[0].astype(np.float32), overlay_dir / f"{sample.id}.png")
        flat_region = region.ravel() if region is not None else np.ones(prob_map.size, dtype=bool)
        probs.append(prob_map.ravel()[flat_region])
        preds.append(pred_map.ravel()[flat_region])
        gts.append(sample.mask.ravel()[flat_region])
        if per_image:
            row = metrics_mod.segmentation_report(prob_map, pred_map, sample.mask, region)
            per_rows.append({"id": sample.id, **row})
    pooled = metrics_mod.segmentation_report(
        np.concatenate(probs), np.concatenate(preds), np.concatenate(gts)
    )
    return pooled, per_rows


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    settings = resolve_train_settings(args)
    spec = _spec_from_args(args, settings["drop_rate"])
    train, val, _ = _prepare_training_data(args, settings)
    train_x, train_y = data_mod.stack_samples(train)
    val_x, val_y = data_mod.stack_samples(val) if val else (None, None)
    cfg = TrainConfig(
        epochs=args.epochs,
        lr_phase1=args.lr_phase1,
        lr_phase2=args.lr_phase2,
        phase1_epochs=args.phase1_epochs,
        batch_size=settings["batch_size"],
        seed=args.seed,
    )
    net = Network(spec, seed=args.seed, dtype=np.dtype(args.precision))
    reports = run_training(net, train_x, train_y, val_x, val_y, cfg, out_dir=args.out)
    _write_config(args.out, _resolved_config(args, {**settings, "spec": spec.to_dict(),
                                                    "phase1_epochs": cfg.phase1_epochs}))
    final = reports[-1]
    print(f"trained {spec.variant} for {cfg.epochs} epochs; "
          f"final train loss {final.train_loss:.4f}, val loss {final.val_loss}")
    return EXIT_OK


def _load_eval_samples(args) -> tuple[list, tuple]:
    if args.synthetic == (args.manifest is not None):
        raise ValueError("choose exactly one of --synthetic or --manifest")
    if args.synthetic:
        train_pool, test_pool = _synthetic_pool(args)
        samples = {"train": train_pool, "test": test_pool, "val": []}[args.split]
        if not samples:
            raise ValueError(f"synthetic data has no {args.split!r} split")
        return samples, (args.synth_size, args.synth_size)
    manifest = data_mod.load_manifest(args.manifest)
    return _manifest_samples(manifest, args.split), manifest.pad_target


def cmd_eval(args) -> int:
    net, _ = load_checkpoint(args.checkpoint)
    if args.variant is not None and net.spec.variant != args.variant:
        raise SpecMismatchError(
            f"checkpoint holds variant {net.spec.variant!r}, expected {args.variant!r}"
        )
    samples, pad_target = _load_eval_samples(args)
    overlay_dir = args.out / "overlays"
    overlay_dir.mkdir(parents=True, exist_ok=True)
    pooled, per_rows = _evaluate_net(
        net, samples, pad_target, args.threshold, args.use_fov, args.per_image, overlay_dir
    )
    records = [{"variant": net.spec.variant, "scope": "pooled", **pooled}]
    records += [{"variant": net.spec.variant, "scope": "image", **row} for row in per_rows]
    report_path = args.out / "report.jsonl"
    report_path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))
    _write_config(args.out, _resolved_config(args, {"spec": net.spec.to_dict()}))
    _print_metric_table([{"variant": net.spec.variant, **pooled}], "variant")
    return EXIT_OK


def cmd_predict(args) -> int:
    net, _ = load_checkpoint(args.checkpoint)
    samples, pad_target = _load_eval_samples(args)
    for sub in ("prob", "mask", "overlays"):
        (args.out / sub).mkdir(parents=True, exist_ok=True)
    for sample in samples:
        padded, off = data_mod.pad_to_target(sample, pad_target)
        prob_map = evaluate_probs(net, padded.image[None], batch_size=1)[0]
        prob_map = data_mod.crop_back(prob_map, off)
        pred_map = predict_binary(prob_map, args.threshold)
        data_mod.save_mask(np.clip(prob_map, 0.0, 1.0), args.out / "prob" / f"{sample.id}.png")
        data_mod.save_mask(pred_map, args.out / "mask" / f"{sample.id}.png")
        data_mod.write_overlay(sample.image, pred_map[0].astype(np.float32), args.out / "overlays" / f"{sample.id}.png")
    _write_config(args.out, _resolved_config(args, {"spec": net.spec.to_dict()}))
    print(f"wrote predictions for {len(samples)} samples to {args.out}")
    return EXIT_OK


def cmd_count_params(args) -> int:
    if args.verify_table4:
        failures = []
        for variant in VARIANT_LADDER:
            net = Network(ArchitectureSpec(variant=variant), seed=0)
            report = count_params(net)
            expected = REFERENCE_PARAM_COUNTS[variant]
            got = (report.total, report.trainable, report.non_trainable)
            status = "ok" if got == expected else "MISMATCH"
            print(f"{variant:>10}: total {report.total:,} trainable {report.trainable:,} "
                  f"non-trainable {report.non_trainable:,} [{status}]")
            if got != expected:
                failures.append((variant, expected, got))
        if failures:
            for variant, expected, got in failures:
                print(f"  {variant}: expected {expected}, got {got}", file=sys.stderr)
            return EXIT_VERIFY
        return EXIT_OK

    drop_rate = args.drop_rate if args.drop_rate is not None else 0.18
    spec = _spec_from_args(args, drop_rate)
    report = count_params(Network(spec, seed=0))
    for name, n, trainable in report.per_layer:
        print(f"{name:<28} {n:>10,}  {'trainable' if trainable else 'non-trainable'}")
    print(f"{'total':<28} {report.total:>10,}")
    print(f"{'trainable':<28} {report.trainable:>10,}")
    print(f"{'non-trainable':<28} {report.non_trainable:>10,}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    settings = resolve_train_settings(args)
    train, val, pad_target = _prepare_training_data(args, settings)
    if args.synthetic:
        _, test = _synthetic_pool(args)
    else:
        manifest = data_mod.load_manifest(args.manifest)
        test = _manifest_samples(manifest, "test")
    train_x, train_y = data_mod.stack_samples(train)
    val_x, val_y = data_mod.stack_samples(val) if val else (None, None)
    cfg = TrainConfig(
        epochs=args.epochs,
        lr_phase1=args.lr_phase1,
        lr_phase2=args.lr_phase2,
        phase1_epochs=args.phase1_epochs,
        batch_size=settings["batch_size"],
        seed=args.seed,
    )
    rows = []
    for variant in VARIANT_LADDER:
        spec = ArchitectureSpec(
            variant=variant,
            base_channels=args.base_channels,
            depth=args.depth,
            upconv_kernel=args.upconv_kernel,
            dropblock=DropBlockConfig(block_size=args.block_size, drop_rate=settings["drop_rate"]),
        )
        net = Network(spec, seed=args.seed, dtype=np.dtype(args.precision))
        run_training(net, train_x, train_y, val_x, val_y, cfg, out_dir=args.out / variant)
        pooled, _ = _evaluate_net(net, test, pad_target, threshold=0.5, use_fov=False, per_image=False)
        rows.append({"variant": variant, **pooled})
    (args.out / "ablation.jsonl").write_text(
        "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows)
    )
    _write_config(args.out, _resolved_config(args, {**settings, "phase1_epochs": cfg.phase1_epochs}))
    _print_metric_table(rows, "variant")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    ok = verification.run_suite(include_end_to_end=not args.skip_end_to_end)
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_synth_data(args) -> int:
    rng = np.random.default_rng([args.seed, 101])
    size = (args.size, args.size)
    pool = data_mod.generate_synthetic_dataset(args.train_count + args.test_count, size=size, rng=rng)
    out = args.out
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, sample in enumerate(pool):
        split = "train" if i < args.train_count else "test"
        data_mod.save_image(sample.image, out / "images" / f"{sample.id}.png")
        data_mod.save_mask(sample.mask, out / "masks" / f"{sample.id}.png")
        entries.append(
            data_mod.ManifestEntry(
                id=sample.id,
                image_path=f"images/{sample.id}.png",
                mask_path=f"masks/{sample.id}.png",
                fov_path=None,
                split=split,
            )
        )
    manifest = data_mod.DatasetManifest(name="synthetic", pad_target=size, samples=entries)
    data_mod.save_manifest(manifest, out / "manifest.jsonl")
    _write_config(out, _resolved_config(args, {}))
    print(f"wrote {len(pool)} samples and manifest.jsonl to {out}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except SpecMismatchError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (data_mod.ManifestError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDivergedError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    raise SystemExit(main())
