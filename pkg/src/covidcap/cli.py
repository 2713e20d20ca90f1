"""Command-line entry point: phantom generation, preprocessing, training,
cross-validation, ensemble evaluation and attention export."""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

from . import harness
from .data import load_manifest
from .phantoms import DEFAULT_PHANTOM_SPACING, RatioLaw, generate_dataset
from .preprocess import DEFAULT_SHAPE, DEFAULT_SPACING, PreprocessConfig, load_or_preprocess


def _add_cache(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--cache-dir", default=None, help="preprocessed-volume cache directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="covidcap",
        description="Dual-sampling attention pipeline for COVID-19 vs CAP CT classification",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic phantom dataset")
    p.add_argument("--n-covid", type=int, required=True)
    p.add_argument("--n-cap", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--shape", type=int, nargs=3, default=(69, 128, 128), metavar=("D", "H", "W"))
    p.add_argument(
        "--spacing", type=float, nargs=3, default=None, metavar=("Z", "Y", "X"),
        help="voxel spacing in mm (default matches the built-in phantom size)",
    )

    p = sub.add_parser("preprocess", help="preprocess every scan of a manifest into the cache")
    p.add_argument("--manifest", required=True)
    p.add_argument("--cache-dir", required=True)
    p.add_argument("--target-shape", type=int, nargs=3, default=DEFAULT_SHAPE, metavar=("D", "H", "W"))
    p.add_argument("--target-spacing", type=float, nargs=3, default=DEFAULT_SPACING, metavar=("Z", "Y", "X"))

    p = sub.add_parser("train", help="train one model from a JSON config")
    p.add_argument("--config", required=True, help="JSON file mirroring TrainConfig")
    p.add_argument("--strategy", choices=harness.STRATEGIES, default=None,
                   help="override the config's sampling strategy")

    p = sub.add_parser("cross-validate", help="k-fold cross-validation of the US/SS pair")
    p.add_argument("--config", required=True)
    p.add_argument("--k", type=int, default=5)

    p = sub.add_parser("evaluate", help="fuse two checkpoints over a manifest and report metrics")
    p.add_argument("--us-ckpt", required=True)
    p.add_argument("--ss-ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output report JSON path")
    _add_cache(p)

    p = sub.add_parser("export-attention", help="write attention masks and overlay images")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--grad-cam", action="store_true", help="also export the gradient-based baseline")
    _add_cache(p)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)

    if args.command == "gen-data":
        spacing = args.spacing
        if spacing is None:
            # Scale the default spacing so the phantom keeps the default
            # physical extent at any grid size.
            spacing = tuple(
                s * d / g
                for s, d, g in zip(DEFAULT_PHANTOM_SPACING, (69, 128, 128), args.shape)
            )
        manifest = generate_dataset(
            args.n_covid,
            args.n_cap,
            args.out,
            ratio_law=RatioLaw(),
            seed=args.seed,
            shape=tuple(args.shape),
            spacing=tuple(spacing),
        )
        print(f"wrote {len(manifest)} phantoms under {args.out}")
        return 0

    if args.command == "preprocess":
        config = PreprocessConfig(
            target_spacing=tuple(args.target_spacing), target_shape=tuple(args.target_shape)
        )
        manifest = load_manifest(args.manifest)
        for record in manifest.records:
            sample = load_or_preprocess(record, config, args.cache_dir)
            print(f"{sample.scan_id}: shape {sample.image.shape}, ratio {sample.ratio:.6f}")
        return 0

    if args.command == "train":
        config = harness.TrainConfig.from_json(args.config)
        if args.strategy is not None:
            config = dataclasses.replace(config, sampling_strategy=args.strategy)
        result = harness.train(config)
        print(
            f"best epoch {result.best_epoch} "
            f"(val AUC {result.best_val_auc:.4f}) -> {result.best_checkpoint}"
        )
        return 0

    if args.command == "cross-validate":
        config = harness.TrainConfig.from_json(args.config)
        result = harness.cross_validate(config, k=args.k)
        ds = result.overall["DS"]
        print(json.dumps({k: v.to_dict() for k, v in result.overall.items()}, indent=2))
        print(f"combined DS AUC {ds.auc:.4f} over {ds.n} scans -> {result.report_path}")
        return 0

    if args.command == "evaluate":
        result = harness.evaluate(
            args.us_ckpt,
            args.ss_ckpt,
            args.manifest,
            cache_dir=args.cache_dir,
            out_path=args.out,
        )
        print(json.dumps(result.overall.to_dict(), indent=2))
        print(f"report written to {args.out}")
        return 0

    if args.command == "export-attention":
        written = harness.export_attention(
            args.ckpt,
            args.manifest,
            args.out,
            include_grad_cam=args.grad_cam,
            cache_dir=args.cache_dir,
        )
        print(f"wrote {len(written)} files under {args.out}")
        return 0

    raise AssertionError(f"unhandled command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
