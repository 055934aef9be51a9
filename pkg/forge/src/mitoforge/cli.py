"""Small CLI: synthesize a patch set, train + export, emit goldens."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .data import read_manifest, synthesize_patch_set
from .export import export_model
from .goldens import emit_goldens
from .recipe import TrainRecipe
from .train import train


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mitoforge", description="desk-scale detector forge")
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="write a synthetic labeled patch set")
    synth.add_argument("--out", required=True, help="output directory")
    synth.add_argument("--patches", type=int, default=24, help="number of patches")
    synth.add_argument("--patch-size", type=int, default=256, help="patch side in pixels")
    synth.add_argument("--seed", type=int, default=0, help="generator seed")

    run = sub.add_parser("run", help="train on a manifest, export, and emit goldens")
    run.add_argument("--manifest", required=True, help="dataset manifest JSON")
    run.add_argument("--out", required=True, help="output directory")
    run.add_argument("--backbone", default="compact", choices=("compact", "resnet50"),
                     help="feature extractor")
    run.add_argument("--epochs", type=int, default=0,
                     help="override the recipe's epoch count (0 = recipe default)")
    run.add_argument("--patch-size", type=int, default=256, help="model input side in pixels")
    run.add_argument("--seed", type=int, default=0, help="training seed")
    run.add_argument("--goldens", type=int, default=10, help="golden patches to emit")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "synth":
            manifest = synthesize_patch_set(
                Path(args.out), n_patches=args.patches, patch_size=args.patch_size, seed=args.seed
            )
            print(f"synthetic patch set: {manifest}")
            return 0
        recipe = TrainRecipe()
        result = train(
            args.manifest,
            recipe=recipe,
            backbone=args.backbone,
            image_size=args.patch_size,
            seed=args.seed,
            epochs_override=args.epochs or None,
        )
        out_dir = Path(args.out)
        model_path, sidecar_path = export_model(
            result.model,
            out_dir,
            input_size=args.patch_size,
            recipe=recipe,
            extra={
                "backbone": args.backbone,
                "seed": args.seed,
                "epochs_run": result.epochs_run,
                "stopped_early": result.stopped_early,
                "best_val_map50": result.best_val_map50,
            },
        )
        print(f"exported: {model_path} (+ {sidecar_path.name})")
        entries = read_manifest(args.manifest, split="validation")
        golden_dir = emit_goldens(
            model_path, sidecar_path, entries[: args.goldens], out_dir / "goldens"
        )
        print(f"goldens: {golden_dir}")
        return 0
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
