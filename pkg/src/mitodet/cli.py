"""Command-line entry point wiring the pipeline stages into subcommands.

Config precedence: explicit flags > --config file > defaults. The merged
RunConfig is persisted into every run directory, and identical configs over
identical inputs reproduce byte-identical outputs.
"""

from __future__ import annotations

import argparse
import io
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from .backends import OracleNoise, make_backend
from .config import RunConfig
from .evaluation import COCO_THRESHOLDS, evaluate
from .formats import (
    Manifest,
    detections_to_records,
    load_detections,
    save_detections,
    write_bytes_atomic,
    write_json_atomic,
)
from .ingest import IngestError, build_dataset, dataset_to_manifest, discover_records
from .runner import build_patch_manifest, load_image, resolve_target_stats, run_detection
from .stain import ChannelStats, channel_stats, fit_target, reinhard_map
from .tiling import extract_patch, patch_name, plan_grid

log = logging.getLogger(__name__)

# flag name -> (RunConfig field, argparse kwargs); help text doubles as docs
_FLAGS = {
    "--annotations": ("annotations", dict(help="directory of per-slide annotation CSVs")),
    "--images": ("images", dict(help="directory of slide images")),
    "--in": ("images", dict(help="directory of input images")),
    "--manifest": ("manifest", dict(help="dataset manifest JSON")),
    "--detections": ("detections", dict(help="detection interchange JSON")),
    "--target": ("target", dict(help="normalization target: reference image or stats JSON")),
    "--out": ("out", dict(help="output directory (ingest also accepts a manifest.json path)")),
    "--box-side": ("box_side", dict(type=float, help="side of the square box derived from each centroid")),
    "--mitosis-threshold": ("mitosis_threshold", dict(type=float, help="confidence at or above which a label is mitotic")),
    "--split": ("split", dict(type=float, help="train fraction of the slide-level split")),
    "--patch-size": ("patch_size", dict(type=int, help="tile side in pixels (e.g. 256, 512, 1024)")),
    "--overlap": ("overlap", dict(type=int, help="tile overlap in pixels (0 = partition)")),
    "--min-visible": ("min_visible", dict(type=float, help="fraction of a box that must fall inside a patch to keep it")),
    "--normalization": ("normalization", dict(choices=("off", "reinhard"), help="color normalization applied before tiling")),
    "--epsilon": ("epsilon", dict(type=float, help="divisor floor for constant channels")),
    "--backend": ("backend", dict(help="detector backend: oracle | blob | model:PATH")),
    "--score-threshold": ("score_threshold", dict(type=float, help="minimum score a backend detection must reach")),
    "--max-detections": ("max_detections", dict(type=int, help="per-image detection cap (0 = unlimited)")),
    "--merge-iou": ("merge_iou", dict(type=float, help="IoU at which same-class detections merge across patches")),
    "--display-threshold": ("display_threshold", dict(type=float, help="minimum score for a box to be drawn")),
    "--render": ("render", dict(action="store_true", help="write annotated slide images")),
    "--oracle-drop": ("oracle_drop", dict(type=float, help="oracle noise: probability of missing a true box")),
    "--oracle-jitter": ("oracle_jitter", dict(type=float, help="oracle noise: box jitter sigma in pixels")),
    "--oracle-spurious": ("oracle_spurious", dict(type=float, help="oracle noise: spurious boxes per patch")),
    "--eval-mode": ("eval_mode", dict(choices=("slide", "patch"), help="evaluation granularity")),
    "--iou": ("eval_iou", dict(type=float, help="evaluate at a single IoU threshold")),
    "--seed": ("seed", dict(type=int, help="seed for every random choice in the run")),
    "--jobs": ("jobs", dict(type=int, help="worker threads (0 = available cores)")),
}

_SUBCOMMAND_FLAGS = {
    "ingest": ["--annotations", "--images", "--box-side", "--mitosis-threshold", "--split", "--seed", "--out"],
    "normalize": ["--target", "--in", "--out", "--epsilon"],
    "tile": ["--manifest", "--patch-size", "--overlap", "--min-visible", "--out", "--seed"],
    "detect": [
        "--manifest", "--backend", "--patch-size", "--overlap", "--min-visible", "--merge-iou",
        "--score-threshold", "--max-detections", "--normalization", "--target", "--epsilon",
        "--render", "--display-threshold", "--oracle-drop", "--oracle-jitter", "--oracle-spurious",
        "--eval-mode", "--seed", "--jobs", "--out",
    ],
    "evaluate": ["--manifest", "--detections", "--iou", "--eval-mode", "--max-detections", "--out"],
    "pipeline": [
        "--annotations", "--images", "--box-side", "--mitosis-threshold", "--split",
        "--patch-size", "--overlap", "--min-visible", "--normalization", "--target", "--epsilon",
        "--backend", "--score-threshold", "--max-detections", "--merge-iou",
        "--render", "--display-threshold", "--oracle-drop", "--oracle-jitter", "--oracle-spurious",
        "--eval-mode", "--iou", "--seed", "--jobs", "--out",
    ],
}

_SUBCOMMAND_HELP = {
    "ingest": "parse annotation CSVs and images into a dataset manifest",
    "normalize": "match image color statistics to a target image",
    "tile": "export patches and a patch-level manifest for a tiling plan",
    "detect": "run a detector over tiled slides and aggregate results",
    "evaluate": "score detections against a manifest",
    "pipeline": "ingest, detect, and evaluate in one run directory",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mitodet", description="whole-slide mitotic cell detection pipeline"
    )
    parser.add_argument("--version", action="version", version=f"mitodet {__version__}")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for command, flag_names in _SUBCOMMAND_FLAGS.items():
        sub = subparsers.add_parser(command, help=_SUBCOMMAND_HELP[command])
        sub.add_argument("--config", default=None, help="key=value config file to start from")
        for flag in flag_names:
            field, kwargs = _FLAGS[flag]
            sub.add_argument(flag, dest=field, default=argparse.SUPPRESS, **kwargs)
        if command in ("evaluate", "pipeline"):
            sub.add_argument(
                "--coco-sweep",
                action="store_true",
                default=argparse.SUPPRESS,
                dest="coco_sweep",
                help="evaluate over the ten-threshold IoU sweep (the default)",
            )
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    base = RunConfig.load(args.config) if args.config else RunConfig()
    skip = {"command", "config", "coco_sweep"}
    overrides = {k: v for k, v in vars(args).items() if k not in skip}
    if vars(args).get("coco_sweep"):
        overrides["eval_iou"] = 0.0
    return base.merged(overrides).validate()


def save_png(path: Path, pixels: np.ndarray) -> None:
    buffer = io.BytesIO()
    Image.fromarray(pixels).save(buffer, format="PNG")
    write_bytes_atomic(path, buffer.getvalue())


def _require(cfg: RunConfig, *names: str) -> None:
    for name in names:
        if not getattr(cfg, name):
            raise ValueError(f"missing required input --{name.replace('_', '-')}")


def _snapshot(cfg: RunConfig, out_dir: Path) -> None:
    cfg.save(out_dir / "run_config.txt")


def _manifest_out_path(cfg: RunConfig, out_dir: Path) -> Path:
    if cfg.out and cfg.out.endswith(".json"):
        return Path(cfg.out)
    return out_dir / "manifest.json"


def cmd_ingest(cfg: RunConfig) -> int:
    _require(cfg, "annotations", "images")
    out_dir = cfg.out_dir("ingest")
    records = discover_records(cfg.images, cfg.annotations)
    dataset = build_dataset(
        records,
        box_side=cfg.box_side,
        split_ratio=cfg.split,
        seed=cfg.seed,
        mitosis_threshold=cfg.mitosis_threshold,
    )
    manifest = dataset_to_manifest(dataset)
    manifest_path = _manifest_out_path(cfg, out_dir)
    manifest.save(manifest_path)
    _snapshot(cfg, out_dir)
    print(
        f"ingested {len(records)} slides -> {len(dataset.train)} train / "
        f"{len(dataset.validation)} validation, {len(manifest.annotations)} annotations"
    )
    print(f"manifest: {manifest_path}")
    return 0


def cmd_normalize(cfg: RunConfig) -> int:
    _require(cfg, "target", "images")
    out_dir = cfg.out_dir("normalize")
    out_dir.mkdir(parents=True, exist_ok=True)
    if cfg.target.endswith(".json"):
        target_stats = ChannelStats.load(cfg.target)
    else:
        target_stats = fit_target(cfg.target)
    target_stats.save(out_dir / "target_stats.json")
    count = 0
    for path in sorted(Path(cfg.images).iterdir()):
        if path.suffix.lower() not in (".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp"):
            continue
        pixels = load_image(path)
        mapped = reinhard_map(pixels, channel_stats(pixels), target_stats, cfg.epsilon)
        save_png(out_dir / f"{path.stem}.png", mapped)
        count += 1
    if count == 0:
        raise ValueError(f"no images found under {cfg.images}")
    _snapshot(cfg, out_dir)
    print(f"normalized {count} images -> {out_dir}")
    return 0


def cmd_tile(cfg: RunConfig) -> int:
    _require(cfg, "manifest")
    out_dir = cfg.out_dir("tile")
    manifest = Manifest.load(cfg.manifest)
    patch_manifest, empty_patches = build_patch_manifest(manifest, cfg, patches_root="patches")
    grids = {}
    for entry in manifest.images:
        slide = load_image(entry.path)
        grid = plan_grid(entry.width, entry.height, cfg.patch_size, cfg.overlap)
        grids[entry.id] = {"rows": grid.rows, "cols": grid.cols, "width": entry.width, "height": entry.height}
        for spec in grid.specs():
            save_png(out_dir / "patches" / f"{patch_name(entry.id, spec)}.png",
                     extract_patch(slide, spec, grid.pad_color))
    patch_manifest.save(out_dir / "patch_manifest.json")
    write_json_atomic(
        out_dir / "tiles.json",
        {
            "patch_size": cfg.patch_size,
            "overlap": cfg.overlap,
            "pad_color": [255, 255, 255],
            "min_visible": cfg.min_visible,
            "empty_patches": empty_patches,
            "slides": grids,
        },
    )
    _snapshot(cfg, out_dir)
    print(
        f"tiled {len(manifest.images)} slides into {len(patch_manifest.images)} patches "
        f"({empty_patches} without annotations) -> {out_dir}"
    )
    return 0


def _build_backend(cfg: RunConfig, manifest: Manifest):
    noise = OracleNoise(
        jitter_sigma=cfg.oracle_jitter,
        drop_probability=cfg.oracle_drop,
        spurious_rate=cfg.oracle_spurious,
    )
    return make_backend(
        cfg.backend,
        manifest=manifest,
        noise=noise,
        seed=cfg.seed,
        score_threshold=cfg.score_threshold,
        max_detections=cfg.max_detections or None,
    )


def _detect_into(cfg: RunConfig, manifest: Manifest, out_dir: Path):
    backend = _build_backend(cfg, manifest)
    target_stats = resolve_target_stats(cfg)
    if target_stats is not None:
        target_stats.save(out_dir / "target_stats.json")
    run = run_detection(manifest, backend, cfg, target_stats)
    per_image = {image_id: sd.detections for image_id, sd in run.slide_detections.items()}
    save_detections(out_dir / "detections.json", per_image)
    if cfg.eval_mode == "patch":
        save_detections(out_dir / "patch_detections.json", run.patch_detections)
    if cfg.render:
        for entry in manifest.images:
            slide = load_image(entry.path)
            if target_stats is not None:
                slide = reinhard_map(slide, target=target_stats, epsilon=cfg.epsilon)
            from .aggregate import render as render_slide

            annotated = render_slide(
                slide, run.slide_detections[entry.id], display_threshold=cfg.display_threshold
            )
            save_png(out_dir / "renders" / f"{entry.id}.png", annotated)
            sidecar = {
                "image_id": entry.id,
                "detections": detections_to_records({entry.id: run.slide_detections[entry.id].detections}),
                "sources": [
                    [patch_name(entry.id, spec) for spec in specs]
                    for specs in run.slide_detections[entry.id].sources
                ],
            }
            write_json_atomic(out_dir / "renders" / f"{entry.id}.json", sidecar)
    return run


def cmd_detect(cfg: RunConfig) -> int:
    _require(cfg, "manifest")
    out_dir = cfg.out_dir("detect")
    manifest = Manifest.load(cfg.manifest)
    run = _detect_into(cfg, manifest, out_dir)
    _snapshot(cfg, out_dir)
    total = sum(len(sd) for sd in run.slide_detections.values())
    print(
        f"detected {total} cells over {len(manifest.images)} slides "
        f"({run.patches_processed} patches) -> {out_dir / 'detections.json'}"
    )
    return 0


def _thresholds(cfg: RunConfig) -> tuple[float, ...]:
    return (cfg.eval_iou,) if cfg.eval_iou > 0 else COCO_THRESHOLDS


def cmd_evaluate(cfg: RunConfig) -> int:
    _require(cfg, "manifest", "detections")
    out_dir = cfg.out_dir("evaluate")
    manifest = Manifest.load(cfg.manifest)
    detections = load_detections(cfg.detections)
    report = evaluate(
        detections,
        manifest,
        thresholds=_thresholds(cfg),
        granularity=cfg.eval_mode,
        max_detections=cfg.max_detections or None,
    )
    write_json_atomic(out_dir / "report.json", report.to_json_dict())
    _snapshot(cfg, out_dir)
    print(report.table())
    print(f"report: {out_dir / 'report.json'}")
    return 0


def cmd_pipeline(cfg: RunConfig) -> int:
    _require(cfg, "annotations", "images")
    out_dir = cfg.out_dir("pipeline")
    out_dir.mkdir(parents=True, exist_ok=True)

    records = discover_records(cfg.images, cfg.annotations)
    dataset = build_dataset(
        records,
        box_side=cfg.box_side,
        split_ratio=cfg.split,
        seed=cfg.seed,
        mitosis_threshold=cfg.mitosis_threshold,
    )
    manifest = dataset_to_manifest(dataset)
    manifest.save(out_dir / "manifest.json")
    print(
        f"ingested {len(records)} slides -> {len(dataset.train)} train / "
        f"{len(dataset.validation)} validation"
    )

    run = _detect_into(cfg, manifest, out_dir)

    if cfg.eval_mode == "patch":
        patch_manifest, empty_patches = build_patch_manifest(manifest, cfg, patches_root="patches")
        patch_manifest.save(out_dir / "patch_manifest.json")
        print(f"patch-level evaluation over {len(patch_manifest.images)} patches "
              f"({empty_patches} empty)")
        report = evaluate(
            run.patch_detections,
            patch_manifest,
            thresholds=_thresholds(cfg),
            granularity="patch",
            max_detections=cfg.max_detections or None,
        )
    else:
        per_image = {image_id: sd.detections for image_id, sd in run.slide_detections.items()}
        report = evaluate(
            per_image,
            manifest,
            thresholds=_thresholds(cfg),
            granularity="slide",
            max_detections=cfg.max_detections or None,
        )
    write_json_atomic(out_dir / "report.json", report.to_json_dict())
    _snapshot(cfg, out_dir)
    print(report.table())
    print(f"artifacts: {out_dir}")
    return 0


_COMMANDS = {
    "ingest": cmd_ingest,
    "normalize": cmd_normalize,
    "tile": cmd_tile,
    "detect": cmd_detect,
    "evaluate": cmd_evaluate,
    "pipeline": cmd_pipeline,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        return _COMMANDS[args.command](cfg)
    except (ValueError, OSError, KeyError, IngestError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
