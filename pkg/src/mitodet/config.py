"""Reproducible run configuration.

A RunConfig captures every knob that affects pipeline output plus the stage
input paths, so a persisted snapshot re-runs to byte-identical artifacts.
Serialized as a plain key=value text file; CLI flags override file values,
which override defaults.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path

ENV_OUTPUT_ROOT = "MITODET_OUTPUT_ROOT"

EVAL_MODES = ("slide", "patch")
NORMALIZATIONS = ("off", "reinhard")


@dataclass
class RunConfig:
    # stage inputs
    annotations: str = ""
    images: str = ""
    manifest: str = ""
    detections: str = ""
    target: str = ""  # normalization reference: image or persisted stats JSON
    out: str = ""

    # dataset knobs
    box_side: float = 70.0
    mitosis_threshold: float = 0.5
    split: float = 0.8

    # tiling knobs
    patch_size: int = 256
    overlap: int = 0
    min_visible: float = 0.5

    # normalization
    normalization: str = "off"
    epsilon: float = 1e-6

    # detection knobs
    backend: str = "oracle"
    score_threshold: float = 0.05
    max_detections: int = 0  # 0 = unlimited
    merge_iou: float = 0.5
    display_threshold: float = 0.5
    render: bool = False
    oracle_drop: float = 0.0
    oracle_jitter: float = 0.0
    oracle_spurious: float = 0.0

    # evaluation knobs
    eval_mode: str = "slide"
    eval_iou: float = 0.0  # 0 = the full ten-threshold sweep

    # run control
    seed: int = 0
    jobs: int = 0  # 0 = available cores

    def validate(self) -> "RunConfig":
        if self.patch_size <= 0:
            raise ValueError(f"patch_size must be positive, got {self.patch_size}")
        if not (0 <= self.overlap < self.patch_size):
            raise ValueError(f"overlap must be in [0, patch_size), got {self.overlap}")
        if self.box_side <= 0:
            raise ValueError(f"box_side must be positive, got {self.box_side}")
        if self.eval_mode not in EVAL_MODES:
            raise ValueError(f"eval_mode must be one of {EVAL_MODES}, got {self.eval_mode!r}")
        if self.normalization not in NORMALIZATIONS:
            raise ValueError(
                f"normalization must be one of {NORMALIZATIONS}, got {self.normalization!r}"
            )
        if self.normalization == "reinhard" and not self.target:
            raise ValueError("normalization=reinhard needs a --target reference")
        for name in ("mitosis_threshold", "min_visible", "display_threshold"):
            value = getattr(self, name)
            if not (0.0 <= value <= 1.0):
                raise ValueError(f"{name} must be in [0, 1], got {value}")
        if not (0.0 < self.split < 1.0):
            raise ValueError(f"split must be in (0, 1), got {self.split}")
        if not (0.0 < self.merge_iou <= 1.0):
            raise ValueError(f"merge_iou must be in (0, 1], got {self.merge_iou}")
        if self.jobs < 0 or self.max_detections < 0:
            raise ValueError("jobs and max_detections must be >= 0")
        if self.seed < 0:
            raise ValueError(f"seed must be >= 0, got {self.seed}")
        return self

    def out_dir(self, command: str) -> Path:
        """The run directory: --out, or $MITODET_OUTPUT_ROOT/<command>, or ./runs/<command>."""
        if self.out:
            path = Path(self.out)
            return path.parent if path.suffix == ".json" else path
        root = os.environ.get(ENV_OUTPUT_ROOT, "runs")
        return Path(root) / command

    def effective_jobs(self) -> int:
        return self.jobs if self.jobs > 0 else (os.cpu_count() or 1)

    def to_text(self) -> str:
        lines = [f"{f.name} = {getattr(self, f.name)}" for f in fields(self)]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        values = {}
        types = {f.name: f.type for f in fields(cls)}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected `key = value`, got {line!r}")
            key, _, value = (part.strip() for part in line.partition("="))
            if key not in types:
                raise ValueError(f"config line {lineno}: unknown key {key!r}")
            values[key] = _parse_value(types[key], value)
        return cls(**values)

    def merged(self, overrides: dict) -> "RunConfig":
        known = {f.name for f in fields(self)}
        unknown = set(overrides) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return dataclasses.replace(self, **overrides)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def _parse_value(annotation: str | type, raw: str):
    name = annotation if isinstance(annotation, str) else annotation.__name__
    if name == "bool":
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if name == "int":
        return int(raw)
    if name == "float":
        return float(raw)
    return raw
