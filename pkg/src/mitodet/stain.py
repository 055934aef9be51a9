"""Per-channel linear stain color normalization.

Each R, G, B channel is shifted and scaled so its mean and standard deviation
match a target image's: mapped = (v - src_mean) / src_std * tgt_std + tgt_mean.
Statistics are population statistics over the whole frame, computed before
tiling. The transform runs directly on the RGB channels, not in a decorrelated
color space.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .formats import write_json_atomic

log = logging.getLogger(__name__)

DEFAULT_EPSILON = 1e-6


@dataclass(frozen=True)
class ChannelStats:
    """Per-channel mean and population standard deviation, R,G,B order."""

    mean: tuple[float, float, float]
    std: tuple[float, float, float]

    def __post_init__(self) -> None:
        if len(self.mean) != 3 or len(self.std) != 3:
            raise ValueError("ChannelStats needs exactly three channels")
        if any(s < 0 for s in self.std):
            raise ValueError(f"channel std must be >= 0, got {self.std}")
        if any(not (0.0 <= m <= 255.0) for m in self.mean):
            raise ValueError(f"channel means must lie in [0, 255], got {self.mean}")

    def to_dict(self) -> dict:
        return {"mean": list(self.mean), "std": list(self.std)}

    @classmethod
    def from_dict(cls, payload: dict) -> "ChannelStats":
        return cls(mean=tuple(payload["mean"]), std=tuple(payload["std"]))

    def save(self, path: str | Path) -> None:
        self.to_dict()  # validate before touching disk
        write_json_atomic(path, self.to_dict())

    @classmethod
    def load(cls, path: str | Path) -> "ChannelStats":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def _require_rgb(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 image, got shape {image.shape}")
    if image.shape[0] == 0 or image.shape[1] == 0:
        raise ValueError("image has no pixels")
    return image


def channel_stats(image: np.ndarray) -> ChannelStats:
    """Population mean and std per channel over all pixels."""
    image = _require_rgb(image)
    flat = image.reshape(-1, 3).astype(np.float64)
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)  # ddof=0: population
    return ChannelStats(mean=tuple(mean.tolist()), std=tuple(std.tolist()))


def map_channels(
    image: np.ndarray,
    source: ChannelStats,
    target: ChannelStats,
    epsilon: float = DEFAULT_EPSILON,
) -> np.ndarray:
    """The raw per-channel linear map, as float64 and unclamped.

    The divisor is max(source std, epsilon), so a constant channel maps every
    pixel to the target mean.
    """
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    image = _require_rgb(image).astype(np.float64)
    src_mean = np.array(source.mean)
    src_std = np.maximum(np.array(source.std), epsilon)
    tgt_mean = np.array(target.mean)
    tgt_std = np.array(target.std)
    return (image - src_mean) / src_std * tgt_std + tgt_mean


def reinhard_map(
    image: np.ndarray,
    source: ChannelStats | None = None,
    target: ChannelStats | None = None,
    epsilon: float = DEFAULT_EPSILON,
) -> np.ndarray:
    """Match an image's channel statistics to a target's; returns uint8.

    `source` defaults to the image's own statistics. The mapped values are
    clamped to [0, 255] and re-quantized with round-half-away-from-zero.
    """
    image = _require_rgb(image)
    if source is None:
        source = channel_stats(image)
    if target is None:
        raise ValueError("target ChannelStats is required")
    mapped = map_channels(image, source, target, epsilon)
    clamped = np.clip(mapped, 0.0, 255.0)
    # Values are non-negative after clamping, so floor(x + 0.5) rounds half
    # away from zero.
    return np.floor(clamped + 0.5).astype(np.uint8)


def fit_target(reference_image: str | Path) -> ChannelStats:
    """Channel statistics of the normalization target image."""
    try:
        with Image.open(reference_image) as im:
            pixels = np.asarray(im.convert("RGB"))
    except Exception as exc:
        raise ValueError(f"cannot read normalization target {reference_image}: {exc}") from exc
    stats = channel_stats(pixels)
    if any(s == 0.0 for s in stats.std):
        log.warning("normalization target %s has a constant channel", reference_image)
    return stats
