"""Detector construction: Faster R-CNN heads over a configurable backbone.

The desk-scale default is a compact three-stage conv backbone so a full
train / export / golden cycle runs in seconds on a CPU; `resnet50` gives the
full-size feature extractor when compute allows.
"""

from __future__ import annotations

import torch.nn as nn
from torchvision.models.detection import FasterRCNN
from torchvision.models.detection.anchor_utils import AnchorGenerator
from torchvision.models.detection.backbone_utils import resnet_fpn_backbone

NUM_CLASSES = 3  # background + mitotic + nonmitotic


def _compact_backbone() -> nn.Sequential:
    layers = []
    channels = [3, 16, 32, 64]
    for c_in, c_out in zip(channels, channels[1:]):
        layers += [
            nn.Conv2d(c_in, c_out, kernel_size=3, stride=2, padding=1),
            nn.BatchNorm2d(c_out),
            nn.ReLU(inplace=True),
        ]
    backbone = nn.Sequential(*layers)
    backbone.out_channels = channels[-1]
    return backbone


def build_model(backbone: str = "compact", image_size: int = 256) -> FasterRCNN:
    """A two-class detector ready for fine-tuning (random init, no weights)."""
    if backbone == "compact":
        anchor_generator = AnchorGenerator(
            sizes=((24, 40, 64),), aspect_ratios=((0.7, 1.0, 1.4),)
        )
        return FasterRCNN(
            _compact_backbone(),
            num_classes=NUM_CLASSES,
            rpn_anchor_generator=anchor_generator,
            min_size=image_size,
            max_size=image_size,
        )
    if backbone == "resnet50":
        return FasterRCNN(
            resnet_fpn_backbone("resnet50", weights=None),
            num_classes=NUM_CLASSES,
            min_size=image_size,
            max_size=image_size,
        )
    raise ValueError(f"unknown backbone {backbone!r} (expected compact or resnet50)")
