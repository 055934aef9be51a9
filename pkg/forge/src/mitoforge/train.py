"""The fine-tuning loop: seeded SGD with cosine decay and early stopping."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
from torch.utils.data import DataLoader

from .data import PatchDataset, collate, read_manifest
from .metrics import map50
from .model import build_model
from .recipe import TrainRecipe

log = logging.getLogger(__name__)


class EarlyStopper:
    """Stop after `patience` epochs without improvement of the watched metric."""

    def __init__(self, patience: int):
        if patience <= 0:
            raise ValueError("patience must be positive")
        self.patience = patience
        self.best = -float("inf")
        self.stale = 0

    def update(self, metric: float) -> bool:
        """Record one epoch; returns True when training should halt."""
        if metric > self.best:
            self.best = metric
            self.stale = 0
            return False
        self.stale += 1
        return self.stale >= self.patience


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_map50: float


@dataclass
class TrainResult:
    model: torch.nn.Module
    history: list[EpochStats] = field(default_factory=list)
    stopped_early: bool = False
    best_val_map50: float = 0.0

    @property
    def epochs_run(self) -> int:
        return len(self.history)


@torch.no_grad()
def predict(model: torch.nn.Module, images: list[torch.Tensor]) -> list[dict]:
    model.eval()
    outputs = model(images)
    return [
        {
            "boxes": out["boxes"].cpu().numpy(),
            "labels": out["labels"].cpu().numpy(),
            "scores": out["scores"].cpu().numpy(),
        }
        for out in outputs
    ]


def _validation_map(model, loader) -> float:
    predictions = []
    targets = []
    for images, batch_targets in loader:
        predictions.extend(predict(model, list(images)))
        targets.extend(
            {"boxes": t["boxes"].numpy(), "labels": t["labels"].numpy()} for t in batch_targets
        )
    return map50(predictions, targets)


def train(
    manifest_path,
    recipe: TrainRecipe = TrainRecipe(),
    backbone: str = "compact",
    image_size: int = 256,
    batch_size: int = 2,
    seed: int = 0,
    epochs_override: int | None = None,
) -> TrainResult:
    """Fine-tune a detector on a manifest's train split.

    Early stopping watches validation mAP@0.5 per the recipe; the returned
    model carries the best-epoch weights. `epochs_override` shortens runs for
    smoke tests without touching the recipe defaults.
    """
    torch.manual_seed(seed)
    np.random.seed(seed)

    train_entries = read_manifest(manifest_path, split="train")
    val_entries = read_manifest(manifest_path, split="validation")
    if not train_entries:
        raise ValueError(f"manifest {manifest_path} has an empty training split")
    if not any(e.boxes for e in train_entries):
        raise ValueError(f"manifest {manifest_path} has no training annotations")

    generator = torch.Generator().manual_seed(seed)
    train_loader = DataLoader(
        PatchDataset(train_entries, augment=recipe.augmentation == "hflip", seed=seed),
        batch_size=batch_size,
        shuffle=True,
        generator=generator,
        collate_fn=collate,
    )
    val_loader = DataLoader(
        PatchDataset(val_entries, augment=False),
        batch_size=batch_size,
        shuffle=False,
        collate_fn=collate,
    )

    model = build_model(backbone=backbone, image_size=image_size)
    epochs = epochs_override or recipe.epochs
    optimizer = torch.optim.SGD(
        [p for p in model.parameters() if p.requires_grad],
        lr=recipe.learning_rate,
        momentum=recipe.momentum,
    )
    scheduler = (
        torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=epochs)
        if recipe.schedule == "cosine"
        else None
    )
    stopper = EarlyStopper(recipe.early_stop_patience)

    result = TrainResult(model=model)
    best_state = None
    for epoch in range(1, epochs + 1):
        model.train()
        total_loss = 0.0
        batches = 0
        for images, targets in train_loader:
            loss_dict = model(list(images), list(targets))
            loss = sum(loss_dict.values())
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total_loss += float(loss.detach())
            batches += 1
        if scheduler is not None:
            scheduler.step()
        train_loss = total_loss / max(batches, 1)
        val_metric = _validation_map(model, val_loader) if val_entries else 0.0
        result.history.append(EpochStats(epoch, train_loss, val_metric))
        log.info("epoch %d: train loss %.4f, val mAP@0.5 %.4f", epoch, train_loss, val_metric)
        if val_metric > result.best_val_map50 or best_state is None:
            result.best_val_map50 = val_metric
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        if val_entries and stopper.update(val_metric):
            result.stopped_early = True
            log.info("early stop after epoch %d (patience %d)", epoch, recipe.early_stop_patience)
            break
    if best_state is not None:
        model.load_state_dict(best_state)
    return result
