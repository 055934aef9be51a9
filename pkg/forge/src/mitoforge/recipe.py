"""The training recipe and its sidecar serialization."""

from __future__ import annotations

from dataclasses import asdict, dataclass


@dataclass(frozen=True)
class TrainRecipe:
    """Hyperparameters for fine-tuning; serialized into the exported sidecar."""

    learning_rate: float = 0.005
    schedule: str = "cosine"
    momentum: float = 0.9
    epochs: int = 25
    early_stop_patience: int = 5
    augmentation: str = "hflip"
    early_stop_metric: str = "val_map50"

    def __post_init__(self) -> None:
        if self.learning_rate <= 0 or self.momentum < 0:
            raise ValueError("learning_rate must be > 0 and momentum >= 0")
        if self.epochs <= 0 or self.early_stop_patience <= 0:
            raise ValueError("epochs and early_stop_patience must be positive")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.augmentation not in ("hflip", "none"):
            raise ValueError(f"unknown augmentation {self.augmentation!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: dict) -> "TrainRecipe":
        return cls(**payload)
