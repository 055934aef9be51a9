"""Desk-scale detector training, portable export, and golden fixtures.

Companion package to the mitodet pipeline; the two talk exclusively through
mitodet's file formats (dataset manifest, detection interchange JSON, and the
TorchScript model + sidecar contract).
"""

from .recipe import TrainRecipe

__version__ = "0.1.0"

__all__ = ["TrainRecipe", "__version__"]
