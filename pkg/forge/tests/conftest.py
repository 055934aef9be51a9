"""Session fixtures: one synthetic patch set and one trained/exported model."""

import pytest

from mitoforge.data import synthesize_patch_set
from mitoforge.export import export_model
from mitoforge.recipe import TrainRecipe
from mitoforge.train import train

N_PATCHES = 48  # 12 validation patches at the default 25% split
SEED = 11


@pytest.fixture(scope="session")
def patch_set(tmp_path_factory):
    root = tmp_path_factory.mktemp("patchset")
    manifest = synthesize_patch_set(root, n_patches=N_PATCHES, seed=3)
    return manifest


@pytest.fixture(scope="session")
def trained(patch_set):
    """A short fine-tune shared by the export / golden / replay tests."""
    return train(patch_set, TrainRecipe(), backbone="compact", seed=SEED, epochs_override=2)


@pytest.fixture(scope="session")
def exported(trained, tmp_path_factory):
    out_dir = tmp_path_factory.mktemp("export")
    model_path, sidecar_path = export_model(
        trained.model,
        out_dir,
        input_size=256,
        recipe=TrainRecipe(),
        extra={"backbone": "compact", "seed": SEED},
    )
    return model_path, sidecar_path
