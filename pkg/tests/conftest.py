import numpy as np
import pytest

from vlmad.dataset import DefectSpec, FixtureSpec, make_fixture
from vlmad.encoder import EncoderConfig, ToyBackbone


@pytest.fixture(scope="session")
def toy_config() -> EncoderConfig:
    return EncoderConfig(embed_dim=24, patch_grid=(6, 6), text_layers=2, seed=0)


@pytest.fixture(scope="session")
def toy_encoder(toy_config) -> ToyBackbone:
    return ToyBackbone(toy_config)


def separable_set(rng, n_normal, n_defect, hw=48, square=18):
    """Images like the synthetic fixture: mid-gray noise, bright-square defects."""
    images, masks, labels = [], [], []
    for i in range(n_normal + n_defect):
        img = 0.45 + rng.uniform(-0.05, 0.05, (hw, hw))
        mask = np.zeros((hw, hw), dtype=bool)
        if i >= n_normal:
            r, c = rng.integers(1, hw - square, 2)
            img[r : r + square, c : c + square] = 0.92 + rng.uniform(-0.03, 0.03, (square, square))
            mask[r : r + square, c : c + square] = True
        images.append(img)
        masks.append(mask)
        labels.append(int(i >= n_normal))
    return images, masks, labels


@pytest.fixture(scope="session")
def fixture_root(tmp_path_factory):
    """Small two-category on-disk dataset shared by runner/CLI tests."""
    root = tmp_path_factory.mktemp("fixture")
    spec = FixtureSpec(
        categories=("blocks", "panels"),
        image_size=(64, 64),
        train_good=4,
        test_good=3,
        defects=(DefectSpec(name="bright_square", kind="bright_square", count=3, size=24),),
    )
    make_fixture(root, spec, seed=0)
    return root
