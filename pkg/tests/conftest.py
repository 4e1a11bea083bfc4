import numpy as np
import pytest

from regioncontrast.config import RunConfig, TrainConfig
from regioncontrast.images import Image, RegionMap
from regioncontrast.phantoms import PhantomConfig, gen_synthetic_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_phantoms():
    """A dozen 32x32 phantoms shared across cheap pipeline tests."""
    cfg = PhantomConfig(size=32, seed=99)
    images, labels = gen_synthetic_dataset(cfg, 12)
    return cfg, images, labels


@pytest.fixture(scope="session")
def tiny_train_config():
    return TrainConfig(batch_size=4, global_epochs=2, local_epochs=2,
                       finetune_epochs=2, seed=11)


def checkerboard_region_map(h=8, w=8):
    labels = (np.indices((h, w)).sum(axis=0) % 2).astype(np.int64)
    return RegionMap(labels, 2)


@pytest.fixture
def flat_image():
    return Image(np.full((16, 16), 0.5))
