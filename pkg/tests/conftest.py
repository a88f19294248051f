import numpy as np
import pytest

from data import build_dataset
from imgio import RadianceImage
from models import GeneratorConfig, LossWeights, TrainConfig


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def radiance_ramp():
    """16x16 scene spanning four decades of radiance, log-uniform along x."""
    row = np.logspace(-2, 2, 16)
    data = np.repeat(np.tile(row, (16, 1))[..., None], 3, axis=2)
    data[..., 0] *= 1.1
    data[..., 2] *= 0.9
    return RadianceImage(data)


@pytest.fixture
def tiny_generator_config():
    return GeneratorConfig(size=48, n_objects=3, max_parallax_px=3.0)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("dataset")
    config = GeneratorConfig(size=48, n_objects=3, max_parallax_px=3.0)
    manifest = build_dataset(5, root, config, seed=3)
    return root, manifest


@pytest.fixture
def tiny_train_config():
    return TrainConfig(
        steps=3,
        batch_size=2,
        crop_size=32,
        widths=[4, 8, 16, 32],
        disc_width=4,
        log_every=1,
        seed=0,
        loss=LossWeights(alpha=1.0, beta=1e-5),
    )
