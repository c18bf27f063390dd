import numpy as np
import pytest

from pertattr.fixtures import generate_shapes
from pertattr.tinycnn import train_tiny_cnn


@pytest.fixture(scope="session")
def shape_samples():
    """The bundled 200-image planted-shape fixture."""
    return generate_shapes(200, 32, 0)


@pytest.fixture(scope="session")
def trained(shape_samples):
    """Seed-0 TinyCnn trained on the shapes fixture, with its loss history."""
    images = np.stack([s.image for s in shape_samples])
    labels = np.array([s.class_id for s in shape_samples])
    model, history = train_tiny_cnn((images, labels), seed=0)
    return model, history


@pytest.fixture(scope="session")
def eval_samples():
    """Held-out planted-shape images (same distribution, fresh seed)."""
    return generate_shapes(200, 32, 1)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
