import os

import numpy as np
import pytest

from attention_clusters import flashmnist as fm

MNIST_DIR = os.environ.get("ATTNCLUSTERS_MNIST", os.path.join(os.environ.get("ATTNCLUSTERS_DATA", "/root/data"), "mnist"))


def have_mnist():
    return all(os.path.exists(os.path.join(MNIST_DIR, name)) or os.path.exists(os.path.join(MNIST_DIR, name + ".gz"))
               for pair in fm.MNIST_FILES.values() for name in pair)


requires_mnist = pytest.mark.skipif(not have_mnist(), reason=f"MNIST IDX files not found in {MNIST_DIR}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_pool():
    """A synthetic stand-in for MNIST: three images per digit."""
    r = np.random.default_rng(99)
    images = r.integers(0, 256, size=(30, 28, 28), dtype=np.uint8)
    labels = np.repeat(np.arange(10, dtype=np.uint8), 3)
    return fm.MnistSet(images, labels)


@pytest.fixture(scope="session")
def noise_dist(tiny_pool):
    return fm.build_noise_distribution(tiny_pool)
