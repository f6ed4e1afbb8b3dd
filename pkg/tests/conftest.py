import numpy as np
import pytest

from nodule_cloud.phantom import PhantomConfig, gen_phantom
from nodule_cloud.volume import Volume


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def scene():
    return gen_phantom(PhantomConfig(), np.random.default_rng(2024))


def sphere_volume(dims, center_mm, radius_mm, inside=40, outside=-1000, spacing=(1.0, 1.0, 1.0)):
    """Volume with a single ball of ``inside`` HU plus its mask."""
    s = np.asarray(spacing)
    grid = np.meshgrid(*[(np.arange(n) + 0.5) * si for n, si in zip(dims, s)], indexing="ij")
    d2 = sum((g - c) ** 2 for g, c in zip(grid, center_mm))
    mask = d2 <= radius_mm ** 2
    data = np.where(mask, inside, outside).astype(np.int16)
    return Volume(data, tuple(spacing)), mask.astype(np.uint8)
