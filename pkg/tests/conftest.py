import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cosalkit.backend import ToyBackend  # noqa: E402


@pytest.fixture(scope="session")
def toy():
    return ToyBackend(seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def block_image(rng):
    """64x64 RGB image constant on the toy backend's 8x8 pooling blocks."""
    coarse = rng.random((8, 8, 3))
    return np.repeat(np.repeat(coarse, 8, axis=0), 8, axis=1)
