import numpy as np
import pytest

from glowmatch.backbone import init_model
from glowmatch.synthgen import generate_pair


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model64():
    """Small float64 model for gradient checks: L=3, d=8, h=2."""
    return init_model(np.random.default_rng(7), layers=3, d=8, h=2, d_in=6,
                      dtype=np.float64)


@pytest.fixture
def small_model32():
    """Inference-sized float32 model: L=3, d=32, h=4."""
    return init_model(np.random.default_rng(11), layers=3, d=32, h=4, d_in=12,
                      dtype=np.float32)


def toy_pair(seed: int, n_points: int = 6, d_in: int = 6, inlier_ratio: float = 0.7,
             noise: float = 0.25):
    """A tiny synthetic pair for gradient and invariant checks."""
    rng = np.random.default_rng(seed)
    return generate_pair(rng, max(n_points, 8), inlier_ratio, noise, d_in=d_in)


@pytest.fixture
def pair64():
    sp = toy_pair(3, n_points=8)
    return sp
