import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from spineseg.fusion import FusionConfig
from spineseg.network import ModelConfig


@pytest.fixture(autouse=True, scope="session")
def single_threaded_blas():
    with threadpool_limits(limits=1):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return ModelConfig(num_classes=3, embed_dim=8, depths=(2,), heads=(2,), window=2,
                       fusion=FusionConfig((1, 3, 5), 1, 4), seed=0)


@pytest.fixture
def two_stage_config():
    return ModelConfig(num_classes=3, embed_dim=6, depths=(2, 1), heads=(2, 3), window=2,
                       fusion=FusionConfig((1, 3), 1, 3), seed=3)


def numeric_grad(f, x, h=1e-4):
    """Central differences of scalar ``f()`` w.r.t. every element of ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def max_rel_err(a, b, floor=1e-8):
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))
