import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from spikehalt import tensor as T  # noqa: E402
from spikehalt.model import ModelConfig  # noqa: E402


def numeric_grad(f, arr, step=1e-3):
    """Central differences of scalar ``f()`` wrt every entry of ``arr`` (mutated in place)."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + step
        hi = f()
        arr[i] = old - step
        lo = f()
        arr[i] = old
        g[i] = (hi - lo) / (2 * step)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), 1e-8)))


@pytest.fixture
def f64():
    with T.default_dtype(np.float64):
        yield


@pytest.fixture(autouse=True)
def _clean_graph():
    yield
    T.current_graph().clear()


def tiny_config(**kw):
    base = dict(timesteps=2, blocks=2, image_size=(8, 8), embed_dim=16, heads=2, mlp_ratio=2.0,
                conv_stages=[(8, 3, 1, True), (16, 3, 1, False)], num_classes=3)
    base.update(kw)
    return ModelConfig(**base)


def desk_config(**kw):
    """The reference desk-scale shape: T=4, L=4, D=128, 4 heads, K=64 on 32x32 images."""
    base = dict(timesteps=4, blocks=4, image_size=(32, 32), embed_dim=128, heads=4,
                conv_stages=[(32, 3, 1, True), (128, 3, 1, True)], num_classes=10)
    base.update(kw)
    return ModelConfig(**base)


def train_config(**kw):
    """Reduced width used by the training checks: K=16, D=64."""
    base = dict(timesteps=4, blocks=4, image_size=(32, 32), embed_dim=64, heads=4, mlp_ratio=2.0,
                conv_stages=[(16, 3, 1, True), (32, 3, 1, True), (64, 3, 1, True)], num_classes=3)
    base.update(kw)
    return ModelConfig(**base)


def calibrate(model, x, passes=3):
    """Fit batch-norm running statistics with a few train-mode passes, then switch to eval.

    A fresh model's running stats are (0, 1), which leaves most layers silent.
    """
    model.train()
    with T.no_grad():
        for _ in range(passes):
            model.forward(x, halting=False)
    model.eval()
    return model
