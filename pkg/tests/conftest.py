import numpy as np
import pytest

from pap.nets import Model


def central_diff(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar ``f`` at ``x`` (float64)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f(x)
        flat[i] = old - h
        down = f(x)
        flat[i] = old
        gf[i] = (up - down) / (2 * h)
    return g


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def tiny_model(seed: int = 0, num_classes: int = 3, dtype=np.float64) -> Model:
    """Five-block model on 3x8x8 inputs with randomised batchnorm statistics."""
    m = Model.init(
        num_classes, channels=(3, 4, 4, 5, 5), image_size=8, pools=(True, True, False, False, False), seed=seed, dtype=dtype
    )
    rng = np.random.default_rng(seed + 1000)
    for b in m.blocks:
        c = len(b.gamma)
        b.gamma[:] = rng.uniform(0.5, 1.5, c)
        b.beta[:] = rng.uniform(0.1, 0.4, c)
        b.running_mean[:] = rng.normal(0, 0.1, c)
        b.running_var[:] = rng.uniform(0.5, 1.5, c)
    return m


@pytest.fixture
def model64():
    return tiny_model(0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
