import numpy as np
import pytest

from neighborcast import tensor as T


@pytest.fixture(autouse=True)
def _debug_checks():
    # every forward op in the suite asserts finite outputs
    T.debug_checks = True
    yield
    T.debug_checks = False


def finite_diff_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of one array.

    Mutates entries of ``x`` in place one at a time and restores them, so
    ``f`` must read ``x`` afresh on every call.
    """
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def max_rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-5) -> float:
    # floor guards coordinates whose true gradient is (near-)zero, where the
    # central difference is pure cancellation noise
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / scale))
