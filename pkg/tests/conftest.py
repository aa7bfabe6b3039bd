import numpy as np
import pytest

from mhe import tensor as T


@pytest.fixture
def f64():
    """Run a test in 64-bit precision mode, restoring the default after."""
    with T.precision("f64"):
        yield


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """Max elementwise relative error with an absolute floor near zero."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.abs(a), np.abs(b))
    small = denom < 1e-7
    err = np.abs(a - b) / np.where(small, 1.0, denom)
    return float(err.max()) if err.size else 0.0


def fd_gradient(f, arr: np.ndarray, eps: float = 1e-4,
                indices=None) -> np.ndarray:
    """Central finite differences of scalar f w.r.t. selected entries of arr."""
    flat = arr.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    grad = np.zeros(flat.size)
    for i in idx:
        saved = flat[i]
        flat[i] = saved + eps
        hi = f()
        flat[i] = saved - eps
        lo = f()
        flat[i] = saved
        grad[i] = (hi - lo) / (2 * eps)
    return grad.reshape(arr.shape)
