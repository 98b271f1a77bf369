import numpy as np
import pytest

from remote_fusion.tensor import Tensor, default_dtype


def central_difference(f, x: np.ndarray, eps: float = 1e-4) -> np.ndarray:
    """Numeric gradient of scalar ``f`` at ``x`` (``x`` is perturbed in place and restored)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + eps
        up = f()
        flat[i] = keep - eps
        down = f()
        flat[i] = keep
        gflat[i] = (up - down) / (2 * eps)
    return g


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), floor))


@pytest.fixture
def f64():
    with default_dtype(np.float64):
        yield


@pytest.fixture
def gradcheck(f64):
    """``gradcheck(build, *arrays)``: compare autograd against central differences for every input."""

    def run(build, *arrays, eps=1e-4):
        leaves = [Tensor(a, requires_grad=True) for a in arrays]
        out = build(*leaves)
        out.backward()
        worst = 0.0
        for leaf in leaves:
            num = central_difference(lambda: float(build(*leaves).data), leaf.data, eps)
            worst = max(worst, rel_err(leaf.grad, num))
        return worst

    return run
