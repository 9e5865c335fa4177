import numpy as np
import pytest

from dualattn import autodiff as ad


def finite_diff(f, arr, eps=1e-6):
    """Central finite differences of scalar f() w.r.t. arr, mutated in place."""
    grad = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def rel_err(g_ad, g_fd):
    denom = np.maximum(np.abs(g_fd), 1e-8)
    return float(np.max(np.abs(g_ad - g_fd) / denom))


def check_gradients(build_loss, arrays, tol=1e-4, eps=1e-6):
    """build_loss() must rebuild the graph from the *current* array values,
    registering each array in ``arrays`` (name -> ndarray) as a parameter,
    and return (loss Tensor, {name: param Tensor}, tape)."""
    loss, pt, tape = build_loss()
    gmap = ad.backward(loss, tape)
    worst = {}
    for name, arr in arrays.items():
        g_ad = gmap[pt[name].node_id].data
        g_fd = finite_diff(lambda: float(build_loss()[0].data), arr, eps)
        worst[name] = rel_err(g_ad, g_fd)
    return worst


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(12345))
