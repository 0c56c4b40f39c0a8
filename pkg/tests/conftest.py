import numpy as np
import pytest

from clustergan.latent import make_rng


@pytest.fixture
def rng():
    return make_rng(1234)


def rel_err(a, b, floor=1e-6):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def sampled_fd_check(loss_fn, param, n_coords, rng, h=1e-5):
    """Analytic gradient (already in ``param.grad``) vs central differences at a
    random subset of coordinates. Returns (analytic, numeric) arrays."""
    flat = param.data.reshape(-1)
    idx = rng.choice(flat.size, size=min(n_coords, flat.size), replace=False)
    analytic = param.grad.reshape(-1)[idx].copy()
    numeric = np.empty(idx.size)
    for j, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + h
        fp = loss_fn()
        flat[i] = orig - h
        fm = loss_fn()
        flat[i] = orig
        numeric[j] = (fp - fm) / (2 * h)
    return analytic, numeric
