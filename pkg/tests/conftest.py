import numpy as np
import pytest

from dncl.rng import SplitMix64


@pytest.fixture
def rng():
    return SplitMix64(20240531)


def l2_closure(target):
    def closure(out):
        r = out - target
        return 0.5 * float((r * r).sum()), r

    return closure


def numeric_grad(f, x, eps=1e-6):
    """Central differences of a scalar function over every entry of ``x`` (in place)."""
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for j in range(flat.size):
        old = flat[j]
        flat[j] = old + eps
        fp = f()
        flat[j] = old - eps
        fm = f()
        flat[j] = old
        gf[j] = (fp - fm) / (2 * eps)
    return g


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))))
