import numpy as np
import pytest

from straightflow.field import VelocityField
from straightflow.numerics import RngStream


@pytest.fixture
def rng():
    return RngStream(1234)


def single_layer_field(d, w_block, bias, n_freq=8):
    """v(t, x) = x @ w_block.T + bias; the embedding columns get zero weight."""
    field = VelocityField(d, rng=None, hidden=(), n_freq=n_freq)
    k = 2 * n_freq
    w = np.zeros((d, k + d))
    w[:, k:] = w_block
    field.params = np.concatenate([w.ravel(), np.asarray(bias, np.float64).reshape(d)])
    return field


def central_diff(f, x, i, h=1e-5):
    """Central finite difference of scalar f wrt coordinate i of vector x."""
    xp = np.array(x, dtype=np.float64)
    xm = np.array(x, dtype=np.float64)
    xp[i] += h
    xm[i] -= h
    return (f(xp) - f(xm)) / (2.0 * h)


def rel_err(a, b, floor=1e-8):
    return abs(a - b) / max(abs(a), abs(b), floor)
