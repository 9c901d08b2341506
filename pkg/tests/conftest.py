import numpy as np
import pytest

from tttmem.numerics import LayerNormParams, MlpParams


def random_mlp(rng, d_in=3, hidden=4, d_out=None, scale=0.5, dtype=np.float64):
    d_out = d_in if d_out is None else d_out
    return MlpParams(
        (scale * rng.standard_normal((d_in, hidden))).astype(dtype),
        (scale * rng.standard_normal(hidden)).astype(dtype),
        (scale * rng.standard_normal((hidden, d_out))).astype(dtype),
        (scale * rng.standard_normal(d_out)).astype(dtype),
    )


def random_ln(rng, d, dtype=np.float64):
    return LayerNormParams((1.0 + 0.3 * rng.standard_normal(d)).astype(dtype),
                           (0.3 * rng.standard_normal(d)).astype(dtype))


def fd_jacobian(fn, w: MlpParams, h=1e-6):
    """Columns d fn(W) / d theta_j by central differences (fn returns an array)."""
    base = w.to_vector()
    cols = []
    for j in range(base.size):
        e = np.zeros_like(base)
        e[j] = h
        fp = fn(MlpParams.from_vector(base + e, w))
        fm = fn(MlpParams.from_vector(base - e, w))
        cols.append(((fp - fm) / (2 * h)).ravel())
    return np.stack(cols, axis=1)


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    den = max(np.linalg.norm(b), 1e-300)
    return float(np.linalg.norm(a - b) / den)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
