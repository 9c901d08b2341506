"""Numpy implementations of the hot kernels.

Used when the compiled extension is unavailable or when
``TTTMEM_PURE_PYTHON=1`` is set. Signatures match ``_ckernels`` exactly.
"""

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327


def gelu_fwd(h):
    """Exact (erf) GELU and its derivative, elementwise."""
    h = np.asarray(h)
    cdf = 0.5 * (1.0 + erf(h * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * h * h)
    return h * cdf, cdf + h * pdf


def layer_norm_rows(y, gain, bias, eps):
    """Row-wise layer norm. Returns (out, normalized, inv_std per row)."""
    mean = y.mean(axis=1, keepdims=True)
    cen = y - mean
    var = (cen * cen).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    yhat = cen * inv_std
    return yhat * gain + bias, yhat, inv_std[:, 0]


def ln_project(g, yhat, inv_std):
    """Apply the (symmetric) Jacobian of the normalization map to rows of ``g``.

    out = inv_std * (g - mean(g) - yhat * mean(g * yhat))
    """
    mg = g.mean(axis=1, keepdims=True)
    mgy = (g * yhat).mean(axis=1, keepdims=True)
    return (g - mg - yhat * mgy) * inv_std[:, None]


def adjacent_cosine(z):
    """cos(z[n], z[n+1]) for n < rows-1; the last entry is -inf.

    Zero-norm rows give similarity 0.
    """
    n = z.shape[0]
    out = np.full(n, -np.inf, dtype=np.float64)
    if n < 2:
        return out
    z = np.asarray(z, dtype=np.float64)
    norms = np.sqrt(np.einsum("ij,ij->i", z, z))
    dots = np.einsum("ij,ij->i", z[:-1], z[1:])
    den = norms[:-1] * norms[1:]
    with np.errstate(invalid="ignore", divide="ignore"):
        sim = np.where(den > 0.0, dots / np.where(den > 0.0, den, 1.0), 0.0)
    out[:-1] = sim
    return out


def prompt_importance(attn):
    """Head-mean then prompt-sum of an (H, S, C) attention block -> (C,)."""
    h = attn.shape[0]
    if h == 0:
        return np.zeros(attn.shape[2])
    return attn.sum(axis=(0, 1), dtype=np.float64) / h
