"""Hot kernels with a compiled core and a numpy fallback.

The compiled extension is preferred. Set ``TTTMEM_PURE_PYTHON=1`` to force
the fallback; ``BACKEND`` reports which one was selected at import.
"""

import os

import numpy as np

from . import _pykernels

try:
    if os.environ.get("TTTMEM_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("pure-python backend forced")
    from . import _ckernels as _impl
    BACKEND = "cython"
except ImportError:
    _impl = _pykernels
    BACKEND = "python"

__all__ = [
    "BACKEND",
    "adjacent_cosine",
    "gelu_fwd",
    "layer_norm_rows",
    "ln_project",
    "prompt_importance",
]


def _c(a, dtype):
    return np.ascontiguousarray(a, dtype=dtype)


def _float_dtype(a):
    return np.float32 if np.asarray(a).dtype == np.float32 else np.float64


def gelu_fwd(h, impl=None):
    impl = impl or _impl
    return impl.gelu_fwd(_c(h, _float_dtype(h)))


def layer_norm_rows(y, gain, bias, eps, impl=None):
    impl = impl or _impl
    dt = _float_dtype(y)
    return impl.layer_norm_rows(_c(y, dt), _c(gain, dt), _c(bias, dt), float(eps))


def ln_project(g, yhat, inv_std, impl=None):
    impl = impl or _impl
    dt = _float_dtype(g)
    return impl.ln_project(_c(g, dt), _c(yhat, dt), _c(inv_std, dt))


def adjacent_cosine(z, impl=None):
    impl = impl or _impl
    return impl.adjacent_cosine(_c(z, _float_dtype(z)))


def prompt_importance(attn, impl=None):
    impl = impl or _impl
    return impl.prompt_importance(_c(attn, _float_dtype(attn)))
