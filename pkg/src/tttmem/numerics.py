"""Dense substrate for the TTT MLP: checked matrices, layer norm, and the
hand-derived forward / gradient / Jacobian products of

    f(x; W) = x + LN(f_mlp(x; W)),   f_mlp(x; W) = act(x @ w1 + b1) @ w2 + b2

All batched functions take row-major token matrices (one token per row).
A 1-D input is treated as a single token.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from . import _kernels

Mode = Literal["mlp", "ln"]

LN_EPS = 1e-6


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf was found where finite values are required."""


def resolve_dtype(precision) -> np.dtype:
    if precision in ("f64", "float64", np.float64, None):
        return np.dtype(np.float64)
    if precision in ("f32", "float32", np.float32):
        return np.dtype(np.float32)
    raise ValueError(f"unknown precision {precision!r}")


def as_matrix(data, dtype=np.float64, checked: bool = True) -> np.ndarray:
    """Coerce to a C-contiguous 2-D array; reject NaN/Inf when ``checked``."""
    m = np.ascontiguousarray(data, dtype=dtype)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise DimensionError(f"expected a matrix, got shape {m.shape}")
    if checked and not np.isfinite(m).all():
        raise NonFiniteError("matrix contains non-finite entries")
    return m


def check_finite(arr: np.ndarray, what: str = "array") -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{what} contains non-finite entries")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


@dataclass(frozen=True)
class LayerNormParams:
    gain: np.ndarray
    bias: np.ndarray
    eps: float = LN_EPS

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError("layer norm epsilon must be positive")
        if self.gain.shape != self.bias.shape or self.gain.ndim != 1:
            raise DimensionError("gain and bias must be vectors of equal length")

    @property
    def dim(self) -> int:
        return self.gain.shape[0]

    @classmethod
    def identity(cls, d: int, eps: float = LN_EPS, dtype=np.float64) -> LayerNormParams:
        return cls(np.ones(d, dtype=dtype), np.zeros(d, dtype=dtype), eps)

    def astype(self, dtype) -> LayerNormParams:
        return LayerNormParams(self.gain.astype(dtype), self.bias.astype(dtype), self.eps)


@dataclass
class MlpParams:
    """Fast weights of one TTT head. ``w1``: (d_in, hidden), ``w2``: (hidden, d_out)."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @property
    def d_in(self) -> int:
        return self.w1.shape[0]

    @property
    def hidden(self) -> int:
        return self.w1.shape[1]

    @property
    def d_out(self) -> int:
        return self.w2.shape[1]

    @property
    def size(self) -> int:
        return self.w1.size + self.b1.size + self.w2.size + self.b2.size

    @property
    def dtype(self):
        return self.w1.dtype

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        return self.w1, self.b1, self.w2, self.b2

    def validate(self) -> None:
        if self.w2.shape[0] != self.hidden or self.b1.shape != (self.hidden,):
            raise DimensionError("hidden sizes disagree")
        if self.b2.shape != (self.d_out,):
            raise DimensionError("output bias has wrong length")
        if self.d_out != self.d_in:
            raise DimensionError("residual connection needs d_out == d_in")
        for a in self.arrays():
            check_finite(a, "MLP parameters")

    def to_vector(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    @classmethod
    def from_vector(cls, vec: np.ndarray, like: MlpParams) -> MlpParams:
        if vec.shape != (like.size,):
            raise DimensionError(f"expected vector of length {like.size}, got {vec.shape}")
        out = []
        i = 0
        for a in like.arrays():
            out.append(vec[i:i + a.size].reshape(a.shape))
            i += a.size
        return cls(*out)

    def zeros_like(self) -> MlpParams:
        return MlpParams(*(np.zeros_like(a) for a in self.arrays()))

    def copy(self) -> MlpParams:
        return MlpParams(*(a.copy() for a in self.arrays()))

    def __add__(self, other: MlpParams) -> MlpParams:
        return MlpParams(*(a + b for a, b in zip(self.arrays(), other.arrays())))

    def __sub__(self, other: MlpParams) -> MlpParams:
        return MlpParams(*(a - b for a, b in zip(self.arrays(), other.arrays())))

    def __mul__(self, c: float) -> MlpParams:
        return MlpParams(*(a * c for a in self.arrays()))

    __rmul__ = __mul__

    def __neg__(self) -> MlpParams:
        return self * -1.0

    def dot(self, other: MlpParams) -> float:
        return float(sum(np.vdot(a, b) for a, b in zip(self.arrays(), other.arrays())))

    def norm(self) -> float:
        return float(np.sqrt(self.dot(self)))

    def allfinite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays())


def activation_fwd(name: str, h: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Activation value and elementwise derivative."""
    if name == "gelu":
        return _kernels.gelu_fwd(h)
    if name == "tanh":
        a = np.tanh(h)
        return a, 1.0 - a * a
    if name == "identity":
        return h, np.ones_like(h)
    raise ValueError(f"unknown activation {name!r}")


@dataclass
class LnCache:
    mean: np.ndarray
    var: np.ndarray
    yhat: np.ndarray
    inv_std: np.ndarray


def layer_norm_forward(x: np.ndarray, p: LayerNormParams) -> tuple[np.ndarray, LnCache]:
    single = np.ndim(x) == 1
    x2 = np.atleast_2d(x)
    if x2.shape[1] != p.dim:
        raise DimensionError(f"layer norm over {p.dim} channels got width {x2.shape[1]}")
    y, yhat, inv_std = _kernels.layer_norm_rows(x2, p.gain, p.bias, p.eps)
    mean = x2.mean(axis=1)
    var = 1.0 / (inv_std.astype(np.float64) ** 2) - p.eps
    cache = LnCache(mean, var, yhat, inv_std)
    return (y[0] if single else y), cache


@dataclass
class MlpCache:
    x: np.ndarray
    h: np.ndarray
    a: np.ndarray
    da: np.ndarray
    y: np.ndarray
    yhat: np.ndarray
    inv_std: np.ndarray
    out: np.ndarray


def _check_mlp_input(x: np.ndarray, w: MlpParams) -> np.ndarray:
    x2 = np.atleast_2d(x)
    if x2.ndim != 2 or x2.shape[1] != w.d_in:
        raise DimensionError(f"MLP expects width {w.d_in}, got shape {np.shape(x)}")
    return x2


def mlp_forward_cached(x: np.ndarray, w: MlpParams, ln: LayerNormParams,
                       activation: str = "gelu") -> MlpCache:
    x = _check_mlp_input(x, w)
    if ln.dim != w.d_out:
        raise DimensionError("layer norm width differs from MLP output width")
    h = x @ w.w1 + w.b1
    a, da = activation_fwd(activation, h)
    y = a @ w.w2 + w.b2
    z, yhat, inv_std = _kernels.layer_norm_rows(y, ln.gain, ln.bias, ln.eps)
    return MlpCache(x, h, a, da, y, yhat, inv_std, x + z)


def mlp_forward(x: np.ndarray, w: MlpParams, ln: LayerNormParams,
                activation: str = "gelu") -> np.ndarray:
    """x + LN(f_mlp(x; W)) for one token or a row batch."""
    out = mlp_forward_cached(x, w, ln, activation).out
    return out[0] if np.ndim(x) == 1 else out


def _backprop(cache: MlpCache, w: MlpParams, dy: np.ndarray) -> MlpParams:
    # dy: gradient w.r.t. the pre-LN MLP output, one row per token
    dh = (dy @ w.w2.T) * cache.da
    return MlpParams(cache.x.T @ dh, dh.sum(axis=0), cache.a.T @ dy, dy.sum(axis=0))


def mlp_loss(k: np.ndarray, targets: np.ndarray, eta: np.ndarray, w: MlpParams,
             ln: LayerNormParams, activation: str = "gelu") -> float:
    """Sum_i eta_i * ||f(k_i; W) - t_i||^2."""
    out = mlp_forward_cached(k, w, ln, activation).out
    e = out - np.atleast_2d(targets)
    return float(np.dot(np.asarray(eta, dtype=np.float64), np.einsum("ij,ij->i", e, e)))


def mlp_loss_grad(k: np.ndarray, targets: np.ndarray, eta: np.ndarray, w: MlpParams,
                  ln: LayerNormParams, activation: str = "gelu",
                  cache: MlpCache | None = None, return_loss: bool = False):
    """Gradient of the eta-weighted squared reconstruction loss w.r.t. W."""
    k = _check_mlp_input(k, w)
    targets = np.atleast_2d(targets)
    eta = np.asarray(eta)
    if targets.shape != k.shape[:1] + (w.d_out,):
        raise DimensionError(f"targets shape {targets.shape} does not match keys {k.shape}")
    if eta.shape != (k.shape[0],):
        raise DimensionError("need one weight per token")
    if cache is None:
        cache = mlp_forward_cached(k, w, ln, activation)
    e = cache.out - targets
    g_out = (2.0 * eta)[:, None].astype(e.dtype) * e
    dy = _kernels.ln_project(g_out * ln.gain, cache.yhat, cache.inv_std)
    grad = _backprop(cache, w, dy)
    if return_loss:
        return grad, float(np.dot(eta.astype(np.float64), np.einsum("ij,ij->i", e, e)))
    return grad


def mlp_jvp_params(x: np.ndarray, w: MlpParams, ln: LayerNormParams, v: MlpParams,
                   mode: Mode = "mlp", activation: str = "gelu",
                   cache: MlpCache | None = None) -> np.ndarray:
    """Directional derivative of z_mlp (mode "mlp") or LN(z_mlp) (mode "ln") along v."""
    if cache is None:
        cache = mlp_forward_cached(x, w, ln, activation)
    _check_same_shape(v, w)
    dh = cache.x @ v.w1 + v.b1
    dy = (cache.da * dh) @ w.w2 + cache.a @ v.w2 + v.b2
    if mode == "ln":
        dy = _kernels.ln_project(dy, cache.yhat, cache.inv_std) * ln.gain
    elif mode != "mlp":
        raise ValueError(f"unknown mode {mode!r}")
    return dy[0] if np.ndim(x) == 1 else dy


def mlp_vjp_params(x: np.ndarray, w: MlpParams, ln: LayerNormParams, u: np.ndarray,
                   mode: Mode = "mlp", activation: str = "gelu",
                   cache: MlpCache | None = None) -> MlpParams:
    """Transpose-Jacobian product, summed over the rows of ``u``."""
    if cache is None:
        cache = mlp_forward_cached(x, w, ln, activation)
    u = np.atleast_2d(u)
    if u.shape != cache.y.shape:
        raise DimensionError(f"cotangent shape {u.shape} != output shape {cache.y.shape}")
    if mode == "ln":
        u = _kernels.ln_project(u * ln.gain, cache.yhat, cache.inv_std)
    elif mode != "mlp":
        raise ValueError(f"unknown mode {mode!r}")
    return _backprop(cache, w, u)


def mlp_vjp_input(x: np.ndarray, w: MlpParams, ln: LayerNormParams, u: np.ndarray,
                  activation: str = "gelu") -> np.ndarray:
    """u^T d f(x; W) / dx, row by row (includes the residual path)."""
    cache = mlp_forward_cached(x, w, ln, activation)
    u2 = np.atleast_2d(u)
    dy = _kernels.ln_project(u2 * ln.gain, cache.yhat, cache.inv_std)
    dx = u2 + ((dy @ w.w2.T) * cache.da) @ w.w1.T
    return dx[0] if np.ndim(x) == 1 else dx


def _check_same_shape(v: MlpParams, w: MlpParams) -> None:
    for a, b in zip(v.arrays(), w.arrays()):
        if a.shape != b.shape:
            raise DimensionError(f"direction shape {a.shape} != parameter shape {b.shape}")
