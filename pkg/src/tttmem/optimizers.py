"""Fast-weight update rules: SGD, Muon (Newton-Schulz) and Hessian-free CG.

Every rule maps the gradient of the eta-weighted reconstruction loss of one
head to an additive update ``dW`` (``W_new = W + dW``).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Literal

import numpy as np

from .numerics import (
    LayerNormParams,
    MlpCache,
    MlpParams,
    NonFiniteError,
    mlp_forward_cached,
    mlp_loss_grad,
)
from . import _kernels

Kind = Literal["sgd", "muon", "hf"]
Curvature = Literal["mlp", "ln"]

# (a, b, c) of p(x) = a x + b x^3 + c x^5, one triple per iteration. Fitted so
# that five steps take every x in [1/800, 1] into [0.72, 1.29] (a cond <= 100
# input of up to 64 columns, after Frobenius scaling) while landing within 1e-3
# of 1 at x = 8^-1/2, the scaled singular value of an 8 x 8 orthogonal matrix.
NS_SCHEDULE = (
    (8.3018, -23.6801, 17.1865),
    (3.4508, -2.3463, 0.4140),
    (3.0691, -2.5518, 0.6205),
    (2.7412, -1.8946, 0.5188),
    (2.5737, -1.8054, 0.4380),
)
# p(1) = 1, p'(1) = p''(1) = 0: used for iterations past the schedule
NS_POLISH = (15.0 / 8.0, -10.0 / 8.0, 3.0 / 8.0)


@dataclass(frozen=True)
class OptimizerSpec:
    kind: Kind = "hf"
    eta: float = 1.0
    cg_iters: int = 3
    curvature: Curvature = "mlp"
    damping: float = 1e-4
    ns_iters: int = 5
    early_stop: bool = True

    def __post_init__(self):
        if self.kind not in ("sgd", "muon", "hf"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.curvature not in ("mlp", "ln"):
            raise ValueError(f"unknown curvature {self.curvature!r}")
        if self.cg_iters < 1:
            raise ValueError("cg_iters must be >= 1")
        if self.damping < 0:
            raise ValueError("damping must be >= 0")
        if self.ns_iters < 1:
            raise ValueError("ns_iters must be >= 1")
        if self.eta < 0:
            raise ValueError("eta must be >= 0")

    @property
    def label(self) -> str:
        if self.kind == "hf":
            return f"hf-{self.curvature}-{self.cg_iters}"
        return self.kind


@dataclass
class CgTrace:
    iterations: int = 0
    residual_norms: list[float] = field(default_factory=list)
    quad_values: list[float] = field(default_factory=list)
    step_sizes: list[float] = field(default_factory=list)
    stopped_early: bool = False
    reason: str = "max_iters"


# ---------------------------------------------------------------- SGD


def sgd_update(grad: MlpParams, eta: float = 1.0) -> MlpParams:
    if not grad.allfinite():
        raise NonFiniteError("gradient contains non-finite entries")
    return grad * -eta


# ---------------------------------------------------------------- Muon


def newton_schulz(m: np.ndarray, iters: int = 5) -> np.ndarray:
    """Approximate the orthogonal polar factor of ``m``.

    The input is scaled to unit Frobenius norm, then run through ``iters``
    odd quintic iterations: the ``NS_SCHEDULE`` steps in order, then
    ``NS_POLISH`` for any beyond it. Fewer than five iterations stop partway
    through the schedule, where singular values are still far from 1.
    """
    m = np.asarray(m)
    if m.ndim != 2:
        raise ValueError("newton_schulz needs a matrix")
    norm = np.linalg.norm(m)
    if not norm > 0:
        raise ValueError("newton_schulz of a zero matrix is undefined")
    if not np.isfinite(norm):
        raise NonFiniteError("non-finite input to newton_schulz")
    tall = m.shape[0] > m.shape[1]
    x = (m.T if tall else m) / norm
    for i in range(iters):
        a, b, c = NS_SCHEDULE[i] if i < len(NS_SCHEDULE) else NS_POLISH
        g = x @ x.T
        x = a * x + (b * g + c * (g @ g)) @ x
    return x.T if tall else x


def muon_update(grad: MlpParams, spec: OptimizerSpec) -> MlpParams:
    """-eta_muon * NS(grad) on both weight matrices; biases take the SGD step.

    NS is odd, so this is -eta_muon * NS(-dW_sgd): the orthogonalized SGD
    direction, pointing downhill.
    """
    sgd = sgd_update(grad)
    out = []
    for g, d in zip(grad.arrays(), sgd.arrays()):
        if g.ndim == 2:
            if not np.any(g):
                out.append(np.zeros_like(g))
            else:
                out.append(-spec.eta * newton_schulz(g, spec.ns_iters).astype(g.dtype))
        else:
            out.append(d)
    return MlpParams(*out)


# ---------------------------------------------------------------- Gauss-Newton


class GaussNewton:
    """Matvec with B = sum_i c_i J_i^T J_i + damping * I for one head.

    ``curvature="mlp"`` differentiates the pre-norm MLP output; ``"ln"``
    includes the layer norm. Token weights ``c`` default to 1: the token
    learning rates live in the gradient only, so they set the HF step length.
    The forward pass is cached at construction. ``__call__`` works on flat
    parameter vectors (``MlpParams.to_vector`` layout).
    """

    def __init__(self, k: np.ndarray, w: MlpParams, ln: LayerNormParams,
                 curvature: Curvature = "mlp", damping: float = 0.0,
                 activation: str = "gelu", cache: MlpCache | None = None,
                 token_weights: np.ndarray | None = None):
        self.w = w
        self.ln = ln
        self.curvature = curvature
        self.damping = float(damping)
        self.cache = cache if cache is not None else mlp_forward_cached(k, w, ln, activation)
        n = self.cache.x.shape[0]
        tw = np.ones(n) if token_weights is None else np.asarray(token_weights)
        if tw.shape != (n,):
            raise ValueError("need one curvature weight per token")
        self.weights = tw.astype(w.dtype)[:, None]
        self.n_matvecs = 0

    def apply(self, v: MlpParams) -> MlpParams:
        c, w = self.cache, self.w
        dh = c.x @ v.w1 + v.b1
        dy = (c.da * dh) @ w.w2 + c.a @ v.w2 + v.b2
        if self.curvature == "ln":
            dy = _kernels.ln_project(dy, c.yhat, c.inv_std) * self.ln.gain
            u = _kernels.ln_project(self.weights * dy * self.ln.gain, c.yhat, c.inv_std)
        else:
            u = self.weights * dy
        gh = (u @ w.w2.T) * c.da
        out = MlpParams(c.x.T @ gh, gh.sum(axis=0), c.a.T @ u, u.sum(axis=0))
        if self.damping:
            out = out + v * self.damping
        self.n_matvecs += 1
        return out

    def __call__(self, vec: np.ndarray) -> np.ndarray:
        return self.apply(MlpParams.from_vector(vec, self.w)).to_vector()


def gn_matvec(k: np.ndarray, w: MlpParams, ln: LayerNormParams, v: MlpParams,
              curvature: Curvature = "mlp", damping: float = 0.0,
              activation: str = "gelu", token_weights: np.ndarray | None = None) -> MlpParams:
    return GaussNewton(k, w, ln, curvature, damping, activation,
                       token_weights=token_weights).apply(v)


def gn_matvec_flops(n_tokens: int, d_in: int, hidden: int, d_out: int,
                    curvature: Curvature = "mlp") -> int:
    """Multiply-add count of one matvec (forward cached, damping ignored)."""
    fwd = n_tokens * (d_in * hidden + hidden + hidden * d_out + hidden * d_out + d_out)
    bwd = n_tokens * (d_out * hidden + hidden + d_in * hidden + hidden * d_out)
    ln = 2 * n_tokens * 5 * d_out if curvature == "ln" else 0
    return fwd + bwd + ln


# ---------------------------------------------------------------- CG


def cg_stop_indicator(x: np.ndarray, matvec: Callable[[np.ndarray], np.ndarray],
                      grad: np.ndarray, residual: np.ndarray | None = None) -> float:
    """Quadratic model q(x) = 1/2 x^T B x - g^T x.

    With ``residual = g - B x`` supplied, q is evaluated as -1/2 x^T (g + r)
    and no matvec is spent.
    """
    if residual is None:
        return float(0.5 * np.dot(x, matvec(x)) - np.dot(grad, x))
    return float(-0.5 * np.dot(x, grad + residual))


def conjugate_gradient(matvec: Callable[[np.ndarray], np.ndarray], grad: np.ndarray,
                       max_iters: int = 3, early_stop: bool = True,
                       indicator: Callable | None = None) -> tuple[np.ndarray, CgTrace]:
    """Solve B x = grad from x = 0 with at most ``max_iters`` CG iterations.

    Stops early once the indicator stops decreasing (the previous iterate is
    returned), on non-positive curvature, or on an exactly zero residual.
    """
    trace = CgTrace()
    x = np.zeros_like(grad)
    r = grad.copy()
    v = r.copy()
    rr = float(np.dot(r, r))
    trace.residual_norms.append(np.sqrt(rr))
    gamma = 0.0
    trace.quad_values.append(gamma)
    if rr == 0.0:
        trace.reason = "zero_gradient"
        return x, trace
    m = 0
    while m < max_iters:
        bv = matvec(v)
        curv = float(np.dot(v, bv))
        if not np.isfinite(curv):
            raise NonFiniteError("non-finite curvature in CG")
        if curv <= 0.0:
            trace.stopped_early = True
            trace.reason = "nonpositive_curvature"
            break
        alpha = rr / curv
        x_new = x + alpha * v
        r_new = r - alpha * bv
        rr_new = float(np.dot(r_new, r_new))
        if indicator is None:
            gamma_new = cg_stop_indicator(x_new, matvec, grad, r_new)
        else:
            gamma_new = float(indicator(x_new, matvec, grad, r_new))
        if early_stop and not gamma_new < gamma:
            trace.stopped_early = True
            trace.reason = "indicator_increase"
            break
        v = r_new + (rr_new / rr) * v
        x, r, rr, gamma = x_new, r_new, rr_new, gamma_new
        m += 1
        trace.iterations = m
        trace.residual_norms.append(np.sqrt(rr))
        trace.quad_values.append(gamma)
        trace.step_sizes.append(alpha)
        if rr == 0.0:
            trace.reason = "converged"
            break
    if not np.isfinite(x).all():
        raise NonFiniteError("non-finite CG iterate")
    return x, trace


def hf_update(k: np.ndarray, targets: np.ndarray, eta: np.ndarray, w: MlpParams,
              ln: LayerNormParams, spec: OptimizerSpec, activation: str = "gelu",
              grad: MlpParams | None = None,
              cache: MlpCache | None = None) -> tuple[MlpParams, CgTrace]:
    """One Hessian-free step for one head: solve B x = grad by CG, return -eta * x."""
    if spec.kind != "hf":
        raise ValueError("hf_update needs an HF optimizer spec")
    if cache is None:
        cache = mlp_forward_cached(k, w, ln, activation)
    if grad is None:
        grad = mlp_loss_grad(k, targets, eta, w, ln, activation, cache=cache)
    if not grad.allfinite():
        raise NonFiniteError("gradient contains non-finite entries")
    op = GaussNewton(k, w, ln, spec.curvature, spec.damping, activation, cache=cache)
    x, trace = conjugate_gradient(op, grad.to_vector(), spec.cg_iters, spec.early_stop)
    return MlpParams.from_vector(x * -spec.eta, w), trace


def compute_update(spec: OptimizerSpec, k: np.ndarray, targets: np.ndarray, eta: np.ndarray,
                   w: MlpParams, ln: LayerNormParams,
                   activation: str = "gelu") -> tuple[MlpParams, CgTrace | None]:
    """Dispatch to the rule selected by ``spec`` for one head."""
    cache = mlp_forward_cached(k, w, ln, activation)
    grad = mlp_loss_grad(k, targets, eta, w, ln, activation, cache=cache)
    if spec.kind == "sgd":
        return sgd_update(grad, spec.eta), None
    if spec.kind == "muon":
        return muon_update(grad, spec), None
    return hf_update(k, targets, eta, w, ln, spec, activation, grad=grad, cache=cache)
