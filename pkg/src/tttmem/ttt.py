"""The TTT layer: projections, token learning rates, gated output and the
per-mini-batch state transition ``Z_t, W_t = TTT(X_t, W_{t-1})``.

Channels are split evenly across heads; each head owns an independent MLP
and runs its own optimizer (and CG solve) on its slice.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .numerics import (
    DimensionError,
    LayerNormParams,
    MlpParams,
    NonFiniteError,
    mlp_forward,
    mlp_loss,
)
from .optimizers import OptimizerSpec, compute_update

VISUAL = 0
AUDIO = 1

FULL_SCALE_BATCH_SIZE = 1024  # tokens per TTT mini-batch at full scale
DESK_BATCH_SIZE = 32


class ContractError(ValueError):
    """An input violates the layer's calling contract."""


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class TokenBatch:
    """One mini-batch of consecutive tokens.

    ``targets`` optionally replaces the tokens as the source of reconstruction
    targets (``theta_v @ target`` instead of ``theta_v @ x``); the associative
    recall harness uses it to write key -> value pairs.
    """

    tokens: np.ndarray
    modality: np.ndarray | None = None
    stream_index: int = 0
    targets: np.ndarray | None = None

    def __post_init__(self):
        self.tokens = np.atleast_2d(self.tokens)
        if self.tokens.shape[0] < 1:
            raise ContractError("a batch needs at least one token")
        if self.modality is None:
            self.modality = np.full(self.tokens.shape[0], VISUAL, dtype=np.uint8)
        else:
            self.modality = np.asarray(self.modality, dtype=np.uint8)
        if self.modality.shape != (self.tokens.shape[0],):
            raise DimensionError("need one modality tag per token")
        if self.targets is not None:
            self.targets = np.atleast_2d(self.targets)
            if self.targets.shape != self.tokens.shape:
                raise DimensionError("targets must match tokens in shape")

    @property
    def size(self) -> int:
        return self.tokens.shape[0]

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]


@dataclass
class TttLayerParams:
    theta_q: np.ndarray
    theta_k: np.ndarray
    theta_v: np.ndarray
    ln: LayerNormParams
    gate_w: np.ndarray
    gate_b: float
    lr_w: np.ndarray
    lr_b: float
    base_lr: float
    heads: int = 2
    hidden: int = 256
    activation: str = "gelu"
    init_std: float | None = None
    seed: int = 0

    def __post_init__(self):
        d = self.theta_q.shape[0]
        for t in (self.theta_q, self.theta_k, self.theta_v):
            if t.shape != (d, d):
                raise DimensionError("projections must be square d x d")
        if d % self.heads:
            raise DimensionError(f"d={d} is not divisible by heads={self.heads}")
        if self.ln.dim != d // self.heads:
            raise DimensionError("layer norm must span one head's channels")
        if not self.base_lr > 0:
            raise ValueError("base_lr must be positive")
        if self.gate_w.shape != (d,) or self.lr_w.shape != (d,):
            raise DimensionError("gate and learning-rate weights must have length d")

    @property
    def dim(self) -> int:
        return self.theta_q.shape[0]

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def weight_std(self) -> float:
        return self.init_std if self.init_std is not None else 0.02 / np.sqrt(self.hidden)

    @property
    def dtype(self):
        return self.theta_q.dtype

    @classmethod
    def near_identity(cls, d: int = 64, heads: int = 2, hidden: int = 256,
                      base_lr: float = 0.01, theta_noise: float = 0.02,
                      lr_w_scale: float = 0.0, gate_b: float = 0.0, ln_gain: float = 0.25,
                      seed: int = 0,
                      activation: str = "gelu", init_std: float | None = 0.02,
                      dtype=np.float64) -> TttLayerParams:
        """Projections = I + noise, so an untrained layer roughly reconstructs."""
        rng = np.random.default_rng(seed)
        eye = np.eye(d)
        thetas = [eye + theta_noise * rng.standard_normal((d, d)) for _ in range(3)]
        lr_w = lr_w_scale * rng.standard_normal(d) / np.sqrt(d)
        return cls(
            theta_q=thetas[0].astype(dtype),
            theta_k=thetas[1].astype(dtype),
            theta_v=thetas[2].astype(dtype),
            ln=LayerNormParams(np.full(d // heads, ln_gain, dtype=dtype),
                               np.zeros(d // heads, dtype=dtype)),
            gate_w=np.zeros(d, dtype=dtype),
            gate_b=gate_b,
            lr_w=lr_w.astype(dtype),
            lr_b=0.0,
            base_lr=base_lr,
            heads=heads,
            hidden=hidden,
            activation=activation,
            init_std=init_std,
            seed=seed,
        )

    def head_slice(self, h: int) -> slice:
        return slice(h * self.head_dim, (h + 1) * self.head_dim)


@dataclass
class FastWeights:
    heads: list[MlpParams]
    step: int = 0

    def copy(self) -> FastWeights:
        return FastWeights([w.copy() for w in self.heads], self.step)

    def norm(self) -> float:
        return float(np.sqrt(sum(w.dot(w) for w in self.heads)))

    def nbytes(self) -> int:
        return sum(a.nbytes for w in self.heads for a in w.arrays())

    def allfinite(self) -> bool:
        return all(w.allfinite() for w in self.heads)


@dataclass
class StepMetrics:
    step: int
    loss_before: float
    loss_after: float
    update_norm: float
    relative_output_change: float
    cg_iterations: int = 0
    wall_time: float | None = None


@dataclass
class StepResult:
    output: np.ndarray
    weights: FastWeights
    metrics: StepMetrics
    update: list[MlpParams] = field(default_factory=list)


def init_fast_weights(layer: TttLayerParams, seed: int | None = None) -> FastWeights:
    rng = np.random.default_rng(layer.seed if seed is None else seed)
    std = layer.weight_std
    dh, hid, dt = layer.head_dim, layer.hidden, layer.dtype
    heads = []
    for _ in range(layer.heads):
        heads.append(MlpParams(
            (std * rng.standard_normal((dh, hid))).astype(dt),
            np.zeros(hid, dtype=dt),
            (std * rng.standard_normal((hid, dh))).astype(dt),
            np.zeros(dh, dtype=dt),
        ))
    return FastWeights(heads, 0)


def token_learning_rates(batch: TokenBatch, layer: TttLayerParams) -> np.ndarray:
    """eta_i = base_lr * sigmoid(x_i . lr_w + lr_b)."""
    return layer.base_lr * sigmoid(batch.tokens @ layer.lr_w + layer.lr_b)


def _require_visual(batch: TokenBatch) -> None:
    if np.any(batch.modality != VISUAL):
        raise ContractError("audio tokens bypass the TTT layer and must not be passed to it")


def _check_dim(batch: TokenBatch, layer: TttLayerParams) -> None:
    if batch.dim != layer.dim:
        raise DimensionError(f"batch width {batch.dim} != layer width {layer.dim}")


def projections(batch: TokenBatch, layer: TttLayerParams):
    """(queries, keys, reconstruction targets), each b x d."""
    x = batch.tokens
    src = batch.targets if batch.targets is not None else x
    return x @ layer.theta_q.T, x @ layer.theta_k.T, src @ layer.theta_v.T


def reconstruction_loss(batch: TokenBatch, eta: np.ndarray, layer: TttLayerParams,
                        w: FastWeights) -> float:
    """Sum over heads and tokens of eta_i * ||f(theta_k x_i; W) - theta_v x_i||^2."""
    _require_visual(batch)
    _check_dim(batch, layer)
    _, k, v = projections(batch, layer)
    total = 0.0
    for h, wh in enumerate(w.heads):
        s = layer.head_slice(h)
        total += mlp_loss(k[:, s], v[:, s], eta, wh, layer.ln, layer.activation)
    return total


def raw_output(q: np.ndarray, layer: TttLayerParams, w: FastWeights) -> np.ndarray:
    """f(theta_q x; W) head by head, before gating."""
    return np.concatenate(
        [mlp_forward(q[:, layer.head_slice(h)], wh, layer.ln, layer.activation)
         for h, wh in enumerate(w.heads)], axis=1)


def ttt_output(batch: TokenBatch, layer: TttLayerParams, w: FastWeights) -> np.ndarray:
    """Gated output alpha * f(theta_q x; W) + (1 - alpha) * x, alpha per token."""
    _require_visual(batch)
    _check_dim(batch, layer)
    x = batch.tokens
    z_raw = raw_output(x @ layer.theta_q.T, layer, w)
    alpha = sigmoid(x @ layer.gate_w + layer.gate_b)[:, None]
    return alpha * z_raw + (1.0 - alpha) * x


def ttt_step(batch: TokenBatch, w: FastWeights, layer: TttLayerParams, opt: OptimizerSpec,
             eta: np.ndarray | None = None, target_norm: float | None = None,
             timed: bool = False) -> StepResult:
    """Update the fast weights on ``batch``, then emit its output with the new weights.

    ``target_norm`` rescales the combined update of all heads to that
    Frobenius norm (used for matched-norm comparisons). ``w`` is never
    modified; a non-finite update raises and leaves it intact.
    """
    t0 = time.perf_counter() if timed else 0.0
    _require_visual(batch)
    _check_dim(batch, layer)
    if eta is None:
        eta = token_learning_rates(batch, layer)
    q, k, v = projections(batch, layer)
    loss_before = 0.0
    updates: list[MlpParams] = []
    cg_iters = 0
    for h, wh in enumerate(w.heads):
        s = layer.head_slice(h)
        loss_before += mlp_loss(k[:, s], v[:, s], eta, wh, layer.ln, layer.activation)
        dw, trace = compute_update(opt, k[:, s], v[:, s], eta, wh, layer.ln, layer.activation)
        updates.append(dw)
        if trace is not None:
            cg_iters = max(cg_iters, trace.iterations)
    norm = float(np.sqrt(sum(u.dot(u) for u in updates)))
    if target_norm is not None:
        scale = target_norm / norm if norm > 0 else 0.0
        updates = [u * scale for u in updates]
        norm = float(np.sqrt(sum(u.dot(u) for u in updates)))
    if not np.isfinite(norm) or not all(u.allfinite() for u in updates):
        raise NonFiniteError(f"non-finite fast-weight update at step {w.step}")
    new = FastWeights([wh + u for wh, u in zip(w.heads, updates)], w.step + 1)

    loss_after = 0.0
    for h, wh in enumerate(new.heads):
        s = layer.head_slice(h)
        loss_after += mlp_loss(k[:, s], v[:, s], eta, wh, layer.ln, layer.activation)
    f_old = raw_output(q, layer, w)
    f_new = raw_output(q, layer, new)
    denom = float(np.linalg.norm(f_old))
    rel = float(np.linalg.norm(f_new - f_old)) / denom if denom > 0 else 0.0

    x = batch.tokens
    alpha = sigmoid(x @ layer.gate_w + layer.gate_b)[:, None]
    out = alpha * f_new + (1.0 - alpha) * x
    metrics = StepMetrics(
        step=w.step,
        loss_before=loss_before,
        loss_after=loss_after,
        update_norm=norm,
        relative_output_change=rel,
        cg_iterations=cg_iters,
        wall_time=(time.perf_counter() - t0) if timed else None,
    )
    return StepResult(out, new, metrics, updates)


def with_params(layer: TttLayerParams, **changes) -> TttLayerParams:
    return replace(layer, **changes)
