"""Desk-scale analyses: loss vs. update norm, matched-norm output change,
associative recall and reader compression."""

from __future__ import annotations

import csv
import io
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ..memory import MemoryState
from ..numerics import MlpParams, mlp_loss
from ..optimizers import OptimizerSpec, compute_update
from ..reader import compress_kv, decode_with_kv, full_cache_kv, prompt_logits
from ..ttt import (FastWeights, TokenBatch, TttLayerParams, init_fast_weights, projections,
                   raw_output, token_learning_rates, ttt_step)
from .config import DEFAULT_MATCHED_NORM, StreamConfig
from .streams import Stream

DEFAULT_NORM_GRID = tuple(np.geomspace(1e-3, 30.0, 50))
DEFAULT_OPTIMIZERS = ("sgd", "muon", "hf-mlp-3")


def to_csv(rows: list[dict], columns: list[str]) -> str:
    buf = io.StringIO()
    wr = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    wr.writeheader()
    for r in rows:
        wr.writerow({c: (repr(float(r[c])) if isinstance(r[c], (float, np.floating)) else r[c])
                     for c in columns})
    return buf.getvalue()


def batches(tokens: np.ndarray, size: int, steps: int | None = None) -> list[np.ndarray]:
    out = [tokens[i:i + size] for i in range(0, tokens.shape[0], size)]
    return out if steps is None else out[:steps]


# ---------------------------------------------------------------- loss vs. update norm


def natural_updates(batch: TokenBatch, w: FastWeights, layer: TttLayerParams,
                    spec: OptimizerSpec) -> list[MlpParams]:
    eta = token_learning_rates(batch, layer)
    _, k, v = projections(batch, layer)
    ups = []
    for h, wh in enumerate(w.heads):
        s = layer.head_slice(h)
        ups.append(compute_update(spec, k[:, s], v[:, s], eta, wh, layer.ln, layer.activation)[0])
    return ups


def loss_along(batch: TokenBatch, w: FastWeights, layer: TttLayerParams,
               updates: list[MlpParams], norms) -> np.ndarray:
    """Reconstruction loss after rescaling ``updates`` to each norm in ``norms``."""
    eta = token_learning_rates(batch, layer)
    _, k, v = projections(batch, layer)
    total = float(np.sqrt(sum(u.dot(u) for u in updates)))
    out = []
    for c in norms:
        scale = c / total if total > 0 else 0.0
        loss = 0.0
        for h, (wh, u) in enumerate(zip(w.heads, updates)):
            s = layer.head_slice(h)
            loss += mlp_loss(k[:, s], v[:, s], eta, wh + u * scale, layer.ln, layer.activation)
        out.append(loss)
    return np.asarray(out)


def sweep_update_norm(batch: TokenBatch, w: FastWeights, layer: TttLayerParams,
                      optimizers: list[OptimizerSpec], norms=DEFAULT_NORM_GRID) -> list[dict]:
    norms = np.asarray(norms, dtype=np.float64)
    if norms.ndim != 1 or norms.size == 0 or np.any(norms < 0) or np.any(np.diff(norms) <= 0):
        raise ValueError("norm grid must be non-negative and strictly ascending")
    loss0 = loss_along(batch, w, layer, [u.zeros_like() for u in w.heads], [0.0])[0]
    rows = []
    for spec in optimizers:
        ups = natural_updates(batch, w, layer, spec)
        nat = float(np.sqrt(sum(u.dot(u) for u in ups)))
        for c, loss in zip(norms, loss_along(batch, w, layer, ups, norms)):
            rows.append({"optimizer": spec.label, "norm": float(c), "loss": float(loss),
                         "loss_before": float(loss0), "natural_norm": nat})
    return rows


SWEEP_COLUMNS = ["optimizer", "norm", "loss", "loss_before", "natural_norm"]


def sweep_minima(rows: list[dict]) -> dict[str, tuple[float, float]]:
    """optimizer label -> (minimum loss over the grid, norm achieving it)."""
    best: dict[str, tuple[float, float]] = {}
    for r in rows:
        cur = best.get(r["optimizer"])
        if cur is None or r["loss"] < cur[0]:
            best[r["optimizer"]] = (r["loss"], r["norm"])
    return best


def random_sweep_instance(config: StreamConfig, seed: int):
    """A fresh layer, fast weights and Gaussian mini-batch, all from ``seed``."""
    layer = config.layer(seed)
    w = init_fast_weights(layer, seed)
    rng = np.random.default_rng([seed, 1])
    x = config.token_std * rng.standard_normal((config.batch_size, config.dim))
    return TokenBatch(x.astype(config.dtype)), w, layer


# ---------------------------------------------------------------- matched-norm statistics


def _stats_one(args):
    spec, layer, tokens, b, norm, steps, seed = args
    w = init_fast_weights(layer, seed)
    rows = []
    for t, x in enumerate(batches(tokens, b, steps)):
        res = ttt_step(TokenBatch(x), w, layer, spec, target_norm=norm)
        w = res.weights
        m = res.metrics
        rows.append({"step": t, "optimizer": spec.label, "loss_before": m.loss_before,
                     "loss_after": m.loss_after, "update_norm": m.update_norm,
                     "relative_output_change": m.relative_output_change})
    return rows


def ttt_statistics(config: StreamConfig, stream: Stream, optimizers: list[OptimizerSpec],
                   matched_norm: float = DEFAULT_MATCHED_NORM, steps: int | None = None,
                   workers: int = 1) -> list[dict]:
    """Per-step loss and relative output change with every update rescaled to ``matched_norm``.

    All optimizers start from the same fast weights and see the same batches.
    """
    if not matched_norm > 0:
        raise ValueError("matched norm must be positive")
    layer = config.layer()
    tokens = stream.visual_tokens().astype(config.dtype)
    jobs = [(spec, layer, tokens, config.batch_size, matched_norm, steps, config.seed)
            for spec in optimizers]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(_stats_one, jobs))
    else:
        parts = [_stats_one(j) for j in jobs]
    return [r for part in parts for r in part]


STATS_COLUMNS = ["step", "optimizer", "loss_before", "loss_after", "update_norm",
                 "relative_output_change"]


def mean_relative_change(rows: list[dict]) -> dict[str, float]:
    acc: dict[str, list[float]] = {}
    for r in rows:
        acc.setdefault(r["optimizer"], []).append(r["relative_output_change"])
    return {k: float(np.mean(v)) for k, v in acc.items()}


# ---------------------------------------------------------------- associative recall


@dataclass
class RecallReport:
    optimizer: str
    pairs: int
    probe_error: list[float] = field(default_factory=list)
    control_error: list[float] = field(default_factory=list)

    @property
    def mean_error(self) -> float:
        return float(np.mean(self.probe_error)) if self.probe_error else float("nan")

    @property
    def mean_control(self) -> float:
        return float(np.mean(self.control_error)) if self.control_error else float("nan")

    @property
    def fraction_improved(self) -> float:
        if not self.probe_error:
            return float("nan")
        return float(np.mean(np.asarray(self.probe_error) < np.asarray(self.control_error)))

    @property
    def recent_error(self) -> float:
        return self.probe_error[-1] if self.probe_error else float("nan")

    def to_dict(self) -> dict:
        return {"optimizer": self.optimizer, "pairs": self.pairs,
                "mean_probe_error": self.mean_error, "mean_control_error": self.mean_control,
                "fraction_improved": self.fraction_improved,
                "most_recent_probe_error": self.recent_error,
                "probe_error": self.probe_error, "control_error": self.control_error}


def probe_errors(layer: TttLayerParams, w: FastWeights, keys, values) -> np.ndarray:
    """||f(theta_k k; W) - theta_v v|| / ||theta_v v|| per pair."""
    out = raw_output(keys @ layer.theta_k.T, layer, w)
    tgt = values @ layer.theta_v.T
    return np.linalg.norm(out - tgt, axis=1) / np.linalg.norm(tgt, axis=1)


def split_pairs(stream: Stream) -> tuple[np.ndarray, np.ndarray]:
    keys, values = [], []
    for i, f in enumerate(stream.frames):
        if f.visual.shape[0] != 2:
            raise ValueError(f"frame {i} is not a [key, value] pair")
        keys.append(f.visual[0])
        values.append(f.visual[1])
    if not keys:
        return np.zeros((0, stream.dim)), np.zeros((0, stream.dim))
    return np.stack(keys), np.stack(values)


def recall_eval(config: StreamConfig, stream: Stream, optimizer: OptimizerSpec | None = None,
                probes: int | None = None) -> RecallReport:
    """Write every pair (key as input, value as target) and probe the final weights.

    Pairs go through the layer in stream order, ``batch_size`` pairs per step.
    The control probes the untouched initial weights.
    """
    spec = optimizer or config.optimizer
    keys, values = split_pairs(stream)
    dt = config.dtype
    keys, values = keys.astype(dt), values.astype(dt)
    n = keys.shape[0]
    report = RecallReport(spec.label, n)
    if n == 0:
        return report
    layer = config.layer()
    w0 = init_fast_weights(layer)
    w = w0
    b = config.batch_size
    for i in range(0, n, b):
        w = ttt_step(TokenBatch(keys[i:i + b], targets=values[i:i + b]), w, layer, spec).weights
    sel = slice(None) if probes is None else slice(max(n - probes, 0), n)
    report.probe_error = [float(e) for e in probe_errors(layer, w, keys[sel], values[sel])]
    report.control_error = [float(e) for e in probe_errors(layer, w0, keys[sel], values[sel])]
    return report


# ---------------------------------------------------------------- reader


def reader_eval(config: StreamConfig, memory: MemoryState, budgets, prompt_len: int = 8,
                prompt_seed: int | None = None, decode_steps: int = 4) -> list[dict]:
    """Compressed vs. full-cache decoding for each target average budget M.

    ``logit_divergence`` is the max-abs difference of the next-token logits
    at every prompt position; ``token_agreement`` compares greedy decodes.
    """
    n = memory.rows
    if n == 0:
        raise ValueError("snapshot holds no memory rows")
    stack = config.stack(memory.dim)
    rng = np.random.default_rng([config.seed if prompt_seed is None else prompt_seed, 2])
    prompt = stack.embed_ids(rng.integers(0, stack.vocab, prompt_len))
    z = memory.tokens.astype(stack.dtype)
    full = full_cache_kv(z, stack)
    ref = decode_with_kv(full, prompt, stack, decode_steps)
    ref_logits = prompt_logits(full, prompt, stack)
    rows = []
    for m_avg in budgets:
        m_avg = int(m_avg)
        if not 1 <= m_avg <= n:
            raise ValueError(f"budget M={m_avg} outside [1, {n}]")
        budget = config.reader_budget(n, m_avg)
        kv = compress_kv(z, prompt, stack, budget)
        dec = decode_with_kv(kv, prompt, stack, decode_steps)
        div = float(max(np.max(np.abs(prompt_logits(kv, prompt, stack) - ref_logits)),
                        np.max(np.abs(dec.logits[0] - ref.logits[0]))))
        if m_avg == n and div > 1e-6:
            raise AssertionError(f"M = N decoding diverged from the full cache by {div:.3g}")
        rows.append({"avg_tokens": m_avg, "memory_len": n, "chunk": budget.chunk,
                     "keep_per_chunk": budget.keep_per_chunk, "retained": kv.total,
                     "expected_retained": budget.expected_total(),
                     "compression": kv.total / (n * stack.n_layers),
                     "logit_divergence": div,
                     "token_agreement": float(np.mean(np.asarray(dec.tokens) ==
                                                      np.asarray(ref.tokens)))})
    return rows


READER_COLUMNS = ["avg_tokens", "memory_len", "chunk", "keep_per_chunk", "retained",
                  "expected_retained", "compression", "logit_divergence", "token_agreement"]
