"""Prompt-dependent memory reading over a small causal attention stack.

Memory tokens are re-encoded chunk by chunk together with the prompt. Each
chunk attends to the key/value pairs retained from earlier chunks plus its
own (causally); the prompt rows ride along after the chunk and their
post-softmax attention onto the chunk decides which chunk KV pairs survive.
Survivors are picked globally across layers, so a layer whose chunk
positions draw more prompt attention keeps more of them.

The stack has no positional encoding: positions only order the cache.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from ._io import atomic_write_text
from .numerics import DimensionError, resolve_dtype

DESK_LAYERS = 4
DESK_HEADS = 4
DESK_CHUNK = 64


# ---------------------------------------------------------------- parameters


@dataclass
class LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    ff1: np.ndarray
    ff2: np.ndarray


@dataclass
class ToyStackParams:
    """Pre-norm residual decoder: x + attn(ln(x)), then x + ffn(ln(x))."""

    layers: list[LayerWeights]
    heads: int
    embed: np.ndarray  # vocab x d, used for prompt ids and decoded tokens
    unembed: np.ndarray  # d x vocab
    causal: bool = True
    eps: float = 1e-6

    def __post_init__(self):
        d = self.dim
        if d % self.heads:
            raise DimensionError(f"d={d} is not divisible by heads={self.heads}")
        for lw in self.layers:
            for m in (lw.wq, lw.wk, lw.wv, lw.wo):
                if m.shape != (d, d):
                    raise DimensionError("attention projections must be d x d")
        if self.unembed.shape != (d, self.vocab):
            raise DimensionError("unembed must be d x vocab")

    @property
    def dim(self) -> int:
        return self.embed.shape[1]

    @property
    def vocab(self) -> int:
        return self.embed.shape[0]

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def dtype(self):
        return self.embed.dtype

    @classmethod
    def random(cls, layers: int = DESK_LAYERS, heads: int = DESK_HEADS, d: int = 64,
               vocab: int = 128, ffn_mult: int = 2, qk_gain: float = 2.0,
               seed: int = 0, dtype=np.float64) -> ToyStackParams:
        rng = np.random.default_rng(seed)
        dt = resolve_dtype(dtype)
        s = 1.0 / np.sqrt(d)

        def mat(rows, cols, scale):
            return (scale * rng.standard_normal((rows, cols))).astype(dt)

        lws = [LayerWeights(mat(d, d, qk_gain * s), mat(d, d, qk_gain * s), mat(d, d, s),
                            mat(d, d, s), mat(d, ffn_mult * d, s),
                            mat(ffn_mult * d, d, 1.0 / np.sqrt(ffn_mult * d)))
               for _ in range(layers)]
        return cls(lws, heads, mat(vocab, d, 1.0), mat(d, vocab, s))

    def embed_ids(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.intp)
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab):
            raise ValueError("token id out of range")
        return self.embed[ids]


def _norm(x, eps):
    cen = x - x.mean(axis=-1, keepdims=True)
    return cen / np.sqrt((cen * cen).mean(axis=-1, keepdims=True) + eps)


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _ffn(x, lw):
    return np.maximum(x @ lw.ff1, 0.0) @ lw.ff2


# ---------------------------------------------------------------- KV store


@dataclass
class LayerKV:
    keys: np.ndarray
    values: np.ndarray
    positions: np.ndarray

    @property
    def count(self) -> int:
        return self.positions.size


@dataclass
class KVStore:
    layers: list[LayerKV]

    @classmethod
    def empty(cls, n_layers: int, d: int, dtype=np.float64) -> KVStore:
        return cls([LayerKV(np.zeros((0, d), dtype), np.zeros((0, d), dtype),
                            np.zeros(0, np.int64)) for _ in range(n_layers)])

    @property
    def counts(self) -> list[int]:
        return [lk.count for lk in self.layers]

    @property
    def total(self) -> int:
        return sum(self.counts)

    def last_position(self) -> int:
        return max((int(lk.positions[-1]) for lk in self.layers if lk.count), default=-1)

    def append(self, layer: int, keys, values, positions) -> None:
        positions = np.asarray(positions, dtype=np.int64)
        lk = self.layers[layer]
        if positions.size:
            if np.any(np.diff(positions) <= 0):
                raise ValueError("positions must be strictly increasing")
            if lk.count and positions[0] <= lk.positions[-1]:
                raise ValueError("appended positions must follow the retained ones")
        self.layers[layer] = LayerKV(np.concatenate([lk.keys, keys]),
                                     np.concatenate([lk.values, values]),
                                     np.concatenate([lk.positions, positions]))

    def to_jsonl(self) -> str:
        lines = []
        for l, lk in enumerate(self.layers):
            for i in range(lk.count):
                lines.append(json.dumps({
                    "layer": l,
                    "position": int(lk.positions[i]),
                    "key": [float(v) for v in lk.keys[i]],
                    "value": [float(v) for v in lk.values[i]],
                }))
        return "".join(line + "\n" for line in lines)

    def export_jsonl(self, path):
        return atomic_write_text(path, self.to_jsonl())


# ---------------------------------------------------------------- budget


@dataclass(frozen=True)
class ReaderBudget:
    chunk: int  # m
    avg_tokens: int  # M, target mean retained per layer
    memory_len: int  # N
    layers: int = DESK_LAYERS

    def __post_init__(self):
        if min(self.chunk, self.avg_tokens, self.memory_len, self.layers) < 1:
            raise ValueError("reader budget counts must be positive")
        if self.chunk > self.memory_len:
            raise ValueError("chunk length m must not exceed memory length N")
        if self.avg_tokens > self.memory_len:
            raise ValueError("M must not exceed N")

    @property
    def keep_per_chunk(self) -> int:
        """K' = floor(m * L * M / N), at least 1."""
        return max(1, (self.chunk * self.layers * self.avg_tokens) // self.memory_len)

    @property
    def n_chunks(self) -> int:
        return -(-self.memory_len // self.chunk)

    def expected_total(self) -> int:
        """Retained total after all chunks; a short last chunk keeps min(K', candidates)."""
        kp, total = self.keep_per_chunk, 0
        for start in range(0, self.memory_len, self.chunk):
            c = min(self.chunk, self.memory_len - start)
            total += min(kp, c * self.layers)
        return total


# ---------------------------------------------------------------- forward


@dataclass
class ChunkResult:
    outputs: np.ndarray  # (c + S) x d final hidden states, chunk rows first
    fresh: list[tuple[np.ndarray, np.ndarray]]  # per layer (keys, values) of chunk rows
    scores: list[np.ndarray]  # per layer H x S x c post-softmax prompt->chunk weights


def _attend(x_norm, lw, past_k, past_v, heads, causal):
    """One attention sublayer. Returns (output, k, v, probs[H, n, P + n])."""
    n, d = x_norm.shape
    dh = d // heads
    q, k, v = x_norm @ lw.wq, x_norm @ lw.wk, x_norm @ lw.wv
    keys = np.concatenate([past_k, k])
    vals = np.concatenate([past_v, v])
    p = past_k.shape[0]
    qh = q.reshape(n, heads, dh).transpose(1, 0, 2)
    kh = keys.reshape(p + n, heads, dh).transpose(1, 0, 2)
    vh = vals.reshape(p + n, heads, dh).transpose(1, 0, 2)
    logits = qh @ kh.transpose(0, 2, 1) / np.sqrt(dh)
    if causal:
        mask = np.triu(np.ones((n, n), dtype=bool), k=1)
        logits[:, :, p:][:, mask] = -np.inf
    probs = _softmax(logits)
    out = (probs @ vh).transpose(1, 0, 2).reshape(n, d)
    return out @ lw.wo, k, v, probs


def _run_layers(x, kv: KVStore | None, stack: ToyStackParams, extra=None):
    """Push rows ``x`` through all layers on top of ``kv`` (and ``extra`` per-layer caches).

    Returns (hidden, per-layer (k, v), per-layer probs).
    """
    h = x
    fresh, probs_all = [], []
    d = stack.dim
    for l, lw in enumerate(stack.layers):
        pk = [np.zeros((0, d), x.dtype)]
        pv = [np.zeros((0, d), x.dtype)]
        if kv is not None:
            pk.append(kv.layers[l].keys)
            pv.append(kv.layers[l].values)
        if extra is not None:
            pk.append(extra[l][0])
            pv.append(extra[l][1])
        a, k, v, probs = _attend(_norm(h, stack.eps), lw, np.concatenate(pk),
                                 np.concatenate(pv), stack.heads, stack.causal)
        h = h + a
        h = h + _ffn(_norm(h, stack.eps), lw)
        fresh.append((k, v))
        probs_all.append(probs)
    return h, fresh, probs_all


def attn_forward_chunk(chunk: np.ndarray, prompt: np.ndarray, kv: KVStore,
                       stack: ToyStackParams, positions=None) -> ChunkResult:
    """Encode one memory chunk followed by the prompt against the retained cache.

    The store is not modified and the prompt's own KV is discarded.
    """
    chunk = np.atleast_2d(np.asarray(chunk, dtype=stack.dtype))
    prompt = np.asarray(prompt, dtype=stack.dtype).reshape(-1, stack.dim)
    if chunk.shape[1] != stack.dim:
        raise DimensionError(f"chunk width {chunk.shape[1]} != model width {stack.dim}")
    if len(kv.layers) != stack.n_layers:
        raise DimensionError("KV store and stack disagree on layer count")
    c = chunk.shape[0]
    if positions is not None:
        positions = np.asarray(positions, dtype=np.int64)
        if positions.shape != (c,):
            raise DimensionError("need one position per chunk row")
        if c and positions[0] <= kv.last_position():
            raise ValueError("chunk positions must follow every retained position")
    x = np.concatenate([chunk, prompt])
    h, fresh, probs = _run_layers(x, kv, stack)
    counts = kv.counts
    scores = []
    for l, pr in enumerate(probs):
        p = counts[l]
        scores.append(pr[:, c:, p:p + c])
    fresh = [(k[:c], v[:c]) for k, v in fresh]
    return ChunkResult(h, fresh, scores)


def prompt_importance(scores: np.ndarray) -> np.ndarray:
    """a[j] = sum_s (1/H) sum_h A[h, s, j]."""
    scores = np.asarray(scores)
    if scores.ndim != 3:
        raise DimensionError("attention scores must be H x S x chunk")
    return _kernels.prompt_importance(scores)


def select_topk_global(importances: list[np.ndarray], k: int) -> list[np.ndarray]:
    """Pick the ``k`` largest scores across all layers.

    Ties prefer the lower layer, then the lower position. Returns sorted
    position indices per layer.
    """
    if k <= 0:
        raise ValueError("K' must be positive")
    scores = np.concatenate([np.asarray(a, dtype=np.float64) for a in importances]) \
        if importances else np.zeros(0)
    layer = np.concatenate([np.full(len(a), l) for l, a in enumerate(importances)]) \
        if importances else np.zeros(0, int)
    pos = np.concatenate([np.arange(len(a)) for a in importances]) \
        if importances else np.zeros(0, int)
    order = np.lexsort((pos, layer, -scores))[:k]
    return [np.sort(pos[order][layer[order] == l]) for l in range(len(importances))]


def compress_kv(memory: np.ndarray, prompt: np.ndarray, stack: ToyStackParams,
                budget: ReaderBudget) -> KVStore:
    memory = np.asarray(memory, dtype=stack.dtype)
    n = memory.shape[0]
    if n != budget.memory_len:
        raise DimensionError(f"memory has {n} rows but the budget says N={budget.memory_len}")
    if budget.layers != stack.n_layers:
        raise DimensionError("budget and stack disagree on layer count")
    kv = KVStore.empty(stack.n_layers, stack.dim, stack.dtype)
    kp = budget.keep_per_chunk
    for start in range(0, n, budget.chunk):
        pos = np.arange(start, min(start + budget.chunk, n))
        res = attn_forward_chunk(memory[pos], prompt, kv, stack, pos)
        picks = select_topk_global([prompt_importance(a) for a in res.scores], kp)
        for l, idx in enumerate(picks):
            k, v = res.fresh[l]
            kv.append(l, k[idx], v[idx], pos[idx])
    return kv


def reference_forward(x: np.ndarray, stack: ToyStackParams):
    """Unchunked causal forward of ``x``. Returns (hidden, per-layer keys, values)."""
    x = np.asarray(x, dtype=stack.dtype)
    h, fresh, _ = _run_layers(x, None, stack)
    return h, [k for k, _ in fresh], [v for _, v in fresh]


def full_cache_kv(memory: np.ndarray, stack: ToyStackParams) -> KVStore:
    _, ks, vs = reference_forward(memory, stack)
    pos = np.arange(np.asarray(memory).shape[0])
    return KVStore([LayerKV(k, v, pos.copy()) for k, v in zip(ks, vs)])


# ---------------------------------------------------------------- decoding


def prompt_logits(kv: KVStore, prompt: np.ndarray, stack: ToyStackParams) -> np.ndarray:
    """Next-token logits at every prompt position (S x vocab) when the prompt reads ``kv``."""
    prompt = np.asarray(prompt, dtype=stack.dtype).reshape(-1, stack.dim)
    h, _, _ = _run_layers(prompt, kv, stack)
    return _norm(h, stack.eps) @ stack.unembed


@dataclass
class DecodeResult:
    tokens: list[int]
    logits: np.ndarray  # steps x vocab
    extra: dict = field(default_factory=dict)


def decode_with_kv(kv: KVStore, prompt: np.ndarray, stack: ToyStackParams,
                   max_steps: int) -> DecodeResult:
    """Greedy decoding: the prompt reads the cache, then each argmax token is fed back."""
    if max_steps <= 0:
        raise ValueError("max_steps must be positive")
    prompt = np.asarray(prompt, dtype=stack.dtype).reshape(-1, stack.dim)
    if prompt.shape[0] == 0:
        raise ValueError("decoding needs at least one prompt token")
    local = [(np.zeros((0, stack.dim), stack.dtype),) * 2 for _ in stack.layers]
    x = prompt
    tokens, logits = [], []
    for _ in range(max_steps):
        h, fresh, _ = _run_layers(x, kv, stack, local)
        local = [(np.concatenate([lk, k]), np.concatenate([lv, v]))
                 for (lk, lv), (k, v) in zip(local, fresh)]
        z = _norm(h[-1:], stack.eps) @ stack.unembed
        tok = int(np.argmax(z[0]))
        tokens.append(tok)
        logits.append(z[0])
        x = stack.embed_ids([tok])
    return DecodeResult(tokens, np.stack(logits))
