"""Fixed-budget token memory with similarity discarding.

New rows are appended at the end; when the memory exceeds its budget the
rows most similar (cosine) to their successor are dropped. The last row is
never dropped. Audio tokens are appended directly, without passing through
the TTT layer, and then compete for the budget like any other row.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import _kernels
from ._io import FormatError, Reader, atomic_write_bytes
from .numerics import DimensionError, NonFiniteError

VISUAL = 0
AUDIO = 1

SNAPSHOT_MAGIC = b"VSMS"
SNAPSHOT_VERSION = 1

DESK_BUDGET = 256
DESK_TOKENS_PER_FRAME = 16
FULL_SCALE_BUDGET = 16_000


@dataclass
class MemoryState:
    budget: int
    tokens: np.ndarray
    stream_index: np.ndarray
    modality: np.ndarray

    def __post_init__(self):
        if self.budget < 1:
            raise ValueError("memory budget must be >= 1")
        self.tokens = np.asarray(self.tokens)
        if self.tokens.ndim != 2:
            raise DimensionError("memory tokens must be a matrix")
        self.stream_index = np.asarray(self.stream_index, dtype=np.uint64)
        self.modality = np.asarray(self.modality, dtype=np.uint8)
        n = self.tokens.shape[0]
        if self.stream_index.shape != (n,) or self.modality.shape != (n,):
            raise DimensionError("provenance length must equal row count")

    @classmethod
    def empty(cls, budget: int, dim: int, dtype=np.float32) -> MemoryState:
        return cls(budget, np.zeros((0, dim), dtype=dtype),
                   np.zeros(0, np.uint64), np.zeros(0, np.uint8))

    @property
    def rows(self) -> int:
        return self.tokens.shape[0]

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]

    def nbytes(self) -> int:
        return self.tokens.nbytes + self.stream_index.nbytes + self.modality.nbytes

    def copy(self) -> MemoryState:
        return MemoryState(self.budget, self.tokens.copy(), self.stream_index.copy(),
                           self.modality.copy())

    def __eq__(self, other):
        if not isinstance(other, MemoryState):
            return NotImplemented
        return (self.budget == other.budget and self.tokens.shape == other.tokens.shape
                and np.array_equal(self.tokens, other.tokens)
                and np.array_equal(self.stream_index, other.stream_index)
                and np.array_equal(self.modality, other.modality))


def _provenance(n: int, stream_index, modality):
    si = np.zeros(n, np.uint64) if stream_index is None else np.asarray(stream_index, np.uint64)
    if np.ndim(modality) == 0:
        mod = np.full(n, VISUAL if modality is None else modality, np.uint8)
    else:
        mod = np.asarray(modality, np.uint8)
    if si.shape != (n,) or mod.shape != (n,):
        raise DimensionError("provenance length must equal incoming row count")
    return si, mod


def _concat(mem: MemoryState, incoming, stream_index, modality):
    incoming = np.asarray(incoming, dtype=mem.tokens.dtype)
    if incoming.ndim == 1 and incoming.size == 0:
        incoming = incoming.reshape(0, mem.dim)
    if incoming.ndim != 2 or incoming.shape[1] != mem.dim:
        raise DimensionError(f"incoming rows must have width {mem.dim}")
    if not np.isfinite(incoming).all():
        raise NonFiniteError("non-finite memory tokens")
    si, mod = _provenance(incoming.shape[0], stream_index, modality)
    return (np.concatenate([mem.tokens, incoming]),
            np.concatenate([mem.stream_index, si]),
            np.concatenate([mem.modality, mod]))


def discard_indices(tokens: np.ndarray, n_drop: int) -> np.ndarray:
    """Indices of the ``n_drop`` rows with the largest successor similarity.

    Ties go to the lower index. Returned sorted ascending.
    """
    if n_drop <= 0:
        return np.zeros(0, dtype=np.intp)
    s = _kernels.adjacent_cosine(tokens)
    order = np.lexsort((np.arange(s.size), -s))
    return np.sort(order[:n_drop])


def append_and_discard(mem: MemoryState, incoming, stream_index=None,
                       modality=VISUAL) -> MemoryState:
    """Append ``incoming`` and drop rows until at most ``budget`` remain.

    Similarities are computed once on the concatenation; the excess rows with
    the highest similarity to their successor are removed together.
    """
    tokens, si, mod = _concat(mem, incoming, stream_index, modality)
    excess = tokens.shape[0] - mem.budget
    if excess > 0:
        keep = np.ones(tokens.shape[0], dtype=bool)
        keep[discard_indices(tokens, excess)] = False
        tokens, si, mod = tokens[keep], si[keep], mod[keep]
    return MemoryState(mem.budget, tokens, si, mod)


def append_and_merge(mem: MemoryState, incoming, stream_index=None,
                     modality=VISUAL) -> MemoryState:
    """Baseline: repeatedly average the most similar adjacent pair.

    The merged row keeps the earlier token's provenance.
    """
    tokens, si, mod = _concat(mem, incoming, stream_index, modality)
    tokens = tokens.copy()
    while tokens.shape[0] > mem.budget:
        s = _kernels.adjacent_cosine(tokens)
        i = int(np.argmax(s))
        tokens[i] = 0.5 * (tokens[i] + tokens[i + 1])
        tokens = np.delete(tokens, i + 1, axis=0)
        si = np.delete(si, i + 1)
        mod = np.delete(mod, i + 1)
    return MemoryState(mem.budget, tokens, si, mod)


def append_audio(mem: MemoryState, audio_tokens, stream_index=None) -> MemoryState:
    """Audio rows skip the TTT layer and go straight to the end of memory."""
    return append_and_discard(mem, audio_tokens, stream_index, AUDIO)


# ---------------------------------------------------------------- snapshots


def snapshot_bytes(mem: MemoryState) -> bytes:
    head = SNAPSHOT_MAGIC + struct.pack("<IIII", SNAPSHOT_VERSION, mem.budget, mem.dim, mem.rows)
    rows = np.ascontiguousarray(mem.tokens, dtype="<f4").tobytes()
    prov = np.empty(mem.rows, dtype=[("si", "<u8"), ("mod", "u1")])
    prov["si"] = mem.stream_index
    prov["mod"] = mem.modality
    return head + rows + prov.tobytes()


def snapshot_from_bytes(data: bytes) -> MemoryState:
    r = Reader(data)
    if r.take(4, "magic") != SNAPSHOT_MAGIC:
        raise FormatError("not a VSMS snapshot", 0)
    version = r.u32("version")
    if version != SNAPSHOT_VERSION:
        raise FormatError(f"unsupported snapshot version {version}", 4)
    budget, dim, rows = r.unpack("<III", "header")
    if budget < 1:
        raise FormatError("budget must be >= 1", 8)
    if rows > budget:
        raise FormatError(f"{rows} rows exceed budget {budget}", 16)
    tokens = np.frombuffer(r.take(rows * dim * 4, "token rows"), dtype="<f4")
    prov = np.frombuffer(r.take(rows * 9, "provenance"), dtype=[("si", "<u8"), ("mod", "u1")])
    r.expect_end()
    return MemoryState(budget, tokens.reshape(rows, dim).astype(np.float32),
                       prov["si"].astype(np.uint64), prov["mod"].astype(np.uint8))


def write_snapshot(mem: MemoryState, path):
    return atomic_write_bytes(path, snapshot_bytes(mem))


def read_snapshot(path) -> MemoryState:
    with open(path, "rb") as fh:
        return snapshot_from_bytes(fh.read())
