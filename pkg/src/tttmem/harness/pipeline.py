"""End-to-end streaming driver: TTT layer, then budgeted memory."""

from __future__ import annotations

import json
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .._io import atomic_write_text
from ..memory import (AUDIO, VISUAL, MemoryState, append_and_discard, append_and_merge,
                      write_snapshot)
from ..numerics import MlpParams
from ..ttt import FastWeights, StepMetrics, TokenBatch, init_fast_weights, ttt_step
from .config import StreamConfig
from .streams import Stream, read_stream


@dataclass
class _PendingFrame:
    index: int
    start: int  # stream index of the frame's first row
    n_visual: int
    audio: np.ndarray
    outputs: list = field(default_factory=list)

    @property
    def done(self) -> bool:
        return sum(o.shape[0] for o in self.outputs) == self.n_visual


@dataclass
class RunResult:
    metrics: list[StepMetrics]
    memory: MemoryState
    weights: FastWeights
    max_rows: int
    state_bytes: int
    max_buffer: int


def metrics_jsonl(metrics: list[StepMetrics]) -> str:
    return "".join(json.dumps(asdict(m)) + "\n" for m in metrics)


def save_weights(w: FastWeights, path) -> None:
    arrays = {f"h{h}_{name}": a for h, wh in enumerate(w.heads)
              for name, a in zip(("w1", "b1", "w2", "b2"), wh.arrays())}
    with open(path, "wb") as fh:
        np.savez(fh, step=np.int64(w.step), **arrays)


def load_weights(path) -> FastWeights:
    with np.load(path) as z:
        n = len([k for k in z.files if k.endswith("_w1")])
        heads = [MlpParams(*(z[f"h{h}_{name}"] for name in ("w1", "b1", "w2", "b2")))
                 for h in range(n)]
        return FastWeights(heads, int(z["step"]))


def run_stream(config: StreamConfig, stream: Stream | str | Path, out_dir=None,
               merge: bool = False, timed: bool = False, checkpoint_every: int = 0,
               max_batches: int | None = None) -> RunResult:
    """Stream every frame through TTT and memory maintenance.

    Visual rows are buffered into batches of ``batch_size`` regardless of
    frame boundaries; a trailing partial batch is processed at the end. A
    frame's memory rows (its TTT outputs, then its audio) are appended as soon
    as all of its visual rows have been through the layer.

    With ``out_dir`` set, writes ``metrics.jsonl`` and ``memory.vsms`` there
    (and ``weights_<step>.npz`` before every ``checkpoint_every``-th step).
    """
    if not isinstance(stream, Stream):
        stream = read_stream(stream)
    if stream.dim != config.dim:
        raise ValueError(f"stream has d={stream.dim} but the config says dim={config.dim}")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    dt = config.dtype
    layer = config.layer()
    w = init_fast_weights(layer)
    mem = MemoryState.empty(config.memory_budget, config.dim, dt)
    maintain = append_and_merge if merge else append_and_discard
    b = config.batch_size
    metrics: list[StepMetrics] = []

    buf_rows: list[np.ndarray] = []
    buf_owner: list[int] = []  # pending-frame slot of each buffered row
    pending: deque[_PendingFrame] = deque()
    max_rows = 0
    max_buffer = 0
    state_bytes = 0

    def flush_frames():
        nonlocal mem, max_rows
        while pending and pending[0].done:
            f = pending.popleft()
            vis = (np.concatenate(f.outputs) if f.outputs
                   else np.zeros((0, config.dim), dt))
            rows = np.concatenate([vis, f.audio.astype(dt)])
            si = np.arange(f.start, f.start + rows.shape[0], dtype=np.uint64)
            mod = np.concatenate([np.full(vis.shape[0], VISUAL, np.uint8),
                                  np.full(f.audio.shape[0], AUDIO, np.uint8)])
            mem = maintain(mem, rows, si, mod)
            max_rows = max(max_rows, mem.rows)

    def step(n):
        nonlocal w, buf_rows, buf_owner, state_bytes
        x = np.concatenate(buf_rows)[:n]
        owners = buf_owner[:n]
        rest = np.concatenate(buf_rows)[n:]
        buf_rows = [rest] if rest.shape[0] else []
        buf_owner = buf_owner[n:]
        if out is not None and checkpoint_every and w.step % checkpoint_every == 0:
            save_weights(w, out / f"weights_{w.step:06d}.npz")
        res = ttt_step(TokenBatch(x.astype(dt)), w, layer, config.optimizer, timed=timed)
        w = res.weights
        metrics.append(res.metrics)
        slots = {f.index: f for f in pending}
        owners = np.asarray(owners)
        for idx in np.unique(owners):
            slots[int(idx)].outputs.append(res.output[owners == idx])
        flush_frames()
        state_bytes = max(state_bytes, mem.nbytes() + w.nbytes())

    pos = 0
    for fi, frame in enumerate(stream.frames):
        if max_batches is not None and len(metrics) >= max_batches:
            break
        nv = frame.visual.shape[0]
        pending.append(_PendingFrame(fi, pos, nv, frame.audio))
        pos += nv + frame.audio.shape[0]
        if nv:
            buf_rows.append(frame.visual)
            buf_owner.extend([fi] * nv)
        max_buffer = max(max_buffer, len(buf_owner))
        while len(buf_owner) >= b:
            step(b)
        flush_frames()
    if buf_owner:
        step(len(buf_owner))
    flush_frames()

    result = RunResult(metrics, mem, w, max_rows, state_bytes, max_buffer)
    if out is not None:
        atomic_write_text(out / "metrics.jsonl", metrics_jsonl(metrics))
        write_snapshot(mem, out / "memory.vsms")
    return result
