"""VSTR stream files and synthetic stream generation.

Layout (little-endian): b"VSTR", u32 version, u32 d, u32 frame_count, then
per frame u32 n_visual, u32 n_audio and (n_visual + n_audio) x d f32 rows,
visual rows first.

Generator details that the binary format cannot carry (kind, seed, pair
count, needle location) go to a JSON sidecar ``<stream>.meta.json``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .._io import FormatError, Reader, atomic_write_bytes, atomic_write_text
from .config import StreamConfig

MAGIC = b"VSTR"
VERSION = 1
KINDS = ("random", "associative-pairs", "needle")


@dataclass
class Frame:
    visual: np.ndarray
    audio: np.ndarray


@dataclass
class Stream:
    dim: int
    frames: list[Frame]

    @property
    def n_visual(self) -> int:
        return sum(f.visual.shape[0] for f in self.frames)

    def visual_tokens(self) -> np.ndarray:
        if not self.frames:
            return np.zeros((0, self.dim), np.float32)
        return np.concatenate([f.visual for f in self.frames])


def stream_bytes(stream: Stream) -> bytes:
    parts = [MAGIC, struct.pack("<III", VERSION, stream.dim, len(stream.frames))]
    for f in stream.frames:
        for rows in (f.visual, f.audio):
            if rows.ndim != 2 or rows.shape[1] != stream.dim:
                raise ValueError(f"frame rows must be n x {stream.dim}")
        parts.append(struct.pack("<II", f.visual.shape[0], f.audio.shape[0]))
        parts.append(np.ascontiguousarray(f.visual, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(f.audio, dtype="<f4").tobytes())
    return b"".join(parts)


def stream_from_bytes(data: bytes) -> Stream:
    r = Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("not a VSTR stream", 0)
    version = r.u32("version")
    if version != VERSION:
        raise FormatError(f"unsupported stream version {version}", 4)
    dim, n_frames = r.unpack("<II", "header")
    if dim == 0:
        raise FormatError("token dimension must be positive", 8)
    frames = []
    for i in range(n_frames):
        nv, na = r.unpack("<II", f"frame {i} header")
        raw = r.take((nv + na) * dim * 4, f"frame {i} rows")
        rows = np.frombuffer(raw, dtype="<f4").reshape(nv + na, dim).astype(np.float32)
        frames.append(Frame(rows[:nv], rows[nv:]))
    r.expect_end()
    return Stream(dim, frames)


def write_stream(stream: Stream, path, meta: dict | None = None) -> Path:
    path = atomic_write_bytes(path, stream_bytes(stream))
    if meta is not None:
        atomic_write_text(meta_path(path), json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def read_stream(path) -> Stream:
    with open(path, "rb") as fh:
        return stream_from_bytes(fh.read())


def meta_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta.json")


def read_meta(path) -> dict:
    p = meta_path(path)
    if not p.exists():
        return {}
    return json.loads(p.read_text())


# ---------------------------------------------------------------- generation


def _gaussian(rng, n, d, std):
    return (std * rng.standard_normal((n, d))).astype(np.float32)


def generate_stream(config: StreamConfig, kind: str = "random", pairs: int = 20,
                    codebook_size: int = 64) -> tuple[Stream, dict]:
    """Build a synthetic stream deterministically from ``config.seed``.

    random: i.i.d. Gaussian tokens. associative-pairs: one frame per pair
    holding [key, value]; keys are distinct entries of a seeded codebook.
    needle: near-duplicate distractors around a shared direction with one
    orthogonal token planted at a random place.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown stream kind {kind!r}; choose from {', '.join(KINDS)}")
    rng = np.random.default_rng(config.seed)
    d, k, na, std = config.dim, config.tokens_per_frame, config.audio_per_frame, config.token_std
    meta = {"kind": kind, "seed": config.seed, "dim": d, "token_std": std,
            "frame_rate": config.frame_rate}
    frames = []
    if kind == "random":
        for _ in range(config.frames):
            frames.append(Frame(_gaussian(rng, k, d, std), _gaussian(rng, na, d, std)))
    elif kind == "associative-pairs":
        if pairs < 0:
            raise ValueError("pair count must be >= 0")
        size = max(codebook_size, pairs)
        codebook = _gaussian(rng, size, d, std)
        keys = codebook[rng.choice(size, size=pairs, replace=False)]
        values = _gaussian(rng, pairs, d, std)
        for i in range(pairs):
            frames.append(Frame(np.stack([keys[i], values[i]]), np.zeros((0, d), np.float32)))
        meta.update(pair_count=pairs, codebook_size=size)
    else:
        base = rng.standard_normal(d)
        base /= np.linalg.norm(base)
        needle = rng.standard_normal(d)
        needle -= needle.dot(base) * base
        needle *= std * np.sqrt(d) / np.linalg.norm(needle)
        n_frames = max(config.frames, 1)
        for _ in range(n_frames):
            rows = std * np.sqrt(d) * base + 0.1 * std * rng.standard_normal((k, d))
            frames.append(Frame(rows.astype(np.float32), _gaussian(rng, na, d, std)))
        nf, nr = int(rng.integers(n_frames)), int(rng.integers(k))
        frames[nf].visual[nr] = needle.astype(np.float32)
        meta.update(needle_frame=nf, needle_row=nr)
    meta["frames"] = len(frames)
    return Stream(d, frames), meta


def gen_synthetic_stream(config: StreamConfig, kind: str, path, pairs: int = 20) -> Path:
    stream, meta = generate_stream(config, kind, pairs)
    return write_stream(stream, path, meta)
