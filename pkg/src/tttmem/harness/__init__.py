"""Streaming driver, synthetic streams, analyses and the CLI."""

from .analysis import reader_eval, recall_eval, sweep_update_norm, ttt_statistics
from .config import StreamConfig, load_config, parse_optimizer
from .pipeline import run_stream
from .streams import gen_synthetic_stream, read_stream, write_stream

__all__ = [
    "StreamConfig", "load_config", "parse_optimizer", "run_stream", "gen_synthetic_stream",
    "read_stream", "write_stream", "sweep_update_norm", "ttt_statistics", "recall_eval",
    "reader_eval",
]
