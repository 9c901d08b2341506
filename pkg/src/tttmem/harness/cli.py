"""Command-line entry point: ``tttmem <subcommand> [options]``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .._io import FormatError, atomic_write_text
from ..memory import read_snapshot
from . import analysis
from .config import DEFAULT_MATCHED_NORM, U64_MAX, ConfigError, load_config, parse_optimizer
from ..ttt import TokenBatch, init_fast_weights
from .pipeline import run_stream
from .streams import KINDS, gen_synthetic_stream, read_stream


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v <= U64_MAX:
        raise argparse.ArgumentTypeError("seed must be in [0, 2^64)")
    return v


def _floats(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t.strip()]


def _labels(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", metavar="PATH", default=d, help="TOML run configuration")
    p.add_argument("--seed", metavar="U64", type=_u64, default=d, help="override the config seed")
    p.add_argument("--out", metavar="DIR", default=argparse.SUPPRESS if suppress else ".",
                   help="output directory (default: current)")
    p.add_argument("--precision", choices=("f32", "f64"), default=d)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tttmem", description=__doc__)
    _global_flags(ap, suppress=False)
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        _global_flags(p, suppress=True)
        return p

    p = add("gen-synthetic", "write a synthetic VSTR stream")
    p.add_argument("--kind", choices=KINDS, default="random")
    p.add_argument("--pairs", type=int, default=20, help="pair count for associative-pairs")
    p.add_argument("--name", default="stream.vstr")

    p = add("stream-run", "run a stream through TTT and memory")
    p.add_argument("--stream", required=True)
    p.add_argument("--merge", action="store_true", help="use the merging baseline")
    p.add_argument("--timed", action="store_true",
                   help="record wall time per step (makes output non-reproducible)")
    p.add_argument("--checkpoint-every", type=int, default=0)

    p = add("sweep-norm", "reconstruction loss vs. update norm on one mini-batch")
    p.add_argument("--stream", help="take the first batch from this stream (default: random)")
    p.add_argument("--optimizers", type=_labels, default=["sgd", "muon", "hf-mlp-2", "hf-mlp-3"])
    p.add_argument("--norms", type=_floats, default=list(analysis.DEFAULT_NORM_GRID))

    p = add("ttt-stats", "per-step statistics at a matched update norm")
    p.add_argument("--stream", required=True)
    p.add_argument("--optimizers", type=_labels, default=list(analysis.DEFAULT_OPTIMIZERS))
    p.add_argument("--norm", type=float, default=DEFAULT_MATCHED_NORM)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--workers", type=int, default=1)

    p = add("recall-eval", "associative recall against a frozen-weight control")
    p.add_argument("--stream", required=True, help="associative-pairs stream")
    p.add_argument("--optimizers", type=_labels, default=None,
                   help="default: the configured optimizer")
    p.add_argument("--probes", type=int, default=None, help="probe only the last N pairs")

    p = add("reader-eval", "compressed vs. full-cache decoding on a memory snapshot")
    p.add_argument("--snapshot", required=True)
    p.add_argument("--budgets", type=_floats, default=None,
                   help="target average per-layer KV counts M (default: N/4, N/2, N)")
    p.add_argument("--prompt-len", type=int, default=8)
    p.add_argument("--decode-steps", type=int, default=4)
    return ap


def _write_json(path: Path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cfg = load_config(args.config, seed=args.seed, precision=args.precision)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    record = {"command": args.command, "seed": cfg.seed, "config": cfg.to_dict()}

    if args.command == "gen-synthetic":
        path = gen_synthetic_stream(cfg, args.kind, out / args.name, pairs=args.pairs)
        record["stream"] = path.name

    elif args.command == "stream-run":
        res = run_stream(cfg, args.stream, out, merge=args.merge, timed=args.timed,
                         checkpoint_every=args.checkpoint_every)
        record.update(steps=len(res.metrics), memory_rows=res.memory.rows,
                      max_memory_rows=res.max_rows, state_bytes=res.state_bytes)

    elif args.command == "sweep-norm":
        specs = [parse_optimizer(s, cfg.optimizer) for s in args.optimizers]
        if args.stream:
            tokens = read_stream(args.stream).visual_tokens()[:cfg.batch_size]
            if tokens.shape[0] == 0:
                raise ValueError("stream has no visual tokens")
            layer = cfg.layer()
            batch, w = TokenBatch(tokens.astype(cfg.dtype)), init_fast_weights(layer)
        else:
            batch, w, layer = analysis.random_sweep_instance(cfg, cfg.seed)
        rows = analysis.sweep_update_norm(batch, w, layer, specs, args.norms)
        atomic_write_text(out / "sweep.csv", analysis.to_csv(rows, analysis.SWEEP_COLUMNS))
        record["minima"] = {k: {"loss": v[0], "norm": v[1]}
                            for k, v in analysis.sweep_minima(rows).items()}

    elif args.command == "ttt-stats":
        specs = [parse_optimizer(s, cfg.optimizer) for s in args.optimizers]
        rows = analysis.ttt_statistics(cfg, read_stream(args.stream), specs, args.norm,
                                       steps=args.steps, workers=args.workers)
        atomic_write_text(out / "ttt_stats.csv", analysis.to_csv(rows, analysis.STATS_COLUMNS))
        record.update(matched_norm=args.norm,
                      mean_relative_output_change=analysis.mean_relative_change(rows))

    elif args.command == "recall-eval":
        stream = read_stream(args.stream)
        labels = args.optimizers or [cfg.optimizer.label]
        reports = [analysis.recall_eval(cfg, stream, parse_optimizer(s, cfg.optimizer),
                                        args.probes).to_dict() for s in labels]
        _write_json(out / "recall.json", reports)
        record["fraction_improved"] = {r["optimizer"]: r["fraction_improved"] for r in reports}

    elif args.command == "reader-eval":
        mem = read_snapshot(args.snapshot)
        n = mem.rows
        budgets = args.budgets or sorted({max(1, n // 4), max(1, n // 2), max(n, 1)})
        rows = analysis.reader_eval(cfg, mem, budgets, args.prompt_len,
                                    decode_steps=args.decode_steps)
        atomic_write_text(out / "reader.csv", analysis.to_csv(rows, analysis.READER_COLUMNS))

    _write_json(out / f"{args.command}.json", record)
    return 0


def main(argv=None) -> int:
    try:
        return run(argv)
    except (ConfigError, FormatError, ValueError, OSError) as exc:
        print(f"tttmem: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
