"""Compiled vs. numpy kernels, plus an end-to-end TTT step under each backend.

    python benchmarks/bench_kernels.py [--repeat 200]

The end-to-end numbers come from child processes because the backend is
chosen once, at import.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from tttmem import _kernels
from tttmem._kernels import _pykernels

STEP_SNIPPET = """
import timeit, numpy as np
from tttmem import _kernels
from tttmem.optimizers import OptimizerSpec
from tttmem.ttt import TokenBatch, TttLayerParams, init_fast_weights, ttt_step
layer = TttLayerParams.near_identity(seed=0)
w = init_fast_weights(layer, 0)
x = TokenBatch(np.random.default_rng(0).standard_normal((32, 64)))
spec = OptimizerSpec({kind!r})
n = {repeat}
t = min(timeit.repeat(lambda: ttt_step(x, w, layer, spec), number=n, repeat=3)) / n
print(_kernels.BACKEND, t)
"""


def kernel_cases(rng):
    h = rng.standard_normal((32, 256))
    y = rng.standard_normal((32, 32))
    gain, bias = np.ones(32), np.zeros(32)
    _, yhat, inv = _pykernels.layer_norm_rows(y, gain, bias, 1e-6)
    z = rng.standard_normal((272, 64)).astype(np.float32)
    attn = rng.random((4, 8, 64))
    return {
        "gelu_fwd 32x256": lambda impl: _kernels.gelu_fwd(h, impl=impl),
        "layer_norm_rows 32x32": lambda impl: _kernels.layer_norm_rows(y, gain, bias, 1e-6, impl=impl),
        "ln_project 32x32": lambda impl: _kernels.ln_project(y, yhat, inv, impl=impl),
        "adjacent_cosine 272x64": lambda impl: _kernels.adjacent_cosine(z, impl=impl),
        "prompt_importance 4x8x64": lambda impl: _kernels.prompt_importance(attn, impl=impl),
    }


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--step-repeat", type=int, default=20)
    args = ap.parse_args(argv)

    impls = {"python": _pykernels}
    try:
        from tttmem._kernels import _ckernels
        impls["cython"] = _ckernels
    except ImportError:
        print("compiled extension not built; only the numpy backend is timed")

    rng = np.random.default_rng(0)
    print(f"{'kernel':28s}" + "".join(f"{k:>14s}" for k in impls) + "   speedup")
    for name, fn in kernel_cases(rng).items():
        times = {}
        for label, impl in impls.items():
            times[label] = min(timeit.repeat(lambda: fn(impl), number=args.repeat, repeat=3)) / args.repeat
        row = "".join(f"{times[k] * 1e6:12.1f}us" for k in impls)
        sp = times["python"] / times["cython"] if "cython" in times else float("nan")
        print(f"{name:28s}{row}   {sp:6.2f}x")

    print()
    print("ttt_step, one 32-token batch (d=64, 2 heads, hidden 256)")
    for kind in ("sgd", "muon", "hf"):
        res = {}
        for force in ("0", "1"):
            env = dict(os.environ, TTTMEM_PURE_PYTHON=force)
            out = subprocess.run([sys.executable, "-c", STEP_SNIPPET.format(kind=kind, repeat=args.step_repeat)],
                                 env=env, capture_output=True, text=True, check=True).stdout.split()
            res[out[0]] = float(out[1])
        line = "  ".join(f"{k}={v * 1e3:.2f}ms" for k, v in sorted(res.items()))
        print(f"  {kind:5s} {line}")


if __name__ == "__main__":
    main()
