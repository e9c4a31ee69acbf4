"""Compiled kernels vs the numpy fallback: micro-benchmarks and one policy generation.

    python3 benchmarks/bench_kernels.py [--repeat 200] [--csv out.csv]
"""

from __future__ import annotations

import argparse
import csv
import sys
import timeit

import numpy as np

from ragdp import _backend, kbase, nn
from ragdp.schedules import make_vp_schedule
from ragdp.samplers import vp_ancestral


def _median_us(fn, repeat: int) -> float:
    times = timeit.repeat(fn, number=1, repeat=repeat)
    return 1e6 * float(np.median(times))


def _swap(kernels) -> None:
    nn.kernels = kernels
    kbase.kernels = kernels


def run(repeat: int) -> list[dict]:
    if _backend.compiled_kernels is None:
        sys.exit("compiled extension not built; run `pip install -e . --no-build-isolation` first")
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1, 256))
    w = rng.standard_normal((256, 256)) / 16
    b = rng.standard_normal(256)
    keys = rng.standard_normal((12000, 8)).astype(np.float32)
    q = rng.standard_normal(8).astype(np.float32)
    net = nn.ScoreNet(4, 2, 2, 16).init_params(rng)
    sched = make_vp_schedule(100, 1e-3, 0.2)
    obs = rng.standard_normal((2, 4))
    init = rng.standard_normal((16, 2))

    cases = {
        "dense_forward 256x256 batch 1": lambda k: (lambda: k.dense_forward(x, w, b, True, True)),
        "l2_argmin 12000x8": lambda k: (lambda: k.l2_argmin(keys, q)),
        "generation DDPM 100 steps": lambda k: (lambda: vp_ancestral(net, sched, obs, init, 100, np.random.default_rng(1))),
    }
    rows = []
    for name, make in cases.items():
        timings = {}
        for label, k in (("compiled", _backend.compiled_kernels), ("python", _backend.python_kernels)):
            _swap(k)
            reps = max(5, repeat // 20) if name.startswith("generation") else repeat
            timings[label] = _median_us(make(k), reps)
        _swap(_backend.kernels)
        rows.append({"case": name, **{f"{k}_us": f"{v:.1f}" for k, v in timings.items()},
                     "speedup": f"{timings['python'] / timings['compiled']:.2f}"})
    return rows


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--csv", help="also write the table here")
    args = ap.parse_args(argv)
    rows = run(args.repeat)
    width = max(len(r["case"]) for r in rows)
    print(f"{'case':<{width}}  {'compiled us':>12}  {'python us':>10}  {'speedup':>7}")
    for r in rows:
        print(f"{r['case']:<{width}}  {r['compiled_us']:>12}  {r['python_us']:>10}  {r['speedup']:>7}")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            writer.writeheader()
            writer.writerows(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
