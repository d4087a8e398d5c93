"""Numba vs numpy kernel timings.

    python3 benchmarks/bench_kernels.py [--elements N] [--repeat R] [--end-to-end]

Both paths are checked for identical output before timing. ``--end-to-end``
also times a short ``actcompress train`` run with and without
``ACTCOMPRESS_DISABLE_NUMBA``.
"""

import argparse
import os
import subprocess
import sys
import time
import timeit

import numpy as np

from actcompress import kernels
from actcompress._accel import HAVE_NUMBA


def _inputs(elements, group_size, seed=0):
    rng = np.random.default_rng(seed)
    n = 64
    dim = elements // n
    x = rng.standard_normal(n * dim).astype(np.float32)
    bits = rng.integers(1, 9, n).astype(np.uint8)
    g = x.reshape(n, dim)
    groups = -(-dim // group_size)
    pad = np.full((n, groups * group_size - dim), np.nan, dtype=np.float32)
    blocks = np.concatenate([g, pad], axis=1).reshape(n * groups, group_size)
    lo = np.nanmin(blocks, axis=1).astype(np.float64)
    hi = np.nanmax(blocks, axis=1).astype(np.float64)
    return x, dim, bits, hi - lo, lo


def bench(elements, repeat, group_size=256):
    x, dim, bits, ranges, zeros = _inputs(elements, group_size)
    key = 12345
    widths = np.repeat(bits, dim)
    paths = {"numpy": (kernels.np_stochastic_round, kernels.np_pack_bits, kernels.np_unpack_bits)}
    if HAVE_NUMBA:
        paths["numba"] = (kernels.nb_stochastic_round, kernels.nb_pack_bits, kernels.nb_unpack_bits)
    results = {}
    outputs = {}
    for name, (rnd, pack, unpack) in paths.items():
        codes = rnd(x, dim, group_size, bits, ranges, zeros, key)  # also triggers jit
        buf = pack(codes, widths)
        back = unpack(buf, widths)
        outputs[name] = (codes.tobytes(), buf.tobytes(), back.tobytes())
        results[name] = {
            "round": min(timeit.repeat(lambda: rnd(x, dim, group_size, bits, ranges, zeros, key),
                                       number=1, repeat=repeat)),
            "pack": min(timeit.repeat(lambda: pack(codes, widths), number=1, repeat=repeat)),
            "unpack": min(timeit.repeat(lambda: unpack(buf, widths), number=1, repeat=repeat)),
        }
    if len(outputs) == 2 and outputs["numpy"] != outputs["numba"]:
        raise SystemExit("numba and numpy paths disagree")
    return results


def end_to_end(dataset="synthetic:n=4096,d=256,k=10", batch_size=128, epochs=1):
    cmd = [sys.executable, "-m", "actcompress", "train", "--model", "cnn", "--level", "L3", "--bits", "2",
           "--dataset", dataset, "--batch-size", str(batch_size), "--epochs", str(epochs),
           "--out", os.devnull]
    out = {}
    for name, flag in (("numba", "0"), ("numpy", "1")):
        env = dict(os.environ, ACTCOMPRESS_DISABLE_NUMBA=flag)
        subprocess.run(cmd, env=env, check=True)  # warm the jit cache
        t = time.perf_counter()
        subprocess.run(cmd, env=env, check=True)
        out[name] = time.perf_counter() - t
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--elements", type=int, default=1 << 20)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--end-to-end", action="store_true")
    args = ap.parse_args(argv)

    res = bench(args.elements, args.repeat)
    print(f"{args.elements} elements, best of {args.repeat}")
    print(f"{'kernel':8s}" + "".join(f"{p:>12s}" for p in res) + ("     speedup" if len(res) == 2 else ""))
    for k in ("round", "pack", "unpack"):
        row = f"{k:8s}" + "".join(f"{res[p][k] * 1e3:10.2f}ms" for p in res)
        if len(res) == 2:
            row += f"{res['numpy'][k] / res['numba'][k]:11.1f}x"
        print(row)
    if args.end_to_end:
        e2e = end_to_end()
        print("train (cnn, L3, 4096 x 16x16 inputs, batch 128, 1 epoch): " + ", ".join(f"{k} {v:.2f}s" for k, v in e2e.items()))


if __name__ == "__main__":
    main()
