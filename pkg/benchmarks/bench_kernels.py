"""Compiled vs pure-numpy kernel timings, plus one end-to-end protection run.

    python3 benchmarks/bench_kernels.py [--repeat N] [--json out.json]
"""
import argparse
import json
import timeit

import numpy as np

from gaitdeid import kernels
from gaitdeid.models import cached_models
from gaitdeid.protector import ProtectionConfig, Protector
from gaitdeid.silhouette import make_corpus


def _best(fn, repeat, number):
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number


def bench(repeat=5):
    rs = np.random.default_rng(0)
    x = rs.uniform(size=(8, 16, 16))
    g = rs.normal(size=(8, kernels.N_MOMENTS))
    b = (x >= 0.5).astype(float)
    corpus = make_corpus(2, 6, seed=0)
    src, tar = corpus.sequences["id000_nm-05"], corpus.sequences["id001_nm-06"]
    models = cached_models()
    cfg = ProtectionConfig(iterations=10)
    rows = {}
    before = kernels.BACKEND
    try:
        for name in kernels.available_backends():
            kernels.use_backend(name)
            rows[name] = {
                "frame_moments_us": 1e6 * _best(lambda: kernels.frame_moments(x), repeat, 2000),
                "frame_moments_grad_us": 1e6 * _best(lambda: kernels.frame_moments_grad(x, g), repeat, 2000),
                "contour_mask_us": 1e6 * _best(lambda: kernels.contour_mask(b), repeat, 2000),
                "protect_10it_ms": 1e3 * _best(
                    lambda: Protector(models, cfg).protect(src, tar, models.surrogates, keep_latents=False), 3, 1
                ),
            }
    finally:
        kernels.use_backend(before)
    return rows


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="write the timings here as well")
    args = ap.parse_args(argv)
    rows = bench(args.repeat)
    keys = list(next(iter(rows.values())))
    print(f"{'backend':<8}" + "".join(f"{k:>24}" for k in keys))
    for name, r in rows.items():
        print(f"{name:<8}" + "".join(f"{r[k]:>24.2f}" for k in keys))
    if "native" in rows:
        print(f"{'speedup':<8}" + "".join(f"{rows['python'][k] / rows['native'][k]:>23.1f}x" for k in keys))
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
