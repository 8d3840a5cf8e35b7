"""Compare the compiled kernels with the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 20] [--json out.json]

Shapes follow a default toy training step: 32 users x 10 positions, a few
hundred batch items, d=32 activations, and a 500-item ranking pass.
"""
import argparse
import json
import timeit

import numpy as np

from iisan import kernels


def cases(rng):
    x = rng.normal(size=(4096, 32))
    gamma, beta = rng.normal(size=32), rng.normal(size=32)
    y, xhat, rstd = kernels.layernorm_forward(x, gamma, beta, 1e-5, backend="python")
    gy = rng.normal(size=x.shape)
    h = rng.normal(size=(4096, 128))
    b, n, c = 32, 10, 300
    scores = rng.normal(size=(b, n, c))
    logp = np.log(rng.dirichlet(np.ones(c)))
    targets = rng.integers(0, c, (b, n))
    valid = rng.random((b, n)) < 0.8
    admit = rng.random((b, c)) < 0.9
    rank_scores = rng.normal(size=(1000, 500)).round(2)  # rounding creates ties
    rank_targets = rng.integers(0, 500, 1000)
    return {
        "layernorm_forward": lambda be: kernels.layernorm_forward(x, gamma, beta, 1e-5, backend=be),
        "layernorm_backward": lambda be: kernels.layernorm_backward(gy, xhat, rstd, gamma, backend=be),
        "gelu_forward": lambda be: kernels.gelu_forward(h, backend=be),
        "gelu_backward": lambda be: kernels.gelu_backward(h, h, backend=be),
        "debiased_ce": lambda be: kernels.debiased_ce(scores, logp, targets, valid, admit, backend=be),
        "rank_targets": lambda be: kernels.rank_targets(rank_scores, rank_targets, backend=be),
    }


def _max_diff(a, b):
    a = a if isinstance(a, tuple) else (a,)
    b = b if isinstance(b, tuple) else (b,)
    return max(float(np.max(np.abs(np.asarray(p, float) - np.asarray(q, float)))) for p, q in zip(a, b))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--json", help="also write results to this file")
    args = ap.parse_args(argv)

    if kernels.BACKEND != "cython":
        raise SystemExit("compiled kernels are not built; run `pip install -e .` first")
    results = []
    print(f"{'kernel':<20}{'python ms':>12}{'cython ms':>12}{'speedup':>10}{'max |diff|':>12}")
    for name, fn in cases(np.random.default_rng(0)).items():
        row = {"kernel": name}
        for be in ("python", "cython"):
            fn(be)  # warm-up
            row[be] = min(timeit.repeat(lambda: fn(be), number=1, repeat=args.repeat)) * 1e3
        row["speedup"] = row["python"] / row["cython"]
        row["max_abs_diff"] = _max_diff(fn("python"), fn("cython"))
        results.append(row)
        print(f"{name:<20}{row['python']:>12.3f}{row['cython']:>12.3f}"
              f"{row['speedup']:>9.2f}x{row['max_abs_diff']:>12.1e}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(results, fh, indent=2)


if __name__ == "__main__":
    main()
