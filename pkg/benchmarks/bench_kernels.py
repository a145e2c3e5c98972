"""Time the compiled kernels against the numpy fallback.

Run with ``python3 benchmarks/bench_kernels.py [--batch 4096] [--repeat 20]``.
Both backends are imported directly, so one process measures both; each
kernel result is also compared so a speedup never hides a wrong answer.
"""
import argparse
import timeit

import numpy as np

from dcap.kernels import _pykernels

try:
    from dcap.kernels import _ckernels
except ImportError:  # extension not built
    _ckernels = None


def workloads(batch, n, d, rng):
    left, right = (a.astype(np.int64) for a in np.triu_indices(n, 1))
    m = left.size
    Z = rng.normal(size=(batch, n, d))
    X = rng.normal(size=(batch, n, d))
    G = rng.normal(size=(batch, m, d))
    P = rng.normal(size=(batch, m, d))
    Gp = rng.normal(size=(batch, n, d))
    vocab = 4000
    ids = rng.integers(0, vocab, batch * n).astype(np.int64)
    src = rng.normal(size=(batch * n, d))
    scores = rng.random(batch * 16)
    labels = (rng.random(batch * 16) < 0.3).astype(np.int8)
    return {
        "pair_expand inner": lambda k: k.pair_expand(Z, X, left, right, False),
        "pair_expand outer": lambda k: k.pair_expand(Z, X, left, right, True),
        "pair_expand_backward": lambda k: k.pair_expand_backward(G, Z, X, left, right, False),
        "adaptive_pool": lambda k: k.adaptive_pool(P, n),
        "adaptive_pool_backward": lambda k: k.adaptive_pool_backward(Gp, m),
        "scatter_add_rows": lambda k: k.scatter_add_rows(np.zeros((vocab, d)), ids, src),
        "rank_auc": lambda k: k.rank_auc(scores, labels),
    }


def _same(a, b):
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    if a is None:  # in-place kernels
        return True
    return np.allclose(a, b, rtol=0, atol=1e-12)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=4096)
    ap.add_argument("--fields", type=int, default=5)
    ap.add_argument("--dim", type=int, default=16)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)

    rng = np.random.default_rng(0)
    jobs = workloads(args.batch, args.fields, args.dim, rng)
    print(f"batch={args.batch} n={args.fields} d={args.dim} repeat={args.repeat}")
    if _ckernels is None:
        print("compiled extension not available; timing the python backend only")
    print(f"{'kernel':24} {'python ms':>10} {'cython ms':>10} {'speedup':>8}  agree")
    for name, job in jobs.items():
        t_py = min(timeit.repeat(lambda: job(_pykernels), number=1, repeat=args.repeat)) * 1e3
        if _ckernels is None:
            print(f"{name:24} {t_py:10.3f} {'-':>10} {'-':>8}  -")
            continue
        t_c = min(timeit.repeat(lambda: job(_ckernels), number=1, repeat=args.repeat)) * 1e3
        ok = _same(job(_pykernels), job(_ckernels))
        print(f"{name:24} {t_py:10.3f} {t_c:10.3f} {t_py / t_c:7.2f}x  {'yes' if ok else 'NO'}")


if __name__ == "__main__":
    main()
