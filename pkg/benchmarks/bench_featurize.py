"""Compare the compiled and pure-Python n-gram hashing kernels.

    python3 benchmarks/bench_featurize.py [--questions N] [--repeat R]

Hashes a synthetic question batch with both kernels, checks they agree,
and reports the best-of-R wall time for each.
"""
import argparse
import random
import sys
import timeit

import numpy as np

from routesql.router import _hashing_py, tokenize
from routesql.router._kernels import BACKEND, hash_ngrams

WORDS = ("how many singers are there in each country show the name of stadium with highest capacity "
         "list all concerts after 2014 ordered by year what is average age of french singers").split()


def make_batch(n, seed=0):
    rng = random.Random(seed)
    return [tokenize(" ".join(rng.choices(WORDS, k=rng.randint(6, 24)))) for _ in range(n)]


def run(fn, batch, dim):
    for toks in batch:
        fn(toks, dim, 0)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--questions", type=int, default=5000)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--dim", type=int, default=1 << 18)
    args = ap.parse_args(argv)

    batch = make_batch(args.questions)
    for toks in batch[:200]:
        assert np.array_equal(hash_ngrams(toks, args.dim, 0), _hashing_py.hash_ngrams(toks, args.dim, 0))

    py = min(timeit.repeat(lambda: run(_hashing_py.hash_ngrams, batch, args.dim), number=1, repeat=args.repeat))
    print(f"questions={args.questions} tokens={sum(map(len, batch))} repeat={args.repeat}")
    print(f"python  {py * 1e3:9.2f} ms")
    if BACKEND != "cython":
        print("cython  (extension not built; reinstall with Cython available)")
        return 0
    cy = min(timeit.repeat(lambda: run(hash_ngrams, batch, args.dim), number=1, repeat=args.repeat))
    print(f"cython  {cy * 1e3:9.2f} ms   speedup x{py / cy:.1f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
