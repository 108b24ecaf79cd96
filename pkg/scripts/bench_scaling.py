"""Time exact K-nearest CIDEr similar sets on synthetic Zipf corpora.

Prints one row per corpus size with wall time, candidate pairs, exactly
scored pairs and the fraction skipped by the upper-bound pruning.

    python scripts/bench_scaling.py --sizes 1000,2000,5000,10000 --threads 4
"""

import argparse
import time

from ciderbtw.ngram import build_df
from ciderbtw.simset import CiderIndex
from ciderbtw.synth import zipf_corpus


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", default="1000,2000,5000,10000")
    ap.add_argument("--k", type=int, default=5)
    ap.add_argument("--refs", type=int, default=5)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--no-prune", action="store_true", help="score every pair (slow)")
    args = ap.parse_args()

    print(f"{'images':>8} {'index_s':>8} {'search_s':>9} {'candidates':>12} {'scored':>10} {'skipped':>8}")
    for n in (int(s) for s in args.sizes.split(",")):
        corpus = zipf_corpus(n, refs=args.refs, seed=args.seed)
        t0 = time.perf_counter()
        index = CiderIndex(corpus, build_df(corpus))
        t1 = time.perf_counter()
        _, stats = index.all_sets(args.k, prune=not args.no_prune, threads=args.threads)
        t2 = time.perf_counter()
        print(
            f"{n:>8} {t1 - t0:>8.2f} {t2 - t1:>9.2f} {stats.candidate_pairs:>12} "
            f"{stats.scored_pairs:>10} {100 * stats.skipped_fraction:>7.2f}%"
        )


if __name__ == "__main__":
    main()
