"""Mean between-set CIDEr as the similar set grows, per selection strategy.

Uses a ring corpus where caption overlap falls off strictly with ring
distance, and scores each image's first reference as its generated caption.
Random sets serve as the baseline: their CBV should not depend on K in
expectation, while nearest-neighbor sets should fall as K grows.

    python scripts/cbv_trend.py --images 100 --ks 1,3,5,7,10
"""

import argparse

from ciderbtw.distinct import evaluate
from ciderbtw.ngram import Scorer, build_df
from ciderbtw.simset import build_sets_cider, build_sets_image, build_sets_random, build_sets_retrieval
from ciderbtw.synth import ring_corpus, ring_embeddings


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--images", type=int, default=100)
    ap.add_argument("--ks", default="1,3,5,7,10")
    ap.add_argument("--width", type=int, default=6)
    ap.add_argument("--jitter", type=float, default=0.0, help="noise on caption embeddings")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    ks = [int(k) for k in args.ks.split(",")]
    corpus = ring_corpus(args.images, width=args.width)
    scorer = Scorer(corpus, build_df(corpus))
    emb = ring_embeddings(corpus, jitter=args.jitter, seed=args.seed)
    top = max(ks)
    strategies = {
        "cider": build_sets_cider(corpus, "train", top, scorer.df),
        "embed-retrieval": build_sets_retrieval(corpus, "train", top, emb),
        "embed-image": build_sets_image(corpus, "train", top, emb),
        "random": build_sets_random(corpus, "train", top, seed=args.seed),
    }
    generated = {i: corpus.refs(i)[0].tokens for i in corpus.ids()}

    print("strategy".ljust(16) + "".join(f"K={k:<7}" for k in ks))
    for name, sets in strategies.items():
        means = [evaluate(generated, scorer, sets, k=k).mean_cider_btw for k in ks]
        print(name.ljust(16) + "".join(f"{10 * m:<9.2f}" for m in means))


if __name__ == "__main__":
    main()
