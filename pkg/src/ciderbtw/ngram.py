"""n-gram document frequencies, TF-IDF vectors and the CIDEr-D scorer.

All similarities in the package bottom out in :func:`cider_d`. Scores are on
the raw ``[0, 10]`` scale; multiply by 10 for the familiar "125.1"-style
numbers reported by coco-caption.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

from .corpus import Caption, Corpus, ValidationError

MAX_N = 4
DEFAULT_SIGMA = 6.0

NGram = tuple[str, ...]


def extract_ngrams(tokens: Sequence[str], n: int) -> Counter:
    """Multiset of contiguous ``n``-grams of ``tokens``."""
    if n < 1 or n > MAX_N:
        raise ValueError(f"n must be in 1..{MAX_N}, got {n}")
    toks = tuple(tokens)
    return Counter(toks[i : i + n] for i in range(len(toks) - n + 1))


@dataclass(frozen=True)
class DfTable:
    """Per-order document frequencies: images whose references contain the gram."""

    df: tuple[dict[NGram, int], ...]
    image_count: int
    split: str = "train"

    def __post_init__(self):
        if len(self.df) != MAX_N:
            raise ValueError(f"expected {MAX_N} df maps, got {len(self.df)}")

    def get(self, gram: NGram) -> int:
        return self.df[len(gram) - 1].get(gram, 0)

    def idf(self, gram: NGram) -> float:
        # unseen grams count as df=1
        return math.log(self.image_count / max(self.get(gram), 1))


def build_df(corpus: Corpus, split: str = "train") -> DfTable:
    ids = corpus.ids(split)
    if not ids:
        raise ValidationError(f"split {split!r} is empty")
    df: list[Counter] = [Counter() for _ in range(MAX_N)]
    for i in ids:
        for n in range(1, MAX_N + 1):
            seen = set()
            for cap in corpus.images[i]:
                seen.update(extract_ngrams(cap.tokens, n))
            df[n - 1].update(seen)
    return DfTable(tuple(dict(d) for d in df), len(ids), split)


def write_df_tsv(table: DfTable, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"#images={table.image_count}\n#split={table.split}\n")
        for n, d in enumerate(table.df, 1):
            for gram in sorted(d):
                fh.write(f"{n}\t{' '.join(gram)}\t{d[gram]}\n")


def read_df_tsv(path) -> DfTable:
    image_count, split = None, "train"
    df: list[dict] = [{} for _ in range(MAX_N)]
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line.startswith("#images="):
                image_count = int(line[len("#images=") :])
            elif line.startswith("#split="):
                split = line[len("#split=") :]
            elif line:
                n, gram, count = line.split("\t")
                df[int(n) - 1][tuple(gram.split(" "))] = int(count)
    if image_count is None:
        raise ValueError(f"{path}: missing '#images=' header")
    return DfTable(tuple(df), image_count, split)


@dataclass(frozen=True)
class TfIdfVector:
    """Sparse per-order TF-IDF weights of one caption.

    ``sq_norms[n-1]`` is the squared L2 norm of the order-``n`` vector.
    """

    weights: tuple[dict[NGram, float], ...]
    sq_norms: tuple[float, ...]
    length: int


def tfidf_vector(caption: Caption | Sequence[str], df: DfTable) -> TfIdfVector:
    """TF-IDF vector with TF normalised by the number of same-order n-grams."""
    tokens = caption.tokens if isinstance(caption, Caption) else tuple(caption)
    weights, sq = [], []
    log_n = math.log(df.image_count)
    for n in range(1, MAX_N + 1):
        counts = extract_ngrams(tokens, n)
        total = sum(counts.values())
        vec = {}
        table = df.df[n - 1]
        for gram, c in counts.items():
            w = (c / total) * (log_n - math.log(max(table.get(gram, 0), 1)))
            if w > 0.0:
                vec[gram] = w
        weights.append(vec)
        sq.append(sum(w * w for w in vec.values()))
    return TfIdfVector(tuple(weights), tuple(sq), len(tokens))


def pair_score(
    cand: TfIdfVector, ref: TfIdfVector, sigma: float = DEFAULT_SIGMA, plain: bool = False
) -> float:
    """Single-reference CIDEr-D on the ``[0, 10]`` scale.

    ``plain=True`` disables count clipping and the length penalty (plain CIDEr).
    """
    total = 0.0
    for n in range(MAX_N):
        sa, sb = cand.sq_norms[n], ref.sq_norms[n]
        if sa == 0.0 or sb == 0.0:
            continue
        a, b = cand.weights[n], ref.weights[n]
        dot = 0.0
        if plain:
            small, big = (a, b) if len(a) <= len(b) else (b, a)
            for g, w in small.items():
                v = big.get(g)
                if v is not None:
                    dot += w * v
        else:
            for g, w in a.items():
                v = b.get(g)
                if v is not None:
                    dot += min(w, v) * v
        total += dot / math.sqrt(sa * sb)
    if not plain:
        delta = cand.length - ref.length
        total *= math.exp(-(delta * delta) / (2.0 * sigma * sigma))
    return 10.0 * total / MAX_N


def cider_d(
    candidate: TfIdfVector,
    references: Sequence[TfIdfVector],
    sigma: float = DEFAULT_SIGMA,
    plain: bool = False,
) -> float:
    """Mean single-reference CIDEr-D of ``candidate`` over ``references``."""
    if not references:
        raise ValueError("cider_d needs at least one reference")
    return sum(pair_score(candidate, r, sigma, plain) for r in references) / len(references)


class Scorer:
    """Caches TF-IDF vectors of a corpus against one df table.

    Most higher-level operations score the same reference captions many
    times; the cache keeps that to one vectorisation per caption.
    """

    def __init__(self, corpus: Corpus, df: DfTable, sigma: float = DEFAULT_SIGMA, plain: bool = False):
        self.corpus = corpus
        self.df = df
        self.sigma = sigma
        self.plain = plain
        self._cache: dict[int, tuple[TfIdfVector, ...]] = {}

    def refs(self, image_id: int) -> tuple[TfIdfVector, ...]:
        vecs = self._cache.get(image_id)
        if vecs is None:
            vecs = tuple(tfidf_vector(c, self.df) for c in self.corpus.refs(image_id))
            self._cache[image_id] = vecs
        return vecs

    def vector(self, caption: Caption | Sequence[str]) -> TfIdfVector:
        return tfidf_vector(caption, self.df)

    def pair(self, a: TfIdfVector, b: TfIdfVector) -> float:
        return pair_score(a, b, self.sigma, self.plain)

    def score(self, cand: TfIdfVector, refs: Sequence[TfIdfVector]) -> float:
        return cider_d(cand, refs, self.sigma, self.plain)
