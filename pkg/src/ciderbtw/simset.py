"""Similar-image sets: CIDEr similarity, embedding retrieval, image features, random.

The CIDEr strategy is the expensive one: every image must be compared with
every other image of its split. :class:`CiderIndex` does this exactly with a
sparse upper bound that lets most pairs be skipped without scoring them.

Ordering convention everywhere: higher score first, ties by ascending image id.
"""

from __future__ import annotations

import json
import math
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Mapping

import numpy as np
import scipy.sparse as sp

from . import jsonfmt
from .corpus import Corpus, ParseError, ValidationError
from .ngram import DEFAULT_SIGMA, MAX_N, DfTable, Scorer, tfidf_vector

STRATEGIES = ("cider", "embed-retrieval", "embed-image", "random")

# scores closer than this are treated as ties when ranking
TIE_DECIMALS = 12
# float slack on the pruning bound; far above accumulated rounding error
_BOUND_SLACK = 1e-9


@dataclass(frozen=True)
class SimilarSet:
    target: int
    neighbors: tuple[tuple[int, float], ...]
    strategy: str

    def __post_init__(self):
        ids = [i for i, _ in self.neighbors]
        if self.target in ids:
            raise ValueError(f"similar set of {self.target} contains the target")
        if len(set(ids)) != len(ids):
            raise ValueError(f"similar set of {self.target} has duplicate neighbors")

    @property
    def ids(self) -> list[int]:
        return [i for i, _ in self.neighbors]

    @property
    def k(self) -> int:
        return len(self.neighbors)

    def head(self, k: int) -> "SimilarSet":
        """The first ``k`` neighbors (sets are ordered, so this is the top-k set)."""
        if k > self.k:
            raise ValidationError(f"set of {self.target} has only {self.k} neighbors, asked {k}")
        return SimilarSet(self.target, self.neighbors[:k], self.strategy)


def rank_key(image_id: int, score: float) -> tuple[float, int]:
    return (-round(score, TIE_DECIMALS), image_id)


def _top_k(ids: np.ndarray, scores: np.ndarray, k: int) -> list[tuple[int, float]]:
    order = np.lexsort((ids, -np.round(scores, TIE_DECIMALS)))[:k]
    return [(int(ids[o]), float(scores[o])) for o in order]


def _check_k(n_images: int, k: int, split) -> None:
    if k < 1:
        raise ValidationError(f"K must be >= 1, got {k}")
    if n_images < k + 1:
        raise ValidationError(
            f"split {split!r} has {n_images} images; K={k} needs at least {k + 1}"
        )


# ---------------------------------------------------------------------------
# I/O


def write_sets_jsonl(sets: Mapping[int, SimilarSet], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for target in sorted(sets):
            s = sets[target]
            rec = {"target": target, "strategy": s.strategy, "neighbors": [list(n) for n in s.neighbors]}
            fh.write(jsonfmt.dumps(rec) + "\n")


def read_sets_jsonl(path) -> dict[int, SimilarSet]:
    sets = {}
    offset = 0
    with open(path, "rb") as fh:
        for line in fh:
            if line.strip():
                try:
                    rec = json.loads(line)
                    s = SimilarSet(
                        int(rec["target"]),
                        tuple((int(i), float(v)) for i, v in rec["neighbors"]),
                        str(rec["strategy"]),
                    )
                except (ValueError, KeyError, TypeError) as exc:
                    raise ParseError(path, offset, str(exc)) from exc
                sets[s.target] = s
            offset += len(line)
    return sets


# ---------------------------------------------------------------------------
# Embeddings


def _unit(v, what) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v)
    if not np.isfinite(norm) or norm == 0.0:
        raise ValidationError(f"{what}: zero or non-finite embedding")
    return v / norm


class EmbeddingTable:
    """Unit-normalised image and caption embeddings.

    ``generated`` optionally holds embeddings of generated captions keyed by
    image id; they are only used for caption-to-image recall.
    """

    def __init__(self, dim: int, image_vecs, caption_vecs, generated=None):
        self.dim = dim
        self.image_vecs: dict[int, np.ndarray] = dict(image_vecs)
        self.caption_vecs: dict[tuple[int, int], np.ndarray] = dict(caption_vecs)
        self.generated: dict[int, np.ndarray] = dict(generated or {})
        self._by_image: dict[int, list[int]] = {}
        for image_id, idx in sorted(self.caption_vecs):
            self._by_image.setdefault(image_id, []).append(idx)

    @classmethod
    def from_vectors(cls, image_vecs, caption_vecs, generated=None) -> "EmbeddingTable":
        dims = {len(v) for v in image_vecs.values()} | {len(v) for v in caption_vecs.values()}
        dims |= {len(v) for v in (generated or {}).values()}
        if len(dims) != 1:
            raise ValidationError(f"inconsistent embedding dimensions {sorted(dims)}")
        return cls(
            dims.pop(),
            {int(i): _unit(v, f"img {i}") for i, v in image_vecs.items()},
            {(int(i), int(k)): _unit(v, f"cap {i}/{k}") for (i, k), v in caption_vecs.items()},
            {int(i): _unit(v, f"gen {i}") for i, v in (generated or {}).items()},
        )

    def image(self, image_id: int) -> np.ndarray:
        try:
            return self.image_vecs[image_id]
        except KeyError:
            raise ValidationError(f"no image embedding for image {image_id}") from None

    def caption_indices(self, image_id: int) -> list[int]:
        try:
            return self._by_image[image_id]
        except KeyError:
            raise ValidationError(f"no caption embeddings for image {image_id}") from None

    def captions_of(self, image_id: int) -> np.ndarray:
        return np.stack([self.caption_vecs[(image_id, k)] for k in self.caption_indices(image_id)])


def load_embeddings(path) -> EmbeddingTable:
    """Read the tab-separated embedding format (rows are normalised on load).

    Row kinds: ``img\\t<id>\\t<floats>``, ``cap\\t<id>\\t<index>\\t<floats>`` and
    ``gen\\t<id>\\t<floats>`` for generated-caption embeddings.
    """
    image_vecs, caption_vecs, generated = {}, {}, {}
    dim = None
    offset = 0
    with open(path, "rb") as fh:
        for line in fh:
            text = line.decode("utf-8").rstrip("\n")
            if not text.strip():
                offset += len(line)
                continue
            try:
                if dim is None:
                    if not text.startswith("dim="):
                        raise ValueError("first line must be 'dim=<d>'")
                    dim = int(text[4:])
                else:
                    parts = text.split("\t")
                    kind = parts[0]
                    if kind == "cap":
                        key, vals = (int(parts[1]), int(parts[2])), parts[3]
                    elif kind in ("img", "gen"):
                        key, vals = int(parts[1]), parts[2]
                    else:
                        raise ValueError(f"unknown row kind {kind!r}")
                    vec = np.array([float(x) for x in vals.split()], dtype=np.float64)
                    if len(vec) != dim:
                        raise ValueError(f"expected {dim} floats, got {len(vec)}")
                    target = {"img": image_vecs, "cap": caption_vecs, "gen": generated}[kind]
                    if key in target:
                        raise ValueError(f"duplicate {kind} row {key}")
                    target[key] = vec
            except (ValueError, IndexError) as exc:
                raise ParseError(path, offset, str(exc)) from exc
            offset += len(line)
    if dim is None:
        raise ParseError(path, 0, "empty embedding file")
    table = EmbeddingTable.from_vectors(image_vecs, caption_vecs, generated)
    table.dim = dim
    return table


def write_embeddings(table: EmbeddingTable, path) -> None:
    def fmt(v):
        return " ".join(repr(float(x)) for x in v)

    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"dim={table.dim}\n")
        for i in sorted(table.image_vecs):
            fh.write(f"img\t{i}\t{fmt(table.image_vecs[i])}\n")
        for i, k in sorted(table.caption_vecs):
            fh.write(f"cap\t{i}\t{k}\t{fmt(table.caption_vecs[(i, k)])}\n")
        for i in sorted(table.generated):
            fh.write(f"gen\t{i}\t{fmt(table.generated[i])}\n")


def vse_similarity(i: int, j: int, emb: EmbeddingTable) -> float:
    """Best cosine between image ``i`` and any caption of image ``j``."""
    return float(np.max(emb.captions_of(j) @ emb.image(i)))


def image_similarity(i: int, j: int, emb: EmbeddingTable) -> float:
    """Cosine between the two image embeddings."""
    return float(emb.image(i) @ emb.image(j))


class RetrievalIndex:
    """Image-to-caption retrieval over the captions of one split."""

    def __init__(self, corpus: Corpus, emb: EmbeddingTable, split: str | None = None):
        self.corpus = corpus
        self.emb = emb
        self.split = split
        ids = corpus.ids(split)
        keys = []
        for i in ids:
            keys.extend((i, k) for k in emb.caption_indices(i))
        self.row_image = np.array([i for i, _ in keys], dtype=np.int64)
        self.row_caption = np.array([k for _, k in keys], dtype=np.int64)
        self.matrix = np.stack([emb.caption_vecs[key] for key in keys])
        self.n_images = len(ids)

    def query(self, target: int, k: int) -> SimilarSet:
        _check_k(self.n_images, k, self.split)
        scores = self.matrix @ self.emb.image(target)
        n_total = len(scores)
        n_r = self.corpus.n_refs(target) * (k + 1)
        while True:
            n_r = min(n_r, n_total)
            # include every caption tied with the n_r-th score
            if n_r < n_total:
                cut = np.partition(-scores, n_r - 1)[n_r - 1]
                pool = np.flatnonzero(-scores <= cut)
            else:
                pool = np.arange(n_total)
            order = pool[
                np.lexsort((self.row_caption[pool], self.row_image[pool], -scores[pool]))
            ][:n_r]
            neighbors, seen = [], {target}
            for r in order:
                image_id = int(self.row_image[r])
                if image_id not in seen:
                    seen.add(image_id)
                    neighbors.append((image_id, float(scores[r])))
                    if len(neighbors) == k:
                        return SimilarSet(target, tuple(neighbors), "embed-retrieval")
            if n_r == n_total:
                raise ValidationError(f"only {len(neighbors)} retrievable images for {target}")
            n_r *= 2


def build_set_retrieval(
    target: int, k: int, emb: EmbeddingTable, corpus: Corpus, split: str | None = None
) -> SimilarSet:
    """Similar set of ``target`` by image-to-caption retrieval.

    Retrieves the ``N*(K+1)`` nearest captions, keeps their distinct images in
    retrieval order (dropping the target), and doubles the retrieval depth
    until ``k`` neighbors are found.
    """
    if split is None:
        split = corpus.split[target]
    return RetrievalIndex(corpus, emb, split).query(target, k)


def build_sets_retrieval(
    corpus: Corpus, split: str, k: int, emb: EmbeddingTable
) -> dict[int, SimilarSet]:
    index = RetrievalIndex(corpus, emb, split)
    return {t: index.query(t, k) for t in corpus.ids(split)}


def build_sets_image(
    corpus: Corpus, split: str, k: int, emb: EmbeddingTable
) -> dict[int, SimilarSet]:
    """Top-``k`` images by image-embedding cosine."""
    ids = np.array(corpus.ids(split), dtype=np.int64)
    _check_k(len(ids), k, split)
    mat = np.stack([emb.image(int(i)) for i in ids])
    sets = {}
    for pos, target in enumerate(ids):
        scores = mat @ mat[pos]
        mask = ids != target
        sets[int(target)] = SimilarSet(
            int(target), tuple(_top_k(ids[mask], scores[mask], k)), "embed-image"
        )
    return sets


def build_sets_random(corpus: Corpus, split: str, k: int, seed: int = 0) -> dict[int, SimilarSet]:
    """Uniform sample of ``k`` other images per target.

    Each target draws from its own generator seeded by ``(seed, target)`` so
    the result does not depend on iteration order. Neighbors carry score 0
    and are listed by ascending id.
    """
    ids = np.array(corpus.ids(split), dtype=np.int64)
    _check_k(len(ids), k, split)
    sets = {}
    for pos, target in enumerate(ids):
        rng = np.random.default_rng([seed, int(target)])
        pick = rng.choice(len(ids) - 1, size=k, replace=False)
        pick = np.where(pick >= pos, pick + 1, pick)
        sets[int(target)] = SimilarSet(
            int(target), tuple((int(i), 0.0) for i in sorted(ids[pick])), "random"
        )
    return sets


# ---------------------------------------------------------------------------
# CIDEr similarity


def cider_similarity(i: int, j: int, scorer: Scorer) -> float:
    """Mean CIDEr-D over all reference pairs of images ``i`` and ``j``."""
    ri, rj = scorer.refs(i), scorer.refs(j)
    total = 0.0
    for a in ri:
        for b in rj:
            total += scorer.pair(a, b)
    return total / (len(ri) * len(rj))


@dataclass
class PruneStats:
    targets: int = 0
    candidate_pairs: int = 0
    scored_pairs: int = 0
    zero_bound_pairs: int = 0

    @property
    def skipped_fraction(self) -> float:
        if self.candidate_pairs == 0:
            return 0.0
        return 1.0 - self.scored_pairs / self.candidate_pairs

    def merge(self, other: "PruneStats") -> None:
        self.targets += other.targets
        self.candidate_pairs += other.candidate_pairs
        self.scored_pairs += other.scored_pairs
        self.zero_bound_pairs += other.zero_bound_pairs


class CiderIndex:
    """Inverted n-gram index for exact top-K CIDEr-similarity search.

    Captions are stored as one CSR matrix over a joint feature space (all
    orders 1..4 side by side). The bound: clipping and the length penalty
    can only lower a pair's score, so S_c(i, j) <= 2.5 * m_i . m_j where m_i
    is the mean over image i's captions of its per-order unit vectors. One
    sparse product gives that bound for a block of targets against every
    image; only candidates whose bound reaches the running K-th best score
    are scored exactly.
    """

    def __init__(
        self,
        corpus: Corpus,
        df: DfTable,
        split: str | None = None,
        sigma: float = DEFAULT_SIGMA,
        plain: bool = False,
    ):
        self.split = split
        self.sigma = sigma
        self.plain = plain
        self.ids = np.array(corpus.ids(split), dtype=np.int64)
        features: dict[tuple[str, ...], int] = {}
        feat_n: list[int] = []
        indptr, indices, data, inv_norm, lengths, img_ptr = [0], [], [], [], [], [0]
        for image_id in self.ids:
            for cap in corpus.images[int(image_id)]:
                vec = tfidf_vector(cap, df)
                for n in range(MAX_N):
                    for gram, w in vec.weights[n].items():
                        fid = features.get(gram)
                        if fid is None:
                            fid = features[gram] = len(feat_n)
                            feat_n.append(n)
                        indices.append(fid)
                        data.append(w)
                indptr.append(len(indices))
                inv_norm.append([1.0 / math.sqrt(s) if s > 0 else 0.0 for s in vec.sq_norms])
                lengths.append(len(cap))
            img_ptr.append(len(lengths))

        self.n_features = len(feat_n)
        self.indptr = np.array(indptr, dtype=np.int64)
        self.indices = np.array(indices, dtype=np.int64)
        self.data = np.array(data, dtype=np.float64)
        self.lengths = np.array(lengths, dtype=np.float64)
        self.img_ptr = np.array(img_ptr, dtype=np.int64)
        self.n_refs = np.diff(self.img_ptr)
        feat_n_arr = np.array(feat_n, dtype=np.int64)
        inv = np.array(inv_norm, dtype=np.float64).reshape(-1, MAX_N)
        row_of_entry = np.repeat(np.arange(len(lengths)), np.diff(self.indptr))
        self.entry_inv = inv[row_of_entry, feat_n_arr[self.indices]]

        # image-level mean of per-order unit vectors, for the bound
        cap_img = np.repeat(np.arange(len(self.ids)), self.n_refs)
        unit = self.data * self.entry_inv / self.n_refs[cap_img[row_of_entry]]
        self.means = sp.csr_matrix(
            (unit, (cap_img[row_of_entry], self.indices)),
            shape=(len(self.ids), max(self.n_features, 1)),
        )
        self.means.sum_duplicates()
        self._means_t = self.means.T.tocsr()
        self._lookup = np.full(max(self.n_features, 1), -1, dtype=np.int64)
        self._pos = {int(i): p for p, i in enumerate(self.ids)}

    def __len__(self) -> int:
        return len(self.ids)

    def position(self, image_id: int) -> int:
        try:
            return self._pos[image_id]
        except KeyError:
            raise ValidationError(f"image {image_id} is not in the index") from None

    def bounds(self, positions: np.ndarray) -> np.ndarray:
        """Upper bounds on S_c for ``positions`` (rows) against every image (columns)."""
        block = self.means[positions] @ self._means_t
        return 2.5 * block.toarray()

    def exact(self, t: int, cand: np.ndarray) -> np.ndarray:
        """Exact S_c between target position ``t`` and candidate positions ``cand``."""
        cand = np.asarray(cand, dtype=np.int64)
        if len(cand) == 0:
            return np.zeros(0)
        r0, r1 = self.img_ptr[t], self.img_ptr[t + 1]
        n_t = r1 - r0
        e0, e1 = self.indptr[r0], self.indptr[r1]
        t_cols = self.indices[e0:e1]
        t_rows = np.repeat(np.arange(n_t), np.diff(self.indptr[r0 : r1 + 1]))
        uniq, local = np.unique(t_cols, return_inverse=True)
        a = np.zeros((n_t, len(uniq)))
        a_inv = np.zeros((n_t, len(uniq)))
        a[t_rows, local] = self.data[e0:e1]
        a_inv[t_rows, local] = self.entry_inv[e0:e1]

        # rows of all candidate captions, grouped by candidate
        starts, counts = self.img_ptr[cand], self.n_refs[cand]
        first = np.cumsum(counts) - counts
        rows = np.repeat(starts - first, counts) + np.arange(counts.sum())
        es, ec = self.indptr[rows], self.indptr[rows + 1] - self.indptr[rows]
        efirst = np.cumsum(ec) - ec
        epos = np.repeat(es - efirst, ec) + np.arange(ec.sum())
        erow = np.repeat(np.arange(len(rows)), ec)

        self._lookup[uniq] = np.arange(len(uniq))
        loc = self._lookup[self.indices[epos]]
        self._lookup[uniq] = -1
        hit = loc >= 0
        epos, erow, loc = epos[hit], erow[hit], loc[hit]

        v = self.data[epos]
        at = a[:, loc]
        prod = at * v if self.plain else np.minimum(at, v) * v
        prod *= a_inv[:, loc] * self.entry_inv[epos]
        n_rows = len(rows)
        key = (np.arange(n_t)[:, None] * n_rows + erow[None, :]).ravel()
        cos = np.bincount(key, weights=prod.ravel(), minlength=n_t * n_rows)
        # bincount returns ints when there are no shared grams at all
        cos = cos.astype(np.float64, copy=False).reshape(n_t, n_rows)
        if not self.plain:
            delta = self.lengths[r0:r1, None] - self.lengths[rows][None, :]
            cos *= np.exp(-(delta * delta) / (2.0 * self.sigma * self.sigma))
        per_row = (10.0 / MAX_N) * cos.sum(axis=0)
        return np.add.reduceat(per_row, first) / (n_t * counts)

    def similarity(self, i: int, j: int) -> float:
        return float(self.exact(self.position(i), np.array([self.position(j)]))[0])

    def top_k(self, t: int, k: int, bound: np.ndarray, prune: bool = True, stats: PruneStats | None = None):
        """Exact top-``k`` neighbors of position ``t`` given its bound row."""
        n = len(self.ids)
        bound = bound.copy()
        bound[t] = -np.inf
        if not prune:
            cand = np.delete(np.arange(n), t)
            scores = self.exact(t, cand)
            if stats is not None:
                stats.candidate_pairs += n - 1
                stats.scored_pairs += n - 1
            return _top_k(self.ids[cand], scores, k)

        # a zero bound means no shared n-gram: the exact score is 0
        zero = np.flatnonzero(bound == 0.0)
        pool_pos = [zero[:k]]
        pool_score = [np.zeros(min(k, len(zero)))]
        live = np.flatnonzero(bound > 0.0)
        chunk = max(4 * k, 32)
        if len(live) > chunk:
            # evaluation order only affects speed; any top-chunk split will do
            head = np.argpartition(-bound[live], chunk - 1)[:chunk]
            rest = np.ones(len(live), dtype=bool)
            rest[head] = False
            live = np.concatenate([live[head], live[rest]])
        scored = 0
        theta = -np.inf
        while len(live):
            batch, live = live[:chunk], live[chunk:]
            pool_pos.append(batch)
            pool_score.append(self.exact(t, batch))
            scored += len(batch)
            all_pos = np.concatenate(pool_pos)
            all_score = np.concatenate(pool_score)
            if len(all_pos) >= k:
                keep = np.lexsort((all_pos, -np.round(all_score, TIE_DECIMALS)))[:k]
                pool_pos, pool_score = [all_pos[keep]], [all_score[keep]]
                theta = all_score[keep[-1]]
            live = live[bound[live] >= theta - _BOUND_SLACK]
            live = live[np.argsort(-bound[live], kind="stable")]
            chunk *= 2
        if stats is not None:
            stats.candidate_pairs += n - 1
            stats.scored_pairs += scored
            stats.zero_bound_pairs += len(zero)
        all_pos = np.concatenate(pool_pos)
        return _top_k(self.ids[all_pos], np.concatenate(pool_score), k)

    def sets_for(self, positions: np.ndarray, k: int, prune: bool = True, block: int = 256):
        stats = PruneStats()
        out = []
        for b0 in range(0, len(positions), block):
            pos = positions[b0 : b0 + block]
            bounds = self.bounds(pos)
            for row, t in enumerate(pos):
                nb = self.top_k(int(t), k, bounds[row], prune, stats)
                out.append(SimilarSet(int(self.ids[t]), tuple(nb), "cider"))
            stats.targets += len(pos)
        return out, stats

    def all_sets(self, k: int, prune: bool = True, threads: int = 1):
        """Similar sets for every indexed image plus pruning statistics."""
        _check_k(len(self.ids), k, self.split)
        positions = np.arange(len(self.ids))
        if threads <= 1:
            sets, stats = self.sets_for(positions, k, prune)
        else:
            parts = np.array_split(positions, threads * 4)
            ctx = multiprocessing.get_context("fork")
            global _WORKER_INDEX
            _WORKER_INDEX = self
            try:
                with ProcessPoolExecutor(max_workers=threads, mp_context=ctx) as pool:
                    results = list(pool.map(_worker_sets, parts, [k] * len(parts), [prune] * len(parts)))
            finally:
                _WORKER_INDEX = None
            sets, stats = [], PruneStats()
            for s, st in results:
                sets.extend(s)
                stats.merge(st)
        return {s.target: s for s in sets}, stats


_WORKER_INDEX: CiderIndex | None = None


def _worker_sets(positions, k, prune):
    return _WORKER_INDEX.sets_for(positions, k, prune)


def build_sets_cider(
    corpus: Corpus,
    split: str,
    k: int,
    df: DfTable,
    sigma: float = DEFAULT_SIGMA,
    plain: bool = False,
    threads: int = 1,
) -> dict[int, SimilarSet]:
    """Exact top-``k`` CIDEr-similar images for every image of ``split``."""
    index = CiderIndex(corpus, df, split, sigma, plain)
    sets, _ = index.all_sets(k, threads=threads)
    return sets


def build_sets(
    strategy: str,
    corpus: Corpus,
    split: str,
    k: int,
    df: DfTable | None = None,
    emb: EmbeddingTable | None = None,
    seed: int = 0,
    sigma: float = DEFAULT_SIGMA,
    threads: int = 1,
) -> dict[int, SimilarSet]:
    """Dispatch on ``strategy``; embedding strategies need ``emb``."""
    if strategy == "cider":
        if df is None:
            raise ValidationError("cider strategy needs a df table")
        return build_sets_cider(corpus, split, k, df, sigma, threads=threads)
    if strategy in ("embed-retrieval", "embed-image"):
        if emb is None:
            raise ValidationError(f"strategy {strategy!r} needs an embedding file")
        if strategy == "embed-retrieval":
            return build_sets_retrieval(corpus, split, k, emb)
        return build_sets_image(corpus, split, k, emb)
    if strategy == "random":
        return build_sets_random(corpus, split, k, seed)
    raise ValidationError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
