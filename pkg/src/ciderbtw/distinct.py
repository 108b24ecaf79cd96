"""Between-set CIDEr, caption-file evaluation, retrieval recall and correlation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from . import jsonfmt
from .corpus import Caption, ParseError, ValidationError, tokenize
from .ngram import Scorer, TfIdfVector
from .simset import EmbeddingTable, SimilarSet


def _as_vector(caption, scorer: Scorer) -> TfIdfVector:
    if isinstance(caption, TfIdfVector):
        return caption
    return scorer.vector(caption)


def cider_btw(caption: Caption | Sequence[str] | TfIdfVector, sset: SimilarSet, scorer: Scorer) -> float:
    """Mean CIDEr-D of ``caption`` against the references of its similar images.

    Each similar image contributes the mean over its own references, so
    images with more references do not weigh more.
    """
    if not sset.neighbors:
        raise ValidationError(f"similar set of image {sset.target} is empty")
    vec = _as_vector(caption, scorer)
    total = 0.0
    for image_id in sset.ids:
        total += scorer.score(vec, scorer.refs(image_id))
    return total / sset.k


def load_generated(path) -> dict[int, tuple[str, ...]]:
    """Read generated captions from JSON lines ``{"image_id":..,"caption":".."}``."""
    out: dict[int, tuple[str, ...]] = {}
    offset = 0
    with open(path, "rb") as fh:
        for line in fh:
            if line.strip():
                try:
                    rec = json.loads(line)
                    image_id, text = int(rec["image_id"]), str(rec["caption"])
                except (ValueError, KeyError, TypeError) as exc:
                    raise ParseError(path, offset, str(exc)) from exc
                if image_id in out:
                    raise ValidationError(f"{path}: two captions for image {image_id}")
                toks = tuple(tokenize(text))
                if not toks:
                    raise ValidationError(f"{path}: empty caption for image {image_id}")
                out[image_id] = toks
            offset += len(line)
    return out


def recall_at_k(query_caps: Mapping[int, np.ndarray], gallery_imgs: Mapping[int, np.ndarray], k: int) -> float:
    """Fraction of queries whose own image is among the top ``k`` gallery images.

    Ranking is by cosine, ties broken by ascending image id.
    """
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    if k > len(gallery_imgs):
        raise ValidationError(f"k={k} exceeds gallery size {len(gallery_imgs)}")
    missing = sorted(set(query_caps) - set(gallery_imgs))
    if missing:
        raise ValidationError(f"queries without gallery image: {missing[:20]}")
    if not query_caps:
        raise ValidationError("no queries")
    gids = np.array(sorted(gallery_imgs), dtype=np.int64)
    gallery = np.stack([np.asarray(gallery_imgs[i], dtype=np.float64) for i in gids])
    qids = np.array(sorted(query_caps), dtype=np.int64)
    queries = np.stack([np.asarray(query_caps[i], dtype=np.float64) for i in qids])
    scores = queries @ gallery.T
    own_col = np.searchsorted(gids, qids)
    own = scores[np.arange(len(qids)), own_col][:, None]
    better = (scores > own).sum(axis=1) + ((scores == own) & (gids[None, :] < qids[:, None])).sum(axis=1)
    return float(np.mean(better < k))


def correlate(a: Sequence[float], b: Sequence[float], method: str = "pearson") -> float:
    """Pearson, Spearman (average ranks) or Kendall tau-b correlation."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValidationError("correlate needs two 1-d sequences of equal length")
    if len(a) < 2:
        raise ValidationError("correlate needs at least two points")
    if np.all(a == a[0]) or np.all(b == b[0]):
        raise ValidationError("correlation undefined for constant input")
    if method == "pearson":
        r = stats.pearsonr(a, b)[0]
    elif method == "spearman":
        r = stats.spearmanr(a, b)[0]
    elif method == "kendall":
        r = stats.kendalltau(a, b, variant="b")[0]
    else:
        raise ValidationError(f"unknown correlation method {method!r}")
    return float(np.clip(r, -1.0, 1.0))


@dataclass
class EvalReport:
    image_ids: list[int]
    cider: list[float]
    cider_btw: list[float]
    k: int
    vocab_size: int
    recall: dict[int, float] = field(default_factory=dict)

    @property
    def mean_cider(self) -> float:
        return float(np.mean(self.cider))

    @property
    def mean_cider_btw(self) -> float:
        return float(np.mean(self.cider_btw))

    def summary(self) -> dict:
        out = {
            "images": len(self.image_ids),
            "k": self.k,
            "cider": self.mean_cider,
            "cider_btw": self.mean_cider_btw,
            "cider_x10": 10 * self.mean_cider,
            "cider_btw_x10": 10 * self.mean_cider_btw,
            "vocab_size": self.vocab_size,
        }
        for r, v in sorted(self.recall.items()):
            out[f"R@{r}"] = v
        return out

    def to_json(self) -> str:
        per_image = [
            {"image_id": i, "cider": c, "cider_btw": b, "cider_x10": 10 * c, "cider_btw_x10": 10 * b}
            for i, c, b in zip(self.image_ids, self.cider, self.cider_btw)
        ]
        return jsonfmt.dumps({"summary": self.summary(), "per_image": per_image}) + "\n"

    def to_tsv(self) -> str:
        return "".join(f"{k}\t{jsonfmt.dumps(v)}\n" for k, v in self.summary().items())


def evaluate(
    generated: Mapping[int, Sequence[str]],
    scorer: Scorer,
    sets: Mapping[int, SimilarSet],
    emb: EmbeddingTable | None = None,
    k: int | None = None,
    recall_ks: Sequence[int] = (1, 5, 10),
) -> EvalReport:
    """Score generated captions for accuracy (CIDEr-D) and distinctiveness.

    ``k`` truncates every similar set to its first ``k`` neighbors; by default
    the sets are used whole. Recall is reported when ``emb`` carries
    generated-caption embeddings.
    """
    corpus = scorer.corpus
    ids = sorted(generated)
    if not ids:
        raise ValidationError("no generated captions")
    unknown = [i for i in ids if i not in corpus.images]
    if unknown:
        raise ValidationError(f"generated captions for unknown images: {unknown[:20]}")
    splits = {corpus.split[i] for i in ids}
    if len(splits) > 1:
        raise ValidationError(f"generated captions span several splits: {sorted(splits)}")
    missing = [i for i in ids if i not in sets]
    if missing:
        raise ValidationError(f"no similar set for images: {missing[:50]}")
    cider, btw, ks = [], [], set()
    vocab = set()
    for i in ids:
        sset = sets[i] if k is None else sets[i].head(k)
        vec = scorer.vector(generated[i])
        cider.append(scorer.score(vec, scorer.refs(i)))
        btw.append(cider_btw(vec, sset, scorer))
        ks.add(sset.k)
        vocab.update(generated[i])
    recall = {}
    if emb is not None and emb.generated:
        split = splits.pop()
        gallery = {i: emb.image(i) for i in corpus.ids(split)}
        queries = {}
        for i in ids:
            if i not in emb.generated:
                raise ValidationError(f"no generated-caption embedding for image {i}")
            queries[i] = emb.generated[i]
        for r in recall_ks:
            if r <= len(gallery):
                recall[r] = recall_at_k(queries, gallery, r)
    set_k = ks.pop() if len(ks) == 1 else -1
    return EvalReport(ids, cider, btw, set_k, len(vocab), recall)
