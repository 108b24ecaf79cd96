"""Training-side reweighting: caption weights, long-tail word weights, negatives.

Nothing here runs a model. Token log-probabilities come from outside and the
loss/reward functions are reference implementations a trainer can check
itself against.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

from . import jsonfmt
from .corpus import Caption, ParseError, ValidationError, VocabStats
from .distinct import cider_btw
from .ngram import Scorer
from .simset import SimilarSet

LAMBDA_W = 1.5
ALPHA_W = 0.75
ALPHA_R = 0.3
ALPHA_NS = 0.05
LTW_AMPLITUDE = 1.0
LTW_BEGIN = 5000
LTW_END = 9487
SET_SIZE = 5

# (image_id, caption_index) -> per-token log-probabilities
TokenLogProbTable = Mapping[tuple[int, int], Sequence[float]]


@dataclass(frozen=True)
class CaptionWeights:
    """Between-set CIDEr ``v`` and training weight ``w`` per reference caption."""

    image_id: int
    v: tuple[float, ...]
    w: tuple[float, ...]

    def __getitem__(self, caption_index: int) -> float:
        return self.w[caption_index]


def weights_from_scores(v: Sequence[float], lambda_w: float = LAMBDA_W, alpha_w: float = ALPHA_W) -> list[float]:
    """``w = lambda_w - alpha_w * v / max(v)``; all ``lambda_w`` when max(v) is 0."""
    if not lambda_w > alpha_w >= 0:
        raise ValidationError(f"need lambda_w > alpha_w >= 0, got {lambda_w}, {alpha_w}")
    top = max(v)
    if top <= 0.0:
        return [lambda_w] * len(v)
    return [lambda_w - alpha_w * (x / top) for x in v]


def caption_weights(
    target: int,
    sset: SimilarSet,
    scorer: Scorer,
    lambda_w: float = LAMBDA_W,
    alpha_w: float = ALPHA_W,
) -> CaptionWeights:
    """Weights for the reference captions of ``target`` from their CIDErBtw."""
    if sset.target != target:
        raise ValidationError(f"similar set belongs to {sset.target}, not {target}")
    v = tuple(cider_btw(vec, sset, scorer) for vec in scorer.refs(target))
    return CaptionWeights(target, v, tuple(weights_from_scores(v, lambda_w, alpha_w)))


@dataclass(frozen=True)
class LtwParams:
    begin: int = LTW_BEGIN
    end: int = LTW_END
    amplitude: float = LTW_AMPLITUDE

    def __post_init__(self):
        if not 1 <= self.begin < self.end:
            raise ValidationError(f"need 1 <= begin < end, got {self.begin}, {self.end}")
        if self.amplitude <= 0:
            raise ValidationError(f"amplitude must be positive, got {self.amplitude}")


def ltw_weight(rank: int, p: LtwParams = LtwParams()) -> float:
    """Long-tail weight of a word with frequency rank ``rank`` (1 = most frequent).

    Flat at 1 up to ``begin``, linear up to ``1 + amplitude`` at ``end`` and
    flat beyond.
    """
    if rank < 1:
        raise ValidationError(f"rank must be >= 1, got {rank}")
    if rank <= p.begin:
        return 1.0
    return 1.0 + p.amplitude * (min(rank, p.end) - p.begin) / (p.end - p.begin)


def ltw_table(stats: VocabStats, p: LtwParams = LtwParams()) -> list[tuple[int, float]]:
    return [(r, ltw_weight(r, p)) for r in range(1, stats.vocab_size + 1)]


def token_weights(tokens: Sequence[str], ltw: tuple[VocabStats, LtwParams] | None) -> list[float]:
    if ltw is None:
        return [1.0] * len(tokens)
    stats, p = ltw
    # out-of-vocabulary words rank after the whole vocabulary
    oov = stats.vocab_size + 1
    return [ltw_weight(stats.ranks.get(t, oov), p) for t in tokens]


def xe_loss(caption: Caption, logprobs: TokenLogProbTable, ltw=None) -> float:
    """Negative log-likelihood of one caption, optionally long-tail weighted."""
    key = (caption.image_id, caption.caption_index)
    try:
        lp = logprobs[key]
    except KeyError:
        raise ValidationError(f"no log-probabilities for caption {key}") from None
    if len(lp) != len(caption.tokens):
        raise ValidationError(
            f"caption {key} has {len(caption.tokens)} tokens but {len(lp)} log-probabilities"
        )
    if any(x > 0 for x in lp):
        raise ValidationError(f"positive log-probability for caption {key}")
    return -sum(w * x for w, x in zip(token_weights(caption.tokens, ltw), lp))


def weighted_xe(
    captions: Sequence[Caption],
    logprobs: TokenLogProbTable,
    weights: CaptionWeights | Sequence[float],
    ltw: tuple[VocabStats, LtwParams] | None = None,
) -> float:
    """Caption-weighted cross-entropy over one image's references.

    ``weights`` is either a :class:`CaptionWeights` (looked up by caption
    index) or a plain sequence aligned with ``captions``.
    """
    if isinstance(weights, CaptionWeights):
        for c in captions:
            if c.image_id != weights.image_id:
                raise ValidationError(f"caption of image {c.image_id} weighted with {weights.image_id}")
        ws = [weights[c.caption_index] for c in captions]
    else:
        ws = list(weights)
        if len(ws) != len(captions):
            raise ValidationError(f"{len(captions)} captions but {len(ws)} weights")
    return sum(w * xe_loss(c, logprobs, ltw) for w, c in zip(ws, captions))


@dataclass(frozen=True)
class NegativeManifest:
    """Positive weights of a target image and weights of its negative captions."""

    target: int
    positives: CaptionWeights
    negatives: tuple[CaptionWeights, ...]
    alpha_ns: float = ALPHA_NS

    def __post_init__(self):
        if self.alpha_ns < 0:
            raise ValidationError(f"alpha_ns must be >= 0, got {self.alpha_ns}")


NEGATIVE_SOURCES = ("own", "target")


def negative_manifest(
    target: int,
    sets: Mapping[int, SimilarSet],
    scorer: Scorer,
    lambda_w: float = LAMBDA_W,
    alpha_w: float = ALPHA_W,
    alpha_ns: float = ALPHA_NS,
    source: str = "own",
    positives: CaptionWeights | None = None,
) -> NegativeManifest:
    """Negatives for ``target``: the references of every image in its similar set.

    ``source="own"`` weights a negative image's captions against that image's
    own similar set. ``source="target"`` weights them against the target's
    group instead: the target plus its other similar images.
    """
    if source not in NEGATIVE_SOURCES:
        raise ValidationError(f"unknown negative weight source {source!r}")
    sset = sets[target]
    if positives is None:
        positives = caption_weights(target, sset, scorer, lambda_w, alpha_w)
    negs = []
    for k in sset.ids:
        if source == "own":
            try:
                kset = sets[k]
            except KeyError:
                raise ValidationError(f"no similar set for negative image {k}") from None
        else:
            group = [(target, 0.0)] + [(j, s) for j, s in sset.neighbors if j != k]
            kset = SimilarSet(k, tuple(group), sset.strategy)
        negs.append(caption_weights(k, kset, scorer, lambda_w, alpha_w))
    return NegativeManifest(target, positives, tuple(negs), alpha_ns)


def ns_loss(
    manifest: NegativeManifest,
    corpus,
    logprobs: TokenLogProbTable,
    ltw: tuple[VocabStats, LtwParams] | None = None,
    alpha_ns: float | None = None,
) -> float:
    """Weighted XE on the positives minus ``alpha_ns`` times weighted XE on the negatives."""
    alpha = manifest.alpha_ns if alpha_ns is None else alpha_ns
    if alpha < 0:
        raise ValidationError(f"alpha_ns must be >= 0, got {alpha}")
    pos = weighted_xe(corpus.refs(manifest.target), logprobs, manifest.positives, ltw)
    neg = sum(weighted_xe(corpus.refs(cw.image_id), logprobs, cw, ltw) for cw in manifest.negatives)
    return pos - alpha * neg


def rl_reward(
    c_star: Caption | Sequence[str],
    weights: CaptionWeights,
    sset: SimilarSet,
    scorer: Scorer,
    alpha_r: float = ALPHA_R,
) -> tuple[float, float]:
    """Reward of a sampled caption: (weighted CIDEr, weighted CIDEr - alpha_r * CIDErBtw)."""
    if alpha_r < 0:
        raise ValidationError(f"alpha_r must be >= 0, got {alpha_r}")
    vec = scorer.vector(c_star)
    refs = scorer.refs(weights.image_id)
    if len(refs) != len(weights.w):
        raise ValidationError(f"{len(refs)} references but {len(weights.w)} weights")
    reweighted = sum(w * scorer.pair(vec, r) for w, r in zip(weights.w, refs)) / len(refs)
    if alpha_r == 0.0:
        return reweighted, reweighted
    return reweighted, reweighted - alpha_r * cider_btw(vec, sset, scorer)


def combine_losses(l_xe: float, l_rl: float, alpha_l: float) -> float:
    if not 0.0 <= alpha_l <= 1.0:
        raise ValidationError(f"alpha_l must be in [0, 1], got {alpha_l}")
    return alpha_l * l_xe + (1.0 - alpha_l) * l_rl


@dataclass(frozen=True)
class Hyperparameters:
    lambda_w: float = LAMBDA_W
    alpha_w: float = ALPHA_W
    alpha_r: float = ALPHA_R
    alpha_ns: float = ALPHA_NS
    A: float = LTW_AMPLITUDE
    F_b: int = LTW_BEGIN
    F_e: int = LTW_END
    K: int = SET_SIZE

    @property
    def ltw(self) -> LtwParams:
        return LtwParams(self.F_b, self.F_e, self.A)


def manifest_lines(
    hp: Hyperparameters,
    split: str,
    ltw: Sequence[tuple[int, float]],
    manifests: Sequence[NegativeManifest],
) -> list[str]:
    header = {"split": split, "hyperparameters": asdict(hp), "ltw": [list(x) for x in ltw]}
    lines = [jsonfmt.dumps(header)]
    for m in sorted(manifests, key=lambda m: m.target):
        rec = {
            "image_id": m.target,
            "captions": [
                {"index": i, "v": v, "w": w} for i, (v, w) in enumerate(zip(m.positives.v, m.positives.w))
            ],
            "negatives": [
                {"image_id": cw.image_id, "captions": [{"index": i, "w": w} for i, w in enumerate(cw.w)]}
                for cw in m.negatives
            ],
        }
        lines.append(jsonfmt.dumps(rec))
    return lines


def export_manifest(
    path,
    manifests: Sequence[NegativeManifest],
    hp: Hyperparameters,
    split: str,
    ltw: Sequence[tuple[int, float]],
    corpus=None,
) -> None:
    """Write the JSON-lines training manifest: one header, then one record per image."""
    if corpus is not None:
        off = sorted({m.target for m in manifests if corpus.split.get(m.target) != split})
        off += sorted(
            {cw.image_id for m in manifests for cw in m.negatives if corpus.split.get(cw.image_id) != split}
        )
        if off:
            raise ValidationError(f"manifest images outside split {split!r}: {off[:20]}")
    with open(path, "w", encoding="utf-8") as fh:
        for line in manifest_lines(hp, split, ltw, manifests):
            fh.write(line + "\n")


def load_manifest(path) -> tuple[dict, list[NegativeManifest]]:
    """Inverse of :func:`export_manifest`; returns (header, per-image manifests)."""
    header, out = None, []
    offset = 0
    with open(path, "rb") as fh:
        for line in fh:
            if not line.strip():
                offset += len(line)
                continue
            try:
                rec = json.loads(line)
                if header is None:
                    header = rec
                    hp = Hyperparameters(**rec["hyperparameters"])
                else:
                    pos = CaptionWeights(
                        rec["image_id"],
                        tuple(c["v"] for c in rec["captions"]),
                        tuple(c["w"] for c in rec["captions"]),
                    )
                    negs = tuple(
                        CaptionWeights(n["image_id"], (), tuple(c["w"] for c in n["captions"]))
                        for n in rec["negatives"]
                    )
                    out.append(NegativeManifest(rec["image_id"], pos, negs, hp.alpha_ns))
            except (ValueError, KeyError, TypeError) as exc:
                raise ParseError(path, offset, str(exc)) from exc
            offset += len(line)
    if header is None:
        raise ParseError(path, 0, "empty manifest")
    return header, out
