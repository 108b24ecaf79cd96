import json
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracle
from conftest import load_fixture, refs_of, scorer_for
from ciderbtw.corpus import ValidationError, build_vocab_stats, vocab_from_counts
from ciderbtw.distinct import cider_btw
from ciderbtw.simset import SimilarSet, build_sets_cider
from ciderbtw.synth import zipf_corpus
from ciderbtw.weights import (
    CaptionWeights,
    Hyperparameters,
    LtwParams,
    NegativeManifest,
    caption_weights,
    combine_losses,
    export_manifest,
    load_manifest,
    ltw_table,
    ltw_weight,
    negative_manifest,
    ns_loss,
    rl_reward,
    token_weights,
    weighted_xe,
    weights_from_scores,
    xe_loss,
)

DEFAULT_LTW = LtwParams(5000, 9487, 1.0)


# caption weights


def test_weight_at_max_v():
    assert weights_from_scores([0.2, 0.8, 0.5], 1.5, 0.75)[1] == 0.75


def test_weight_at_zero_v():
    assert weights_from_scores([0.0, 0.8], 1.5, 0.75)[0] == 1.5


def test_all_zero_v():
    assert weights_from_scores([0.0, 0.0, 0.0]) == [1.5, 1.5, 1.5]


@pytest.mark.parametrize("lam, alpha", [(0.75, 0.75), (0.5, 0.75), (1.5, -0.1)])
def test_bad_hyperparameters(lam, alpha):
    with pytest.raises(ValidationError):
        weights_from_scores([1.0], lam, alpha)


@given(
    st.lists(st.floats(0, 10, allow_nan=False), min_size=1, max_size=7),
    st.floats(0.1, 3.0),
    st.floats(0.0, 1.0),
)
def test_weight_law(v, lam, frac):
    alpha = frac * lam * 0.99
    w = weights_from_scores(v, lam, alpha)
    if max(v) > 0:
        top = v.index(max(v))
        assert w[top] == lam - alpha
    for wi in w:
        assert lam - alpha - 1e-12 <= wi <= lam
    for i in range(len(v)):
        for j in range(len(v)):
            if v[i] < v[j]:
                assert w[i] >= w[j]


def test_caption_weights_five_captions():
    c = zipf_corpus(30, seed=8)
    sc = scorer_for(c)
    sets = build_sets_cider(c, "train", 5, sc.df)
    cw = caption_weights(4, sets[4], sc)
    refs = refs_of(c)
    odf = oracle.doc_freq(refs)
    v = [oracle.between_set(r, sets[4].ids, refs, odf, len(refs)) for r in refs[4]]
    assert cw.v == pytest.approx(v, abs=1e-9)
    assert cw.w == pytest.approx([1.5 - 0.75 * x / max(v) for x in v], abs=1e-9)
    assert cw[0] == cw.w[0]


def test_caption_weights_wrong_set():
    c = zipf_corpus(10, seed=0)
    sc = scorer_for(c)
    sets = build_sets_cider(c, "train", 3, sc.df)
    with pytest.raises(ValidationError):
        caption_weights(1, sets[2], sc)


# long-tailed weights


def test_ltw_boundaries():
    assert ltw_weight(5000, DEFAULT_LTW) == 1.0
    assert ltw_weight(9487, DEFAULT_LTW) == 2.0
    assert ltw_weight((5000 + 9487) / 2, DEFAULT_LTW) == pytest.approx(1.5, abs=1e-12)
    assert ltw_weight(1, DEFAULT_LTW) == 1.0
    assert ltw_weight(20000, DEFAULT_LTW) == 2.0


def test_ltw_defaults_match_training_setup():
    assert LtwParams() == DEFAULT_LTW


def test_ltw_invalid():
    with pytest.raises(ValidationError):
        ltw_weight(0)
    with pytest.raises(ValidationError):
        LtwParams(10, 10)
    with pytest.raises(ValidationError):
        LtwParams(0, 10)
    with pytest.raises(ValidationError):
        LtwParams(1, 10, 0.0)


@given(st.integers(1, 200), st.integers(1, 200), st.floats(0.01, 5))
def test_ltw_monotone_and_bounded(begin, span, amp):
    p = LtwParams(begin, begin + span, amp)
    prev = 0.0
    for r in range(1, begin + span + 10):
        w = ltw_weight(r, p)
        assert 1.0 <= w <= 1.0 + amp + 1e-12
        assert w >= prev
        prev = w
    # continuous at begin: the first step past it is one slope increment
    assert ltw_weight(begin + 1, p) - ltw_weight(begin, p) == pytest.approx(amp / span)


def test_ltw_table_and_oov():
    stats = vocab_from_counts({"a": 5, "b": 3, "c": 1})
    p = LtwParams(1, 3, 1.0)
    assert ltw_table(stats, p) == [(1, 1.0), (2, 1.5), (3, 2.0)]
    assert token_weights(["a", "c", "zzz"], (stats, p)) == [1.0, 2.0, 2.0]
    assert token_weights(["a", "zzz"], None) == [1.0, 1.0]


# weighted cross-entropy


def _fixture_ltw(fx):
    return vocab_from_counts(fx["vocab_counts"]), LtwParams(**fx["ltw"])


def test_weighted_xe_fixture():
    fx = load_fixture("weighted_xe")
    caps = fx["corpus"].refs(1)
    got = weighted_xe(caps, fx["logprob_table"], fx["weights"], _fixture_ltw(fx))
    assert abs(got - fx["expected"]["with_ltw"]) <= 1e-9
    got = weighted_xe(caps, fx["logprob_table"], fx["weights"])
    assert abs(got - fx["expected"]["without_ltw"]) <= 1e-9


def test_weighted_xe_zero_logprobs():
    fx = load_fixture("weighted_xe")
    zeros = {k: [0.0] * len(v) for k, v in fx["logprob_table"].items()}
    assert weighted_xe(fx["corpus"].refs(1), zeros, fx["weights"], _fixture_ltw(fx)) == 0.0


def test_weighted_xe_single_token():
    fx = load_fixture("weighted_xe")
    cap = fx["corpus"].refs(1)[2]
    assert weighted_xe([cap], {(1, 2): [-2.0]}, [1.5]) == 3.0


def test_weighted_xe_accepts_caption_weights():
    fx = load_fixture("weighted_xe")
    cw = CaptionWeights(1, (0.0, 0.0, 0.0), tuple(fx["weights"]))
    assert weighted_xe(fx["corpus"].refs(1), fx["logprob_table"], cw) == pytest.approx(7.7)


def test_weighted_xe_unit_weights_is_plain_sum():
    fx = load_fixture("weighted_xe")
    caps = fx["corpus"].refs(1)
    total = sum(xe_loss(c, fx["logprob_table"]) for c in caps)
    assert weighted_xe(caps, fx["logprob_table"], [1.0, 1.0, 1.0]) == total


@pytest.mark.parametrize("scale", [0.5, 2.0, 3.25])
def test_weighted_xe_linear_in_caption_weight(scale):
    fx = load_fixture("weighted_xe")
    caps, lp, ltw = fx["corpus"].refs(1), fx["logprob_table"], _fixture_ltw(fx)
    base = weighted_xe(caps, lp, fx["weights"], ltw)
    term = fx["weights"][1] * xe_loss(caps[1], lp, ltw)
    w = list(fx["weights"])
    w[1] *= scale
    assert weighted_xe(caps, lp, w, ltw) == pytest.approx(base + (scale - 1) * term, abs=1e-12)


def test_weighted_xe_linear_in_word_weight():
    # zebra (rank 6, weight 2) carries -2.0 * 2 = 4.0 of caption 1's loss
    fx = load_fixture("weighted_xe")
    caps, lp = fx["corpus"].refs(1), fx["logprob_table"]
    stats, p = _fixture_ltw(fx)
    base = weighted_xe(caps, lp, fx["weights"], (stats, p))
    wider = LtwParams(p.begin, p.end, 2 * p.amplitude)
    # doubling A: zebra 2 -> 3, runs 1.5 -> 2, okapi 2 -> 3
    delta = 1.0 * (2.0 * 1 + 1.0 * 0.5) + 0.75 * 3.0 * 1
    assert weighted_xe(caps, lp, fx["weights"], (stats, wider)) == pytest.approx(base + delta, abs=1e-12)


def test_weighted_xe_errors():
    fx = load_fixture("weighted_xe")
    caps = fx["corpus"].refs(1)
    bad = dict(fx["logprob_table"])
    bad[(1, 0)] = [-0.5, 0.1]
    with pytest.raises(ValidationError, match="positive"):
        weighted_xe(caps, bad, fx["weights"])
    bad[(1, 0)] = [-0.5]
    with pytest.raises(ValidationError, match="tokens"):
        weighted_xe(caps, bad, fx["weights"])
    del bad[(1, 0)]
    with pytest.raises(ValidationError, match="no log-probabilities"):
        weighted_xe(caps, bad, fx["weights"])
    with pytest.raises(ValidationError):
        weighted_xe(caps, fx["logprob_table"], [1.0, 1.0])


# negative samples


def _ns_manifest(fx, alpha=None):
    neg = tuple(CaptionWeights(int(k), (0.0,) * len(w), tuple(w)) for k, w in fx["negatives"].items())
    pos = CaptionWeights(1, (0.0, 0.0), tuple(fx["positives"]))
    return NegativeManifest(1, pos, neg, fx["alpha_ns"] if alpha is None else alpha)


def test_ns_loss_fixture():
    fx = load_fixture("ns_loss")
    got = ns_loss(_ns_manifest(fx), fx["corpus"], fx["logprob_table"])
    assert abs(got - fx["expected"]["loss"]) <= 1e-9


def test_ns_loss_alpha_zero_is_weighted_xe():
    fx = load_fixture("ns_loss")
    m = _ns_manifest(fx, 0.0)
    pos = weighted_xe(fx["corpus"].refs(1), fx["logprob_table"], m.positives)
    assert ns_loss(m, fx["corpus"], fx["logprob_table"]) == pos
    assert ns_loss(_ns_manifest(fx), fx["corpus"], fx["logprob_table"], alpha_ns=0.0) == pos


def test_ns_loss_zero_negative_losses():
    fx = load_fixture("ns_loss")
    lp = dict(fx["logprob_table"])
    for key in list(lp):
        if key[0] != 1:
            lp[key] = [0.0] * len(lp[key])
    assert ns_loss(_ns_manifest(fx), fx["corpus"], lp) == fx["expected"]["positive"]


def test_ns_loss_monotone_in_alpha():
    fx = load_fixture("ns_loss")
    losses = [ns_loss(_ns_manifest(fx, a), fx["corpus"], fx["logprob_table"]) for a in (0, 0.02, 0.05, 0.1, 0.5)]
    assert all(a >= b for a, b in zip(losses, losses[1:]))


def test_ns_loss_missing_negative_logprobs():
    fx = load_fixture("ns_loss")
    lp = {k: v for k, v in fx["logprob_table"].items() if k[0] != 3}
    with pytest.raises(ValidationError):
        ns_loss(_ns_manifest(fx), fx["corpus"], lp)


def test_negative_alpha_rejected():
    fx = load_fixture("ns_loss")
    with pytest.raises(ValidationError):
        _ns_manifest(fx, -0.1)


def test_negative_manifest_sources(toy):
    sc = scorer_for(toy)
    sets = build_sets_cider(toy, "train", 1, sc.df)
    own = negative_manifest(1, sets, sc, source="own")
    assert [cw.image_id for cw in own.negatives] == sets[1].ids
    k = sets[1].ids[0]
    assert own.negatives[0] == caption_weights(k, sets[k], sc)
    target = negative_manifest(1, sets, sc, source="target")
    # the negative image is weighted against the target (its only other group member)
    assert target.negatives[0] == caption_weights(k, SimilarSet(k, ((1, 0.0),), "cider"), sc)
    with pytest.raises(ValidationError):
        negative_manifest(1, sets, sc, source="other")


def test_negative_manifest_needs_own_sets():
    c = zipf_corpus(10, seed=1)
    sc = scorer_for(c)
    sets = build_sets_cider(c, "train", 2, sc.df)
    k = sets[1].ids[0]
    del sets[k]
    with pytest.raises(ValidationError, match=str(k)):
        negative_manifest(1, sets, sc)


# reward


def test_rl_reward_fixture():
    fx = load_fixture("rl_reward")
    c = fx["corpus"]
    sc = scorer_for(c)
    sset = SimilarSet(1, tuple((j, 0.0) for j in fx["similar"]), "cider")
    cw = CaptionWeights(1, (0.0, 0.0), tuple(fx["weights"]))
    r_tilde, r = rl_reward(fx["c_star"].split(), cw, sset, sc, fx["alpha_r"])
    assert abs(r_tilde - fx["expected"]["reweighted"]) <= 1e-9
    assert abs(r - fx["expected"]["reward"]) <= 1e-9
    assert cider_btw(fx["c_star"].split(), sset, sc) == fx["expected"]["cider_btw"]


def test_rl_reward_alpha_zero():
    fx = load_fixture("rl_reward")
    sc = scorer_for(fx["corpus"])
    sset = SimilarSet(1, ((2, 0.0),), "cider")
    cw = CaptionWeights(1, (0.0, 0.0), (1.2, 0.8))
    r_tilde, r = rl_reward(fx["c_star"].split(), cw, sset, sc, 0.0)
    assert r == r_tilde


def test_rl_reward_identical_and_distinct():
    cap = "a striped zebra grazes near tall trees"
    from ciderbtw.corpus import corpus_from_captions

    c = corpus_from_captions({1: [cap, cap], 2: ["red kite flies high"], 3: ["old man reads"], 4: ["x y z"]})
    sc = scorer_for(c)
    sset = SimilarSet(1, ((2, 0.0), (3, 0.0)), "cider")
    w = 1.25
    assert rl_reward(cap.split(), CaptionWeights(1, (0, 0), (w, w)), sset, sc, 0.3) == (10 * w, 10 * w)


def test_rl_reward_unit_weights_is_mean_cider():
    c = zipf_corpus(20, seed=5)
    sc = scorer_for(c)
    sets = build_sets_cider(c, "train", 5, sc.df)
    cand = c.refs(2)[1].tokens
    r_tilde, r = rl_reward(cand, CaptionWeights(3, (0,) * 5, (1.0,) * 5), sets[3], sc, 0.0)
    assert r_tilde == r == sc.score(sc.vector(cand), sc.refs(3))


def test_rl_reward_matches_enumeration():
    c = zipf_corpus(25, seed=6)
    sc = scorer_for(c)
    sets = build_sets_cider(c, "train", 3, sc.df)
    cw = caption_weights(7, sets[7], sc)
    refs = refs_of(c)
    odf = oracle.doc_freq(refs)
    cand = list(c.refs(8)[0].tokens)
    g = [oracle.dense_pair(cand, r, odf, 25) for r in refs[7]]
    btw = oracle.between_set(cand, sets[7].ids, refs, odf, 25)
    want_tilde = sum(w * x for w, x in zip(cw.w, g)) / len(g)
    r_tilde, r = rl_reward(cand, cw, sets[7], sc, 0.4)
    assert abs(r_tilde - want_tilde) <= 1e-9
    assert abs(r - (want_tilde - 0.4 * btw)) <= 1e-9


def test_rl_reward_errors():
    fx = load_fixture("rl_reward")
    sc = scorer_for(fx["corpus"])
    sset = SimilarSet(1, ((2, 0.0),), "cider")
    with pytest.raises(ValidationError):
        rl_reward(["a"], CaptionWeights(1, (0, 0), (1, 1)), sset, sc, -0.1)
    with pytest.raises(ValidationError):
        rl_reward(["a"], CaptionWeights(1, (0,), (1,)), sset, sc, 0.1)


# combined loss


def test_combine_losses():
    assert combine_losses(2.0, 4.0, 1.0) == 2.0
    assert combine_losses(2.0, 4.0, 0.0) == 4.0
    assert combine_losses(2.0, 4.0, 0.5) == 3.0
    with pytest.raises(ValidationError):
        combine_losses(1.0, 1.0, 1.5)


# manifest


def test_default_hyperparameters():
    hp = Hyperparameters()
    assert (hp.lambda_w, hp.alpha_w, hp.A, hp.F_b, hp.F_e, hp.K) == (1.5, 0.75, 1.0, 5000, 9487, 5)
    assert 0.1 <= hp.alpha_r <= 0.8 and 0.02 <= hp.alpha_ns <= 0.10


def _manifests(corpus, k=3, source="own"):
    sc = scorer_for(corpus)
    sets = build_sets_cider(corpus, "train", k, sc.df)
    return [negative_manifest(t, sets, sc, source=source) for t in corpus.ids()]


def test_manifest_round_trip(tmp_path):
    c = zipf_corpus(15, seed=3)
    ms = _manifests(c)
    hp = Hyperparameters(K=3)
    table = ltw_table(build_vocab_stats(c), LtwParams(5, 20))
    export_manifest(tmp_path / "m.jsonl", ms, hp, "train", table, c)
    header, back = load_manifest(tmp_path / "m.jsonl")
    assert header["split"] == "train" and header["hyperparameters"]["K"] == 3
    assert [r for r, _ in header["ltw"]] == [r for r, _ in table]
    assert [w for _, w in header["ltw"]] == pytest.approx([w for _, w in table], abs=5e-7)
    for a, b in zip(ms, back):
        assert a.target == b.target
        assert b.positives.w == pytest.approx(a.positives.w, abs=5e-7)
        assert [cw.image_id for cw in b.negatives] == [cw.image_id for cw in a.negatives]
    export_manifest(tmp_path / "n.jsonl", back, hp, "train", [tuple(x) for x in header["ltw"]], c)
    assert (tmp_path / "n.jsonl").read_bytes() == (tmp_path / "m.jsonl").read_bytes()


def test_manifest_schema(tmp_path):
    c = zipf_corpus(8, seed=3)
    export_manifest(tmp_path / "m.jsonl", _manifests(c, 2), Hyperparameters(), "train", [(1, 1.0)])
    lines = (tmp_path / "m.jsonl").read_text().splitlines()
    header = json.loads(lines[0])
    assert set(header) == {"split", "hyperparameters", "ltw"}
    assert set(header["hyperparameters"]) == {"lambda_w", "alpha_w", "alpha_r", "alpha_ns", "A", "F_b", "F_e", "K"}
    rec = json.loads(lines[1])
    assert set(rec) == {"image_id", "captions", "negatives"}
    assert set(rec["captions"][0]) == {"index", "v", "w"}
    assert set(rec["negatives"][0]) == {"image_id", "captions"}
    assert len(lines) == 9


def test_manifest_deterministic(tmp_path):
    c = zipf_corpus(12, seed=2)
    for name in ("a", "b"):
        export_manifest(tmp_path / name, _manifests(c), Hyperparameters(), "train", [(1, 1.0)], c)
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_manifest_split_check(tmp_path):
    c = zipf_corpus(8, seed=3)
    with pytest.raises(ValidationError, match="outside split"):
        export_manifest(tmp_path / "m.jsonl", _manifests(c, 2), Hyperparameters(), "val", [(1, 1.0)], c)


@settings(max_examples=25)
@given(st.floats(0.5, 3.0), st.floats(0.0, 0.45))
def test_manifest_weights_in_bounds(lam, frac):
    c = zipf_corpus(10, seed=1)
    sc = scorer_for(c)
    sets = build_sets_cider(c, "train", 3, sc.df)
    alpha = frac * lam
    for t in c.ids():
        cw = caption_weights(t, sets[t], sc, lam, alpha)
        assert min(cw.w) == pytest.approx(lam - alpha, abs=1e-12)
        assert max(cw.w) <= lam
        assert not math.isnan(sum(cw.w))
