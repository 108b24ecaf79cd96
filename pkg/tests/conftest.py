import json
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ciderbtw.corpus import corpus_from_captions  # noqa: E402
from ciderbtw.ngram import Scorer, build_df  # noqa: E402


def micro_corpus(seed, max_images=5, max_refs=3, max_len=8, vocab=6):
    """Small random corpus with a tiny vocabulary so n-grams repeat and clip."""
    rng = np.random.default_rng(seed)
    words = [f"t{i}" for i in range(vocab)]
    n_images = int(rng.integers(2, max_images + 1))
    caps = {}
    for i in range(1, n_images + 1):
        caps[i] = [
            [words[w] for w in rng.integers(0, vocab, size=int(rng.integers(1, max_len + 1)))]
            for _ in range(int(rng.integers(1, max_refs + 1)))
        ]
    return corpus_from_captions(caps)


def refs_of(corpus, split=None):
    return {i: [list(c.tokens) for c in corpus.refs(i)] for i in corpus.ids(split)}


def scorer_for(corpus, split="train", **kw):
    return Scorer(corpus, build_df(corpus, split), **kw)


@pytest.fixture
def toy():
    """Three images, two references each, hand-checkable vocabulary."""
    return corpus_from_captions(
        {
            1: ["a dog runs on the grass", "a brown dog on grass"],
            2: ["a cat sleeps on a sofa", "the cat is asleep"],
            3: ["a dog and a cat on grass", "two pets playing outside"],
        }
    )


FIXTURES = Path(__file__).parent / "fixtures"


def load_fixture(name):
    fx = json.loads((FIXTURES / f"{name}.json").read_text())
    fx["corpus"] = corpus_from_captions({int(k): v for k, v in fx["captions"].items()})
    fx["logprob_table"] = {(i, k): lp for i, k, lp in fx.get("logprobs", [])}
    return fx


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
