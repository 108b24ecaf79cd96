"""Synthetic caption corpora and embedding tables for tests and benchmarks."""

from __future__ import annotations

import numpy as np

from .corpus import Caption, Corpus
from .simset import EmbeddingTable

FUNCTION_WORDS = ("a", "the", "of", "on", "in", "with", "and", "is", "to", "at")


def _word(i: int) -> str:
    return f"w{i}"


def zipf_corpus(
    n_images: int,
    refs: int = 5,
    vocab_size: int = 5000,
    exponent: float = 1.1,
    topic_words: int = 6,
    length: tuple[int, int] = (8, 13),
    seed: int = 0,
    split: str = "train",
    first_id: int = 1,
) -> Corpus:
    """Caption corpus whose content words follow a Zipf law.

    Each image draws ``topic_words`` content words; its captions mix those
    with Zipf-distributed background words and a few function words, so
    images sharing content words end up CIDEr-similar.
    """
    rng = np.random.default_rng(seed)
    p = 1.0 / np.arange(1, vocab_size + 1) ** exponent
    p /= p.sum()
    images = {}
    for pos in range(n_images):
        image_id = first_id + pos
        topic = rng.choice(vocab_size, size=topic_words, p=p)
        caps = []
        for k in range(refs):
            T = int(rng.integers(length[0], length[1] + 1))
            kinds = rng.random(T)
            bg = rng.choice(vocab_size, size=T, p=p)
            fw = rng.integers(0, len(FUNCTION_WORDS), size=T)
            tp = rng.integers(0, topic_words, size=T)
            toks = []
            for t in range(T):
                if kinds[t] < 0.3:
                    toks.append(FUNCTION_WORDS[fw[t]])
                elif kinds[t] < 0.8:
                    toks.append(_word(int(topic[tp[t]])))
                else:
                    toks.append(_word(int(bg[t])))
            caps.append(Caption(image_id, k, tuple(toks)))
        images[image_id] = tuple(caps)
    return Corpus(images, {i: split for i in images})


def ring_corpus(n_images: int, refs: int = 5, width: int = 6, split: str = "train") -> Corpus:
    """Images on a ring; image ``i`` talks about concepts ``i-width .. i+width``.

    Caption overlap between two images shrinks strictly with their ring
    distance, which gives a similarity ordering that is strict by construction
    (up to the two-sided tie at equal distance).
    """
    images = {}
    for i in range(n_images):
        image_id = i + 1
        concepts = [(i + d) % n_images for d in range(-width, width + 1)]
        caps = []
        for k in range(refs):
            # the whole concept window plus a filler word unique to the caption
            toks = ["a", "photo", "of"] + [f"c{c}" for c in concepts] + [f"f{i}x{k}"]
            caps.append(Caption(image_id, k, tuple(toks)))
        images[image_id] = tuple(caps)
    return Corpus(images, {i: split for i in images})


def ring_embeddings(corpus: Corpus, bandwidth: float = 3.0, jitter: float = 0.0, seed: int = 0) -> EmbeddingTable:
    """Embeddings whose cosine decreases strictly with ring distance.

    Every image gets a Gaussian bump over ring positions; caption vectors are
    the image vector plus optional jitter.
    """
    ids = corpus.ids()
    n = len(ids)
    pos = np.arange(n)
    rng = np.random.default_rng(seed)
    image_vecs, caption_vecs = {}, {}
    for i, image_id in enumerate(ids):
        d = np.minimum(np.abs(pos - i), n - np.abs(pos - i))
        v = np.exp(-(d**2) / (2 * bandwidth**2))
        image_vecs[image_id] = v
        for cap in corpus.images[image_id]:
            caption_vecs[(image_id, cap.caption_index)] = v + jitter * rng.standard_normal(n)
    return EmbeddingTable.from_vectors(image_vecs, caption_vecs)


def random_embeddings(corpus: Corpus, dim: int = 16, seed: int = 0) -> EmbeddingTable:
    rng = np.random.default_rng(seed)
    image_vecs = {i: rng.standard_normal(dim) for i in corpus.ids()}
    caption_vecs = {
        (c.image_id, c.caption_index): rng.standard_normal(dim) for c in corpus.captions()
    }
    return EmbeddingTable.from_vectors(image_vecs, caption_vecs)
