"""Single-file corpus cache: captions, split, vocabulary and train df table."""

from __future__ import annotations

import json
from pathlib import Path

from .corpus import Caption, Corpus, ParseError, ValidationError, VocabStats, build_vocab_stats, load_corpus
from .ngram import DfTable, build_df

CACHE_VERSION = 1


def build_cache(annotations, split_file, min_count: int = 1):
    corpus = load_corpus(annotations, split_file)
    if not corpus.ids("train"):
        raise ValidationError(f"{split_file}: no train images; the df table needs a train split")
    return corpus, build_vocab_stats(corpus, "train", min_count), build_df(corpus, "train")


def save_cache(path, corpus: Corpus, vocab: VocabStats, df: DfTable) -> None:
    images = [
        {
            "id": i,
            "file_name": corpus.file_names.get(i, ""),
            "split": corpus.split[i],
            "captions": [list(c.tokens) for c in corpus.images[i]],
        }
        for i in corpus.ids()
    ]
    grams = [[n + 1, " ".join(g), d[g]] for n, d in enumerate(df.df) for g in sorted(d)]
    payload = {
        "version": CACHE_VERSION,
        "images": images,
        "vocab": [[t, vocab.counts[t], vocab.ranks[t]] for t in vocab.by_rank()],
        "df": {"image_count": df.image_count, "split": df.split, "grams": grams},
    }
    Path(path).write_text(json.dumps(payload, separators=(",", ":")) + "\n", encoding="utf-8")


def load_cache(path) -> tuple[Corpus, VocabStats, DfTable]:
    text = Path(path).read_text(encoding="utf-8")
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(path, len(text[: exc.pos].encode("utf-8")), exc.msg) from exc
    if payload.get("version") != CACHE_VERSION:
        raise ValidationError(f"{path}: unsupported cache version {payload.get('version')}")
    images, split, names = {}, {}, {}
    for rec in payload["images"]:
        i = rec["id"]
        images[i] = tuple(Caption(i, k, tuple(toks)) for k, toks in enumerate(rec["captions"]))
        split[i] = rec["split"]
        names[i] = rec["file_name"]
    vocab = VocabStats({t: c for t, c, _ in payload["vocab"]}, {t: r for t, _, r in payload["vocab"]})
    df_maps: list[dict] = [{} for _ in range(4)]
    for n, gram, count in payload["df"]["grams"]:
        df_maps[n - 1][tuple(gram.split(" "))] = count
    df = DfTable(tuple(df_maps), payload["df"]["image_count"], payload["df"]["split"])
    return Corpus(images, split, names), vocab, df
