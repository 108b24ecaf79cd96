"""Caption corpus ingestion, tokenization and word-frequency statistics."""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

SPLITS = ("train", "val", "test")

_TOKEN_RE = re.compile(r"[a-z0-9]+")


class ValidationError(ValueError):
    """Invalid user input: malformed files, unknown ids, bad parameters."""


class ParseError(ValidationError):
    """Malformed input file. ``offset`` is the byte offset of the failure."""

    def __init__(self, path, offset: int, msg: str):
        self.path = str(path)
        self.offset = offset
        super().__init__(f"{path}: parse error at byte {offset}: {msg}")


def tokenize(raw: str) -> list[str]:
    """Lowercase ``raw`` and split on every character outside ``[a-z0-9]``.

    >>> tokenize("A man riding a horse.")
    ['a', 'man', 'riding', 'a', 'horse']
    """
    return _TOKEN_RE.findall(raw.lower())


@dataclass(frozen=True)
class Caption:
    image_id: int
    caption_index: int
    tokens: tuple[str, ...]

    def __post_init__(self):
        if not self.tokens:
            raise ValidationError(
                f"image {self.image_id} caption {self.caption_index} has no tokens"
            )

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class Corpus:
    """Reference captions per image plus split membership.

    ``images`` maps image id to its captions (ordered by ``caption_index``);
    ``split`` maps every image id to one of ``train``/``val``/``test``.
    """

    images: dict[int, tuple[Caption, ...]]
    split: dict[int, str]
    file_names: dict[int, str] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        missing = sorted(set(self.images) - set(self.split))
        if missing:
            raise ValidationError(f"images without split assignment: {missing[:20]}")
        empty = sorted(i for i, caps in self.images.items() if not caps)
        if empty:
            raise ValidationError(f"images with zero captions: {empty[:20]}")

    def ids(self, split: str | None = None) -> list[int]:
        """Sorted image ids, optionally restricted to one split."""
        if split is None:
            return sorted(self.images)
        return sorted(i for i, s in self.split.items() if s == split)

    def refs(self, image_id: int) -> tuple[Caption, ...]:
        try:
            return self.images[image_id]
        except KeyError:
            raise ValidationError(f"unknown image id {image_id}") from None

    def n_refs(self, image_id: int) -> int:
        return len(self.refs(image_id))

    def captions(self, split: str | None = None) -> Iterable[Caption]:
        for i in self.ids(split):
            yield from self.images[i]

    def subset(self, split: str) -> "Corpus":
        keep = self.ids(split)
        return Corpus(
            {i: self.images[i] for i in keep},
            {i: split for i in keep},
            {i: self.file_names[i] for i in keep if i in self.file_names},
        )


def corpus_from_captions(
    captions: dict[int, list[str] | list[list[str]]], split: dict[int, str] | str = "train"
) -> Corpus:
    """Build a corpus from raw strings or pre-tokenized captions per image."""
    images = {}
    for image_id, caps in captions.items():
        out = []
        for idx, cap in enumerate(caps):
            toks = tokenize(cap) if isinstance(cap, str) else list(cap)
            out.append(Caption(int(image_id), idx, tuple(toks)))
        images[int(image_id)] = tuple(out)
    if isinstance(split, str):
        split = {i: split for i in images}
    return Corpus(images, dict(split))


def _read_json(path: Path):
    raw = path.read_bytes()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError(path, exc.start, "invalid utf-8") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[: exc.pos].encode("utf-8"))
        raise ParseError(path, offset, exc.msg) from exc


def read_split_file(path) -> dict[int, str]:
    path = Path(path)
    split: dict[int, str] = {}
    offset = 0
    with open(path, "rb") as fh:
        for line in fh:
            text = line.decode("utf-8").strip()
            if text and not text.startswith("#"):
                parts = text.split("\t")
                if len(parts) != 2 or parts[1] not in SPLITS:
                    raise ParseError(path, offset, f"bad split line {text!r}")
                try:
                    image_id = int(parts[0])
                except ValueError:
                    raise ParseError(path, offset, f"bad image id {parts[0]!r}") from None
                if image_id in split:
                    raise ValidationError(f"{path}: image {image_id} listed twice")
                split[image_id] = parts[1]
            offset += len(line)
    return split


def load_corpus(annotations_path, split_path) -> Corpus:
    """Load a COCO-caption annotation file and a tab-separated split file.

    Raises:
        ParseError: malformed JSON or split lines (carries the byte offset).
        ValidationError: dangling image ids, uncovered images, or empty captions.
    """
    annotations_path = Path(annotations_path)
    data = _read_json(annotations_path)
    if not isinstance(data, dict) or "images" not in data or "annotations" not in data:
        raise ValidationError(f"{annotations_path}: expected 'images' and 'annotations' keys")
    split = read_split_file(split_path)

    file_names = {int(img["id"]): str(img.get("file_name", "")) for img in data["images"]}
    caps: dict[int, list[tuple[str, ...]]] = {i: [] for i in file_names}
    dangling = set()
    for ann in data["annotations"]:
        image_id = int(ann["image_id"])
        if image_id not in caps:
            dangling.add(image_id)
            continue
        toks = tuple(tokenize(ann["caption"]))
        if not toks:
            raise ValidationError(
                f"{annotations_path}: image {image_id} has a caption with no tokens: "
                f"{ann['caption']!r}"
            )
        caps[image_id].append(toks)
    if dangling:
        raise ValidationError(
            f"{annotations_path}: annotations reference unknown images {sorted(dangling)[:20]}"
        )

    unknown = sorted(set(split) - set(caps))
    if unknown:
        raise ValidationError(f"{split_path}: unknown image ids {unknown[:20]}")
    uncovered = sorted(set(caps) - set(split))
    if uncovered:
        raise ValidationError(f"{split_path}: no split for image ids {uncovered[:20]}")
    empty = sorted(i for i, c in caps.items() if not c)
    if empty:
        raise ValidationError(f"{annotations_path}: images with zero captions {empty[:20]}")

    images = {
        i: tuple(Caption(i, k, toks) for k, toks in enumerate(caps[i])) for i in sorted(caps)
    }
    return Corpus(images, {i: split[i] for i in sorted(split)}, file_names)


def write_corpus(corpus: Corpus, annotations_path, split_path) -> None:
    """Write ``corpus`` back out in the same formats ``load_corpus`` reads."""
    images = [
        {"id": i, "file_name": corpus.file_names.get(i, f"{i}.jpg")} for i in corpus.ids()
    ]
    anns = [
        {"image_id": c.image_id, "caption": " ".join(c.tokens)} for c in corpus.captions()
    ]
    Path(annotations_path).write_text(
        json.dumps({"images": images, "annotations": anns}), encoding="utf-8"
    )
    with open(split_path, "w", encoding="utf-8") as fh:
        for i in corpus.ids():
            fh.write(f"{i}\t{corpus.split[i]}\n")


@dataclass(frozen=True)
class VocabStats:
    """Token counts over one split with 1-based frequency ranks."""

    counts: dict[str, int]
    ranks: dict[str, int]

    @property
    def vocab_size(self) -> int:
        return len(self.counts)

    def by_rank(self) -> list[str]:
        return sorted(self.ranks, key=self.ranks.__getitem__)

    def rank(self, token: str) -> int | None:
        return self.ranks.get(token)


def vocab_from_counts(counts: dict[str, int], min_count: int = 1) -> VocabStats:
    kept = {t: c for t, c in counts.items() if c >= min_count}
    # descending count, ties by ascending token
    order = sorted(kept, key=lambda t: (-kept[t], t))
    return VocabStats({t: kept[t] for t in order}, {t: r for r, t in enumerate(order, 1)})


def build_vocab_stats(corpus: Corpus, split: str = "train", min_count: int = 1) -> VocabStats:
    """Count tokens over every reference caption of ``split`` and rank them."""
    ids = corpus.ids(split)
    if not ids:
        raise ValidationError(f"split {split!r} is empty")
    counts: Counter[str] = Counter()
    for i in ids:
        for cap in corpus.images[i]:
            counts.update(cap.tokens)
    return vocab_from_counts(counts, min_count)


def frequency_curve(stats: VocabStats) -> list[tuple[float, int]]:
    """Cumulative number of words with count <= f, one step per distinct count.

    Each entry is ``(log10(f), n_words)``; the last entry equals the vocabulary size.
    """
    if not stats.counts:
        raise ValidationError("empty vocabulary")
    per_count = Counter(stats.counts.values())
    curve, total = [], 0
    for f in sorted(per_count):
        total += per_count[f]
        curve.append((math.log10(f), total))
    return curve


def write_vocab_tsv(stats: VocabStats, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for tok in stats.by_rank():
            fh.write(f"{tok}\t{stats.counts[tok]}\t{stats.ranks[tok]}\n")


def read_vocab_tsv(path) -> VocabStats:
    counts, ranks = {}, {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            tok, count, rank = line.rstrip("\n").split("\t")
            counts[tok] = int(count)
            ranks[tok] = int(rank)
    return VocabStats(counts, ranks)
