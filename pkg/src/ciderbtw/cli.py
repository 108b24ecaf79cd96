"""Command-line entry point.

Exit codes: 0 success, 1 internal error, 2 invalid input.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

from . import jsonfmt
from .cache import build_cache, load_cache, save_cache
from .config import RunConfig, resolve
from .corpus import ValidationError, frequency_curve, write_vocab_tsv
from .distinct import evaluate, load_generated
from .ngram import Scorer, build_df
from .simset import CiderIndex, build_sets, load_embeddings, read_sets_jsonl, write_sets_jsonl
from .weights import export_manifest, ltw_table, negative_manifest

log = logging.getLogger("ciderbtw")


def _out(cfg: RunConfig, name: str) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out / name


def cmd_ingest(cfg: RunConfig) -> list[Path]:
    cfg.validate(("annotations", "split_file"))
    corpus, vocab, df = build_cache(cfg.annotations, cfg.split_file, cfg.min_count)
    path = _out(cfg, "cache.json")
    save_cache(path, corpus, vocab, df)
    log.info("cached %d images (%d train) to %s", len(corpus.images), df.image_count, path)
    return [path]


def cmd_stats(cfg: RunConfig) -> list[Path]:
    cfg.validate(("cache",))
    _, vocab, _ = load_cache(cfg.cache)
    vocab_path, curve_path = _out(cfg, "vocab.tsv"), _out(cfg, "frequency_curve.tsv")
    write_vocab_tsv(vocab, vocab_path)
    with open(curve_path, "w", encoding="utf-8") as fh:
        fh.write("log10_frequency\twords_at_or_below\n")
        for logf, count in frequency_curve(vocab):
            fh.write(f"{logf:.6f}\t{count}\n")
    return [vocab_path, curve_path]


def cmd_simsets(cfg: RunConfig) -> list[Path]:
    cfg.validate(("cache",))
    corpus, _, df = load_cache(cfg.cache)
    emb = load_embeddings(cfg.embeddings) if cfg.embeddings else None
    if cfg.strategy.startswith("embed") and emb is None:
        raise ValidationError(f"strategy {cfg.strategy!r} needs --embeddings")
    paths = []
    for split in cfg.split_list():
        if not corpus.ids(split):
            log.info("split %s is empty, skipped", split)
            continue
        sets = build_sets(
            cfg.strategy, corpus, split, cfg.k, df=df, emb=emb,
            seed=cfg.seed, sigma=cfg.sigma, threads=cfg.threads,
        )
        path = _out(cfg, f"simsets_{split}.jsonl")
        write_sets_jsonl(sets, path)
        paths.append(path)
    return paths


def cmd_eval(cfg: RunConfig) -> list[Path]:
    cfg.validate(("cache", "captions", "simsets"))
    corpus, _, df = load_cache(cfg.cache)
    generated = load_generated(cfg.captions)
    sets = read_sets_jsonl(cfg.simsets)
    emb = load_embeddings(cfg.embeddings) if cfg.embeddings else None
    report = evaluate(generated, Scorer(corpus, df, cfg.sigma), sets, emb=emb, k=cfg.k)
    json_path, tsv_path = _out(cfg, "report.json"), _out(cfg, "report.tsv")
    json_path.write_text(report.to_json(), encoding="utf-8")
    tsv_path.write_text(report.to_tsv(), encoding="utf-8")
    return [json_path, tsv_path]


def cmd_weights(cfg: RunConfig) -> list[Path]:
    cfg.validate(("cache", "simsets"))
    corpus, vocab, df = load_cache(cfg.cache)
    sets = read_sets_jsonl(cfg.simsets)
    hp = cfg.hyperparameters
    if not sets:
        raise ValidationError(f"{cfg.simsets}: no similar sets")
    splits = {corpus.split.get(t) for t in sets}
    if len(splits) != 1 or None in splits:
        raise ValidationError(f"{cfg.simsets}: similar sets span splits {sorted(map(str, splits))}")
    split = splits.pop()
    sets = {t: s.head(cfg.k) for t, s in sets.items()}
    scorer = Scorer(corpus, df, cfg.sigma)
    manifests = [
        negative_manifest(t, sets, scorer, hp.lambda_w, hp.alpha_w, hp.alpha_ns, cfg.neg_source)
        for t in sorted(sets)
    ]
    path = _out(cfg, "manifest.jsonl")
    export_manifest(path, manifests, hp, split, ltw_table(vocab, hp.ltw), corpus)
    return [path]


def _bench_one(name: str, corpus, k: int, threads: int) -> tuple[dict, dict]:
    t0 = time.perf_counter()
    df = build_df(corpus, "train")
    index = CiderIndex(corpus, df, "train")
    t1 = time.perf_counter()
    _, stats = index.all_sets(k, threads=threads)
    t2 = time.perf_counter()
    counts = {
        "corpus": name,
        "images": len(index),
        "k": k,
        "candidate_pairs": stats.candidate_pairs,
        "scored_pairs": stats.scored_pairs,
        "zero_bound_pairs": stats.zero_bound_pairs,
        "skipped_fraction": stats.skipped_fraction,
    }
    timing = {"corpus": name, "index_seconds": t1 - t0, "search_seconds": t2 - t1, "total_seconds": t2 - t0}
    return counts, timing


def cmd_bench(cfg: RunConfig) -> list[Path]:
    from .synth import zipf_corpus

    cfg.validate()
    runs = []
    if cfg.cache:
        corpus, _, _ = load_cache(cfg.cache)
        runs.append(("cache", corpus.subset("train")))
    for size in (int(s) for s in cfg.bench_sizes.split(",") if s):
        runs.append((f"zipf-{size}", zipf_corpus(size, seed=cfg.seed)))
    if not runs:
        raise ValidationError("bench needs --cache or --bench-sizes")
    counts, timings = [], []
    for name, corpus in runs:
        c, t = _bench_one(name, corpus, cfg.k, cfg.threads)
        counts.append(c)
        timings.append(t)
        print(
            f"{name}: {c['images']} images, {t['total_seconds']:.2f}s, "
            f"skipped {100 * c['skipped_fraction']:.2f}% of {c['candidate_pairs']} pairs"
        )
    path, tpath = _out(cfg, "bench.json"), _out(cfg, "bench_timing.json")
    path.write_text(jsonfmt.dumps({"runs": counts}) + "\n", encoding="utf-8")
    tpath.write_text(jsonfmt.dumps({"threads": cfg.threads, "runs": timings}) + "\n", encoding="utf-8")
    return [path, tpath]


COMMANDS = {
    "ingest": cmd_ingest,
    "stats": cmd_stats,
    "simsets": cmd_simsets,
    "eval": cmd_eval,
    "weights": cmd_weights,
    "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--out", help="output directory")
    common.add_argument("--cache", help="cache file written by 'ingest'")
    common.add_argument("--annotations", help="COCO-style caption JSON")
    common.add_argument("--split-file", dest="split_file", help="<image_id>\\t<split> lines")
    common.add_argument("--embeddings", help="embedding file (img/cap/gen rows)")
    common.add_argument("--captions", help="generated captions, JSON lines")
    common.add_argument("--simsets", help="similar sets, JSON lines")
    common.add_argument("--strategy", help="cider | embed-retrieval | embed-image | random")
    common.add_argument("--splits", help="comma-separated splits for 'simsets'")
    common.add_argument("--k", type=int)
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int)
    common.add_argument("--sigma", type=float)
    common.add_argument("--lambda-w", dest="lambda_w", type=float)
    common.add_argument("--alpha-w", dest="alpha_w", type=float)
    common.add_argument("--alpha-r", dest="alpha_r", type=float)
    common.add_argument("--alpha-ns", dest="alpha_ns", type=float)
    common.add_argument("--ltw-amplitude", dest="ltw_amplitude", type=float)
    common.add_argument("--ltw-begin", dest="ltw_begin", type=int)
    common.add_argument("--ltw-end", dest="ltw_end", type=int)
    common.add_argument("--min-count", dest="min_count", type=int)
    common.add_argument("--neg-source", dest="neg_source", choices=("own", "target"))
    common.add_argument("--bench-sizes", dest="bench_sizes", help="synthetic corpus sizes, e.g. 1000,10000")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="ciderbtw", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "ingest": "load annotations + split, write cache.json",
        "stats": "export vocab.tsv and frequency_curve.tsv",
        "simsets": "build similar-image sets per split",
        "eval": "CIDEr / CIDErBtw / R@k report for generated captions",
        "weights": "training manifest: caption weights, LTW table, negatives",
        "bench": "time the pruned all-pairs CIDEr search",
    }
    for name, text in helps.items():
        sub.add_parser(name, parents=[common], help=text)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
    try:
        cfg = resolve(args.config, **flags)
        for path in COMMANDS[args.command](cfg):
            log.info("wrote %s", path)
    except (ValidationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
