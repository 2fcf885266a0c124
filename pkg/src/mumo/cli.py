"""Command-line entry point."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import torch

from . import pipeline as pl
from .base_lm import ModelConfig, init_model, load_model, save_model, train_base
from .bench import REPORT_FORMATS, report_emit
from .config import ConfigError, dump_config, load_config
from .decoder import MODES, config_to_json, generate, read_shortlist
from .mumo_head import (STRATEGIES, ArtifactMismatch, build_training_units, collect_hidden, finetune_head,
                        init_mono_head, load_head, save_head)
from .tokenizer import (MonoVocabulary, Vocabulary, build_mono_vocab, learn_bpe, parse_ranges,
                        read_word_list)

EXIT_OK, EXIT_CONFIG, EXIT_STAGE, EXIT_MISMATCH = 0, 2, 3, 4

log = logging.getLogger("mumo")


def _path(args, attr: str, key: str) -> Path:
    v = getattr(args, attr, None)
    return Path(v) if v else Path(args.cfg.run.out_dir) / pl.FILES[key]


def _texts(path: Path, args) -> list[str]:
    """Target-language documents of a corpus file (NUL-separated)."""
    return pl.target_docs(path.read_text(encoding="utf-8"), args.cfg)


def cmd_print_config(args) -> int:
    sys.stdout.write(dump_config(args.cfg))
    return EXIT_OK


def cmd_synth(args) -> int:
    out = Path(args.cfg.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pl.stage_synth(args.cfg, out)
    log.info("wrote %s, %s, %s under %s", pl.FILES["train"], pl.FILES["heldout"], pl.FILES["words"], out)
    return EXIT_OK


def cmd_tokenizer_learn(args) -> int:
    corpus = _path(args, "corpus", "train").read_text(encoding="utf-8")
    n = args.num_merges if args.num_merges is not None else args.cfg.tokenizer.num_merges
    vocab = learn_bpe(corpus, n)
    dest = _path(args, "out", "vocab")
    vocab.save(dest)
    log.info("vocabulary of %d entries -> %s", len(vocab), dest)
    return EXIT_OK


def cmd_train_base(args) -> int:
    cfg = args.cfg
    vocab = Vocabulary.load(_path(args, "vocab", "vocab"))
    ids = vocab.encode(_path(args, "corpus", "train").read_text(encoding="utf-8"))
    b = cfg.base
    model = init_model(ModelConfig(vocab_size=len(vocab), d_multi=b.d_multi, n_layers=b.n_layers,
                                   n_heads=b.n_heads, context_len=b.context_len, seed=cfg.run.seed))
    hyper = pl.base_hyper(cfg)
    if args.steps is not None:
        hyper = dataclasses.replace(hyper, steps=args.steps)
    train_base(model, ids, hyper, _path(args, "log", "base_log"))
    save_model(model, _path(args, "out", "base"))
    return EXIT_OK


def cmd_build_mono(args) -> int:
    vocab = Vocabulary.load(_path(args, "vocab", "vocab"))
    words = read_word_list(_path(args, "words", "words"))
    ranges = parse_ranges(args.ranges or args.cfg.mono.unicode_ranges)
    mono = build_mono_vocab(words, ranges, vocab, args.cfg.mono.max_expansion)
    mono.save(_path(args, "out", "mono"))
    log.info("%d target words", len(mono))
    return EXIT_OK


def cmd_init_head(args) -> int:
    model = load_model(_path(args, "base", "base"))
    mono = MonoVocabulary.load(_path(args, "mono", "mono"))
    strategy = args.strategy or args.cfg.head.strategy
    mean = None
    if strategy == "multi_init":
        corpus = _path(args, "corpus", "train")
        if corpus.exists():
            vocab = Vocabulary.load(_path(args, "vocab", "vocab"))
            units = build_training_units(_texts(corpus, args), mono, vocab, model.config.context_len)
            mean = collect_hidden(model, units)[0].mean(dim=0)
    head = init_mono_head(strategy, model, mono, seed=args.cfg.run.seed, hidden_mean=mean)
    save_head(head, model, _path(args, "out", "head_init"))
    return EXIT_OK


def cmd_finetune_head(args) -> int:
    model = load_model(_path(args, "base", "base"))
    vocab = Vocabulary.load(_path(args, "vocab", "vocab"))
    mono = MonoVocabulary.load(_path(args, "mono", "mono"))
    head = load_head(_path(args, "head", "head_init"), model)
    units = build_training_units(_texts(_path(args, "corpus", "train"), args), mono, vocab,
                                 model.config.context_len)
    hyper = pl.finetune_hyper(args.cfg)
    if args.steps is not None:
        hyper = dataclasses.replace(hyper, steps=args.steps)
    finetune_head(model, head, units, hyper, _path(args, "log", "head_log"))
    save_head(head, model, _path(args, "out", "head"))
    return EXIT_OK


def cmd_generate(args) -> int:
    cfg = args.cfg
    model = load_model(_path(args, "base", "base"))
    vocab = Vocabulary.load(_path(args, "vocab", "vocab"))
    mode = args.mode
    head = mono = None
    if mode in ("mumo", "mumo_no_verify"):
        mono = MonoVocabulary.load(_path(args, "mono", "mono"))
        head = load_head(_path(args, "head", "head"), model)
    over = {"mode": mode}
    if args.deterministic:
        over["deterministic"] = True
    if args.max_new_tokens is not None:
        over["max_new_tokens"] = args.max_new_tokens
    if args.k is not None:
        over["k"] = args.k
    if mode == "shortlist" and args.shortlist:
        over["shortlist_allowed"] = read_shortlist(args.shortlist, vocab)
    dc = pl.decode_config(cfg, **over)
    text, trace = generate(model, vocab, args.prompt, dc, head=head, mono=mono)
    if args.trace:
        trace.write_jsonl(args.trace)
    sys.stdout.write(text.decode("utf-8", errors="replace") + "\n")
    log.info("config %s", json.dumps(config_to_json(dc)))
    log.info("totals %s", json.dumps(trace.totals()))
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = args.cfg
    modes = [m.strip() for m in args.modes.split(",")] if args.modes else None
    report = pl.run_bench(cfg, Path(cfg.run.out_dir), modes)
    text = report_emit(report, args.format, args.out)
    if not args.out:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_run(args) -> int:
    ran = pl.run_pipeline(args.cfg, args.stages.split(",") if args.stages else None)
    log.info("stages run: %s", ", ".join(ran) if ran else "none")
    md = Path(args.cfg.run.out_dir) / pl.FILES["report_md"]
    if md.exists():
        sys.stdout.write(md.read_text(encoding="utf-8"))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mumo", description="Multi-token target-language decoding toolkit.")
    p.add_argument("--config", help="sectioned key=value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir")
    p.add_argument("--threads", type=int)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("print-config", help="dump the effective configuration").set_defaults(fn=cmd_print_config)
    sub.add_parser("synth", help="write a synthetic corpus and word list").set_defaults(fn=cmd_synth)

    tok = sub.add_parser("tokenizer", help="tokenizer utilities")
    tsub = tok.add_subparsers(dest="tok_command", required=True)
    t = tsub.add_parser("learn", help="learn byte-level BPE merges")
    t.add_argument("--corpus")
    t.add_argument("--num-merges", type=int)
    t.add_argument("--out")
    t.set_defaults(fn=cmd_tokenizer_learn)

    t = sub.add_parser("train-base", help="train the base language model")
    for a in ("--vocab", "--corpus", "--out", "--log"):
        t.add_argument(a)
    t.add_argument("--steps", type=int)
    t.set_defaults(fn=cmd_train_base)

    t = sub.add_parser("build-mono-vocab", help="build the target-word vocabulary")
    for a in ("--vocab", "--words", "--ranges", "--out"):
        t.add_argument(a)
    t.set_defaults(fn=cmd_build_mono)

    t = sub.add_parser("init-head", help="initialise a target-word head")
    for a in ("--base", "--mono", "--vocab", "--corpus", "--out"):
        t.add_argument(a)
    t.add_argument("--strategy", choices=STRATEGIES)
    t.set_defaults(fn=cmd_init_head)

    t = sub.add_parser("finetune-head", help="fine-tune the head with the base frozen")
    for a in ("--base", "--vocab", "--mono", "--head", "--corpus", "--out", "--log"):
        t.add_argument(a)
    t.add_argument("--steps", type=int)
    t.set_defaults(fn=cmd_finetune_head)

    t = sub.add_parser("generate", help="decode one prompt")
    t.add_argument("prompt")
    t.add_argument("--mode", choices=MODES, default="mumo")
    for a in ("--base", "--vocab", "--mono", "--head", "--shortlist", "--trace"):
        t.add_argument(a)
    t.add_argument("--k", type=int)
    t.add_argument("--max-new-tokens", type=int)
    t.add_argument("--deterministic", action="store_true")
    t.set_defaults(fn=cmd_generate)

    t = sub.add_parser("bench", help="benchmark decoding modes on held-out prompts")
    t.add_argument("--modes")
    t.add_argument("--format", choices=REPORT_FORMATS, default="markdown")
    t.add_argument("--out")
    t.set_defaults(fn=cmd_bench)

    t = sub.add_parser("run", help="run every pipeline stage, skipping up-to-date ones")
    t.add_argument("--stages", help=f"comma list from {','.join(pl.STAGE_NAMES)}")
    t.set_defaults(fn=cmd_run)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.run.seed = args.seed
        if args.out_dir is not None:
            cfg.run.out_dir = args.out_dir
        if args.threads is not None:
            cfg.run.threads = args.threads
        if cfg.run.threads < 1:
            raise ConfigError("run.threads must be >= 1")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    torch.set_num_threads(cfg.run.threads)
    args.cfg = cfg
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ArtifactMismatch as exc:
        print(f"artifact mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except pl.StageError as exc:
        code = EXIT_MISMATCH if isinstance(exc.__cause__, ArtifactMismatch) else EXIT_STAGE
        print(f"error: {exc}", file=sys.stderr)
        return code
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error in {args.command}: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
