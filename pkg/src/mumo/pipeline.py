"""Staged end-to-end run with a digest manifest so unchanged stages are skipped."""
from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import torch

from .base_lm import ModelConfig, TrainHyper, init_model, load_model, save_model, train_base
from .bench import BenchReport, bench, make_prompts, report_emit
from .config import Config
from .decoder import DecodeConfig, expand_vocab_baseline, read_shortlist
from .mumo_head import (FinetuneHyper, build_training_units, collect_hidden, finetune_head,
                        heldout_joint_ce, init_mono_head, load_head, save_head)
from .synth import SyntheticLangSpec, is_target_text, synth_corpus
from .tokenizer import EOT_ID, MonoVocabulary, Vocabulary, build_mono_vocab, learn_bpe, parse_ranges

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
FILES = {
    "train": "train.txt",
    "heldout": "heldout.txt",
    "words": "words.txt",
    "vocab": "vocab.json",
    "base": "base.bin",
    "base_log": "base_log.csv",
    "mono": "mono.json",
    "head_init": "head_init.bin",
    "head": "head.bin",
    "head_log": "finetune_log.csv",
    "head_eval": "head_eval.json",
    "report_csv": "report.csv",
    "report_json": "report.json",
    "report_md": "report.md",
}


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: str):
        super().__init__(f"stage {stage} failed: {cause}")
        self.stage = stage


def file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _digest_json(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def synth_spec(cfg: Config) -> SyntheticLangSpec:
    s = cfg.synth
    return SyntheticLangSpec(
        inventory_size=s.inventory_size, min_word_len=s.min_word_len, max_word_len=s.max_word_len,
        block_lo=s.block_lo, block_hi=s.block_hi, alphabet_size=s.alphabet_size,
        filler_ratio=s.filler_ratio, filler_inventory=s.filler_inventory,
        min_sentence_words=s.min_sentence_words, max_sentence_words=s.max_sentence_words,
        successors=s.successors, sentences_per_doc=s.sentences_per_doc,
        english_ratio=s.english_ratio, english_inventory=s.english_inventory, seed=cfg.run.seed,
    )


def decode_config(cfg: Config, **over) -> DecodeConfig:
    d = cfg.decode
    n, f = d.length_penalty.split(",")
    kw = dict(k=d.k, temperature=d.temperature, top_p=d.top_p, sample_top_k=d.sample_top_k,
              repetition_penalty=d.repetition_penalty, length_penalty=(int(n), float(f)),
              max_new_tokens=d.max_new_tokens, deterministic=d.deterministic, seed=cfg.run.seed)
    kw.update(over)
    return DecodeConfig(**kw)


def target_docs(text: str, cfg: Config) -> list[str]:
    """Documents of `text` written in the target language."""
    spec = synth_spec(cfg)
    return [d for d in text.split("\x00") if d and is_target_text(d, spec)]


# ---------------------------------------------------------------------------
# stages; each returns nothing and writes its outputs under `out`

def _read(path: Path) -> str:
    return path.read_text(encoding="utf-8")


def stage_synth(cfg: Config, out: Path) -> None:
    train, held, words = synth_corpus(synth_spec(cfg), cfg.synth.size_bytes, cfg.synth.heldout_fraction)
    (out / FILES["train"]).write_text(train, encoding="utf-8")
    (out / FILES["heldout"]).write_text(held, encoding="utf-8")
    (out / FILES["words"]).write_text("".join(w + "\n" for w in words), encoding="utf-8")


def stage_tokenizer(cfg: Config, out: Path) -> None:
    learn_bpe(_read(out / FILES["train"]), cfg.tokenizer.num_merges).save(out / FILES["vocab"])


def base_hyper(cfg: Config) -> TrainHyper:
    b = cfg.base
    return TrainHyper(lr=b.lr, steps=b.steps, batch=b.batch, warmup_ratio=b.warmup_ratio,
                      weight_decay=b.weight_decay, seed=cfg.run.seed)


def stage_train_base(cfg: Config, out: Path) -> None:
    vocab = Vocabulary.load(out / FILES["vocab"])
    ids = vocab.encode(_read(out / FILES["train"]))
    b = cfg.base
    model = init_model(ModelConfig(vocab_size=len(vocab), d_multi=b.d_multi, n_layers=b.n_layers,
                                   n_heads=b.n_heads, context_len=b.context_len, seed=cfg.run.seed))
    train_base(model, ids, base_hyper(cfg), out / FILES["base_log"])
    save_model(model, out / FILES["base"])


def stage_mono(cfg: Config, out: Path) -> None:
    vocab = Vocabulary.load(out / FILES["vocab"])
    words = [w for w in _read(out / FILES["words"]).splitlines() if w and not w.startswith("#")]
    mono = build_mono_vocab(words, parse_ranges(cfg.mono.unicode_ranges), vocab, cfg.mono.max_expansion)
    mono.save(out / FILES["mono"])


def _units(cfg: Config, out: Path, which: str, model, vocab, mono):
    docs = target_docs(_read(out / FILES[which]), cfg)
    return build_training_units(docs, mono, vocab, model.config.context_len)


def stage_init_head(cfg: Config, out: Path) -> None:
    model = load_model(out / FILES["base"])
    vocab = Vocabulary.load(out / FILES["vocab"])
    mono = MonoVocabulary.load(out / FILES["mono"])
    H, _ = collect_hidden(model, _units(cfg, out, "train", model, vocab, mono))
    head = init_mono_head(cfg.head.strategy, model, mono, seed=cfg.run.seed, hidden_mean=H.mean(dim=0))
    save_head(head, model, out / FILES["head_init"])


def finetune_hyper(cfg: Config, seed: int | None = None) -> FinetuneHyper:
    f = cfg.finetune
    return FinetuneHyper(lr=f.lr, steps=f.steps, batch=f.batch, warmup=f.warmup,
                         weight_decay=f.weight_decay, seed=cfg.run.seed if seed is None else seed)


def stage_finetune(cfg: Config, out: Path) -> None:
    model = load_model(out / FILES["base"])
    vocab = Vocabulary.load(out / FILES["vocab"])
    mono = MonoVocabulary.load(out / FILES["mono"])
    head = load_head(out / FILES["head_init"], model)
    data = collect_hidden(model, _units(cfg, out, "train", model, vocab, mono))
    finetune_head(model, head, data, finetune_hyper(cfg), out / FILES["head_log"])
    save_head(head, model, out / FILES["head"])
    ce = heldout_joint_ce(model, head, _units(cfg, out, "heldout", model, vocab, mono))
    (out / FILES["head_eval"]).write_text(json.dumps({"heldout_joint_ce": ce}, indent=2) + "\n")


def run_bench(cfg: Config, out: Path, modes: list[str] | None = None) -> BenchReport:
    model = load_model(out / FILES["base"])
    vocab = Vocabulary.load(out / FILES["vocab"])
    mono = MonoVocabulary.load(out / FILES["mono"])
    head = load_head(out / FILES["head"], model)
    b = cfg.bench
    modes = modes or [m.strip() for m in b.modes.split(",") if m.strip()]
    prompts, refs = make_prompts(target_docs(_read(out / FILES["heldout"]), cfg), b.n_prompts, b.prompt_words)
    shortlist = None
    if "shortlist" in modes:
        if b.shortlist_file:
            shortlist = read_shortlist(b.shortlist_file, vocab)
        else:  # base tokens seen in target-language training text
            ids = {EOT_ID}
            for d in target_docs(_read(out / FILES["train"]), cfg):
                ids.update(vocab.encode(d))
            shortlist = frozenset(ids)
    expanded = None
    if b.expansion_baseline:
        modes = modes + ["vocab_expansion"]
        hyper = TrainHyper(lr=1e-3, steps=b.expansion_steps, batch=cfg.base.batch, seed=cfg.run.seed)
        expanded = expand_vocab_baseline(model, vocab, mono, target_docs(_read(out / FILES["train"]), cfg), hyper)
    dc = decode_config(cfg, deterministic=b.deterministic)
    return bench(model, vocab, head, mono, prompts, modes, dc, references=refs,
                 shortlist=shortlist, expanded=expanded)


def stage_bench(cfg: Config, out: Path) -> None:
    report = run_bench(cfg, out)
    report_emit(report, "csv", out / FILES["report_csv"])
    report_emit(report, "json", out / FILES["report_json"])
    report_emit(report, "markdown", out / FILES["report_md"])


@dataclass
class Stage:
    name: str
    fn: Callable[[Config, Path], None]
    sections: tuple[str, ...]
    inputs: tuple[str, ...]
    outputs: tuple[str, ...]


STAGES = [
    Stage("synth", stage_synth, ("synth",), (), ("train", "heldout", "words")),
    Stage("tokenizer", stage_tokenizer, ("tokenizer",), ("train",), ("vocab",)),
    Stage("train_base", stage_train_base, ("base",), ("train", "vocab"), ("base", "base_log")),
    Stage("build_mono_vocab", stage_mono, ("mono",), ("words", "vocab"), ("mono",)),
    Stage("init_head", stage_init_head, ("head", "synth"), ("base", "vocab", "mono", "train"), ("head_init",)),
    Stage("finetune_head", stage_finetune, ("finetune", "synth"),
          ("base", "vocab", "mono", "head_init", "train", "heldout"), ("head", "head_log", "head_eval")),
    Stage("bench", stage_bench, ("decode", "bench", "synth", "base", "finetune"),
          ("base", "vocab", "mono", "head", "train", "heldout"), ("report_csv", "report_json", "report_md")),
]
STAGE_NAMES = [s.name for s in STAGES]


def _input_digest(stage: Stage, cfg: Config, out: Path) -> str:
    files = {}
    for key in stage.inputs:
        p = out / FILES[key]
        try:
            files[key] = file_digest(p)
        except OSError as exc:
            raise StageError(stage.name, f"missing input {p}: {exc}") from exc
    params = {s: cfg.section_dict(s) for s in stage.sections}
    params["seed"] = cfg.run.seed
    return _digest_json({"params": params, "files": files})


def _output_digests(stage: Stage, out: Path) -> dict[str, str] | None:
    d = {}
    for key in stage.outputs:
        p = out / FILES[key]
        if not p.exists():
            return None
        d[FILES[key]] = file_digest(p)
    return d


def load_manifest(out: Path) -> dict:
    p = out / MANIFEST
    if not p.exists():
        return {}
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError:
        logger.warning("unreadable manifest %s; rerunning every stage", p)
        return {}


def run_pipeline(cfg: Config, stages: list[str] | None = None) -> list[str]:
    """Run the stages in order, skipping those whose inputs and outputs are unchanged.

    A stage reruns when its input digest differs from the manifest, when any of
    its outputs is missing or altered, or when an earlier stage ran in this call.
    Returns the names of the stages that ran.
    """
    out = Path(cfg.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    torch.set_num_threads(max(1, cfg.run.threads))
    manifest = load_manifest(out)
    wanted = stages or STAGE_NAMES
    ran: list[str] = []
    for stage in STAGES:
        if stage.name not in wanted:
            continue
        in_digest = _input_digest(stage, cfg, out)
        entry = manifest.get(stage.name)
        outs = _output_digests(stage, out)
        fresh = (entry is not None and not ran and entry.get("input_digest") == in_digest
                 and outs is not None and entry.get("outputs") == outs)
        if fresh:
            logger.info("stage %s: up to date", stage.name)
            continue
        logger.info("stage %s: running", stage.name)
        t0 = time.perf_counter()
        try:
            stage.fn(cfg, out)
        except StageError:
            raise
        except Exception as exc:
            raise StageError(stage.name, f"{type(exc).__name__}: {exc}") from exc
        outs = _output_digests(stage, out)
        if outs is None:
            raise StageError(stage.name, "stage did not write all of its outputs")
        manifest[stage.name] = {
            "input_digest": in_digest,
            "output_digest": _digest_json(outs),
            "outputs": outs,
            "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            "seconds": round(time.perf_counter() - t0, 3),
        }
        (out / MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n")
        ran.append(stage.name)
    return ran
