"""Sectioned key=value pipeline configuration with embedded defaults."""
from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import get_type_hints


class ConfigError(ValueError):
    pass


@dataclass
class RunSection:
    seed: int = 0
    out_dir: str = "runs/default"
    threads: int = 1


@dataclass
class SynthSection:
    size_bytes: int = 1_200_000
    heldout_fraction: float = 0.1
    inventory_size: int = 1000
    min_word_len: int = 2
    max_word_len: int = 4
    block_lo: int = 0xAC00
    block_hi: int = 0xD7A3
    alphabet_size: int = 1000
    filler_ratio: float = 0.03
    filler_inventory: int = 24
    min_sentence_words: int = 6
    max_sentence_words: int = 14
    successors: int = 3
    sentences_per_doc: int = 8
    english_ratio: float = 0.7
    english_inventory: int = 5000


@dataclass
class TokenizerSection:
    num_merges: int = 1500


@dataclass
class BaseSection:
    d_multi: int = 128
    n_layers: int = 4
    n_heads: int = 4
    context_len: int = 256
    lr: float = 3e-3
    steps: int = 2000
    batch: int = 8
    warmup_ratio: float = 0.04
    weight_decay: float = 0.01


@dataclass
class MonoSection:
    unicode_ranges: str = "AC00-D7A3"
    max_expansion: int = 16


@dataclass
class HeadSection:
    strategy: str = "multi_init"


@dataclass
class FinetuneSection:
    lr: float = 1e-3
    steps: int = 1500
    batch: int = 128
    warmup: int = 150
    weight_decay: float = 0.01


@dataclass
class DecodeSection:
    k: int = 10
    temperature: float = 0.1
    top_p: float = 0.7
    sample_top_k: int = 20
    repetition_penalty: float = 1.05
    length_penalty: str = "256,1.03"
    max_new_tokens: int = 128
    deterministic: bool = False


@dataclass
class BenchSection:
    modes: str = "vanilla,mumo,mumo_no_verify,shortlist"
    n_prompts: int = 50
    prompt_words: int = 6
    deterministic: bool = True
    shortlist_file: str = ""
    expansion_baseline: bool = False
    expansion_steps: int = 300


@dataclass
class Config:
    run: RunSection = field(default_factory=RunSection)
    synth: SynthSection = field(default_factory=SynthSection)
    tokenizer: TokenizerSection = field(default_factory=TokenizerSection)
    base: BaseSection = field(default_factory=BaseSection)
    mono: MonoSection = field(default_factory=MonoSection)
    head: HeadSection = field(default_factory=HeadSection)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    decode: DecodeSection = field(default_factory=DecodeSection)
    bench: BenchSection = field(default_factory=BenchSection)

    def section(self, name: str):
        return getattr(self, name)

    def section_dict(self, name: str) -> dict:
        return dataclasses.asdict(getattr(self, name))


SECTIONS = [f.name for f in fields(Config)]


def _convert(raw: str, typ, where: str):
    try:
        if typ is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw, 0)
        if typ is float:
            return float(raw)
        return raw.strip()
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {typ.__name__}") from exc


def parse_config(text: str, source: str = "<config>") -> Config:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    cfg = Config()
    for name in parser.sections():
        if name not in SECTIONS:
            raise ConfigError(f"{source}: unknown section [{name}]")
        sec = getattr(cfg, name)
        hints = get_type_hints(type(sec))
        for key, raw in parser.items(name):
            if key not in hints:
                raise ConfigError(f"{source}: unknown key {name}.{key}")
            setattr(sec, key, _convert(raw, hints[key], f"{source}: {name}.{key}"))
    return cfg


def load_config(path: str | Path | None) -> Config:
    if path is None:
        return Config()
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from exc
    return parse_config(text, str(p))


def dump_config(cfg: Config) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    for name in SECTIONS:
        parser[name] = {k: str(v).lower() if isinstance(v, bool) else str(v)
                        for k, v in cfg.section_dict(name).items()}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()
