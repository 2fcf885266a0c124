"""Synthetic target-language corpus with controllable byte-level fragmentation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

EOT = "\x00"


@dataclass(frozen=True)
class SyntheticLangSpec:
    inventory_size: int = 1000
    min_word_len: int = 2  # codepoints
    max_word_len: int = 4
    block_lo: int = 0xAC00  # Hangul syllables
    block_hi: int = 0xD7A3
    alphabet_size: int = 1000  # distinct codepoints drawn from the block
    filler_ratio: float = 0.03
    filler_inventory: int = 24
    min_sentence_words: int = 6
    max_sentence_words: int = 14
    successors: int = 3
    sentences_per_doc: int = 8
    english_ratio: float = 0.7  # share of sentences in the dominant ASCII language
    english_inventory: int = 5000
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.min_word_len <= self.max_word_len:
            raise ValueError("word length bounds must satisfy 1 <= min <= max")
        if self.block_hi < self.block_lo:
            raise ValueError("empty unicode block")
        if chr(self.block_lo).encode("utf-8").__len__() * self.min_word_len < 4:
            raise ValueError("inventory words must encode to at least 4 UTF-8 bytes")
        if not 0 <= self.filler_ratio < 1:
            raise ValueError("filler_ratio must lie in [0, 1)")
        if not 0 <= self.english_ratio < 1:
            raise ValueError("english_ratio must lie in [0, 1)")
        if self.successors < 1 or self.inventory_size < 2:
            raise ValueError("need at least two words and one successor")


def _make_inventory(spec: SyntheticLangSpec, rng: np.random.Generator) -> list[str]:
    span = spec.block_hi - spec.block_lo + 1
    alphabet = rng.choice(span, size=min(spec.alphabet_size, span), replace=False) + spec.block_lo
    words: list[str] = []
    seen = set()
    attempts = 0
    while len(words) < spec.inventory_size:
        attempts += 1
        if attempts > 100 * spec.inventory_size:
            raise ValueError("cannot draw enough distinct words; enlarge the alphabet")
        n = int(rng.integers(spec.min_word_len, spec.max_word_len + 1))
        w = "".join(chr(int(c)) for c in rng.choice(alphabet, size=n))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


def _ascii_words(count: int, lo: int, hi: int, rng: np.random.Generator) -> list[str]:
    letters = np.array(list("abcdefghijklmnopqrstuvwxyz"))
    out: set[str] = set()
    while len(out) < count:
        n = int(rng.integers(lo, hi + 1))
        out.add("".join(rng.choice(letters, size=n)))
    return sorted(out)


def _zipf(n: int) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1)
    return w / w.sum()


class SyntheticLanguage:
    """Word-bigram language: each word has a few weighted successors."""

    def __init__(self, spec: SyntheticLangSpec):
        self.spec = spec
        rng = np.random.default_rng(spec.seed)
        self.words = _make_inventory(spec, rng)
        self.filler = _ascii_words(spec.filler_inventory, 2, 6, rng)
        self.english = _ascii_words(spec.english_inventory, 2, 9, rng)
        self.english_probs = _zipf(len(self.english))
        n = len(self.words)
        self.start_probs = _zipf(n)[rng.permutation(n)]
        self.next_words = np.stack(
            [rng.choice(n, size=spec.successors, replace=False) for _ in range(n)]
        )
        self.next_probs = _zipf(spec.successors)

    def sentence(self, rng: np.random.Generator) -> str:
        spec = self.spec
        n = int(rng.integers(spec.min_sentence_words, spec.max_sentence_words + 1))
        cur = int(rng.choice(len(self.words), p=self.start_probs))
        out = [self.words[cur]]
        for _ in range(n - 1):
            if rng.random() < spec.filler_ratio:
                out.append(self.filler[int(rng.integers(len(self.filler)))])
            cur = int(self.next_words[cur, rng.choice(spec.successors, p=self.next_probs)])
            out.append(self.words[cur])
        return " ".join(out) + "."

    def english_sentence(self, rng: np.random.Generator) -> str:
        n = int(rng.integers(self.spec.min_sentence_words, self.spec.max_sentence_words + 1))
        idx = rng.choice(len(self.english), size=n, p=self.english_probs)
        return " ".join(self.english[int(i)] for i in idx) + "."


def synth_corpus(spec: SyntheticLangSpec, size_bytes: int, heldout_fraction: float = 0.1):
    """Return (train_text, heldout_text, word_list).

    Each document is monolingual: `sentences_per_doc` newline-terminated
    sentences followed by a NUL byte. Heldout sentences never occur in the
    training text; repeats of a training sentence drawn into a heldout
    document are redrawn.
    """
    lang = SyntheticLanguage(spec)
    rng = np.random.default_rng(spec.seed + 1)
    heldout_target = int(size_bytes * heldout_fraction)
    train_target = size_bytes - heldout_target

    train_docs: list[str] = []
    held_docs: list[str] = []
    train_set: set[str] = set()
    held_set: set[str] = set()
    train_bytes = held_bytes = 0
    while train_bytes < train_target or held_bytes < heldout_target:
        english = rng.random() < spec.english_ratio
        to_held = held_bytes < heldout_target and (
            train_bytes >= train_target or rng.random() < heldout_fraction
        )
        own, other = (held_set, train_set) if to_held else (train_set, held_set)
        sents = []
        tries = 0
        while len(sents) < spec.sentences_per_doc and tries < 50 * spec.sentences_per_doc:
            tries += 1
            s = lang.english_sentence(rng) if english else lang.sentence(rng)
            if s in other:
                continue
            sents.append(s)
            own.add(s)
        doc = "".join(s + "\n" for s in sents)
        nb = len(doc.encode("utf-8")) + 1
        if to_held:
            held_docs.append(doc)
            held_bytes += nb
        else:
            train_docs.append(doc)
            train_bytes += nb
    return _join_docs(train_docs), _join_docs(held_docs), list(lang.words)


def _join_docs(docs: list[str]) -> str:
    return "".join(d + EOT for d in docs)


def is_target_text(text: str, spec: SyntheticLangSpec) -> bool:
    return any(spec.block_lo <= ord(ch) <= spec.block_hi for ch in text)


def split_sentences(text: str) -> list[str]:
    return [s for s in text.replace(EOT, "\n").split("\n") if s]
