"""Byte-level BPE vocabulary, target-language word list and mixed-unit segmentation."""
from __future__ import annotations

import heapq
import json
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

logger = logging.getLogger(__name__)

VOCAB_FORMAT_VERSION = 1
MAX_EXPANSION_LEN = 16
EOT_ID = 0  # byte 0x00 terminates a document; never part of a target word


class TokenizerError(ValueError):
    pass


def _byte_class(b: int) -> int:
    if b in b" \t\n\r\x0b\x0c":
        return 0
    if b >= 0x80:
        return 1
    if (48 <= b <= 57) or (65 <= b <= 90) or (97 <= b <= 122):
        return 2
    return 3 + (b == 0)


def pretokenize(text: bytes) -> list[bytes]:
    """Split into maximal runs of one byte class; merges never cross a run boundary.

    Classes: whitespace, non-ASCII, ASCII alphanumerics, other ASCII, NUL.
    """
    if not text:
        return []
    chunks = []
    start = 0
    prev = _byte_class(text[0])
    for i in range(1, len(text)):
        c = _byte_class(text[i])
        if c != prev:
            chunks.append(text[start:i])
            start = i
            prev = c
    chunks.append(text[start:])
    return chunks


class Vocabulary:
    """Dense-id table of byte-string tokens: 256 single bytes followed by learned merges."""

    def __init__(self, merges: Sequence[tuple[int, int]] = ()):
        entries = [bytes([b]) for b in range(256)]
        lookup = {e: i for i, e in enumerate(entries)}
        ranks: dict[tuple[int, int], int] = {}
        for a, b in merges:
            if not (0 <= a < len(entries) and 0 <= b < len(entries)):
                raise TokenizerError(f"merge ({a}, {b}) refers to an unknown token id")
            merged = entries[a] + entries[b]
            if merged in lookup:
                raise TokenizerError(f"merge ({a}, {b}) duplicates entry {merged!r}")
            lookup[merged] = len(entries)
            ranks[(a, b)] = len(entries)
            entries.append(merged)
        self.entries: tuple[bytes, ...] = tuple(entries)
        self.merges: tuple[tuple[int, int], ...] = tuple((int(a), int(b)) for a, b in merges)
        self.lookup = lookup
        self._ranks = ranks
        self._cache: dict[bytes, tuple[int, ...]] = {}

    def __len__(self) -> int:
        return len(self.entries)

    def __repr__(self) -> str:
        return f"Vocabulary(size={len(self)})"

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.merges == other.merges

    def id(self, token: bytes | str) -> int:
        if isinstance(token, str):
            token = token.encode("utf-8")
        return self.lookup[token]

    def _encode_chunk(self, chunk: bytes) -> tuple[int, ...]:
        cached = self._cache.get(chunk)
        if cached is not None:
            return cached
        ids = list(chunk)
        ranks = self._ranks
        while len(ids) > 1:
            best = None
            for pair in zip(ids, ids[1:]):
                r = ranks.get(pair)
                if r is not None and (best is None or r < best):
                    best = r
            if best is None:
                break
            target = self.merges[best - 256]
            out = []
            i = 0
            while i < len(ids):
                if i + 1 < len(ids) and ids[i] == target[0] and ids[i + 1] == target[1]:
                    out.append(best)
                    i += 2
                else:
                    out.append(ids[i])
                    i += 1
            ids = out
        result = tuple(ids)
        if len(self._cache) < 200_000:
            self._cache[chunk] = result
        return result

    def encode(self, text: bytes | str) -> list[int]:
        if isinstance(text, str):
            text = text.encode("utf-8")
        out: list[int] = []
        for chunk in pretokenize(text):
            out.extend(self._encode_chunk(chunk))
        return out

    def decode(self, ids: Iterable[int]) -> bytes:
        entries = self.entries
        n = len(entries)
        parts = []
        for i in ids:
            if not 0 <= i < n:
                raise TokenizerError(f"unknown token id {i}")
            parts.append(entries[i])
        return b"".join(parts)

    def to_json(self) -> dict:
        return {
            "version": VOCAB_FORMAT_VERSION,
            "entries": [list(e) for e in self.entries],
            "merges": [list(m) for m in self.merges],
        }

    @classmethod
    def from_json(cls, data: dict) -> "Vocabulary":
        if data.get("version") != VOCAB_FORMAT_VERSION:
            raise TokenizerError(f"unsupported vocabulary version {data.get('version')!r}")
        vocab = cls([tuple(m) for m in data["merges"]])
        entries = [bytes(e) for e in data["entries"]]
        if tuple(entries) != vocab.entries:
            raise TokenizerError("vocabulary entries are inconsistent with merges")
        return vocab

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        try:
            data = json.loads(Path(path).read_text())
            return cls.from_json(data)
        except (KeyError, TypeError, ValueError) as exc:
            raise TokenizerError(f"malformed vocabulary file {path}: {exc}") from exc


def encode(vocab: Vocabulary, text: bytes | str) -> list[int]:
    return vocab.encode(text)


def decode(vocab: Vocabulary, ids: Iterable[int]) -> bytes:
    return vocab.decode(ids)


def learn_bpe(corpus: bytes | str, num_merges: int) -> Vocabulary:
    """Learn `num_merges` byte-pair merges from `corpus`.

    Each round merges the most frequent adjacent pair; ties go to the
    lexicographically smallest merged byte string, then to the smaller id pair.
    Pairs whose merged string already exists in the vocabulary are skipped.
    Stops early (with a warning) if no mergeable pair is left.
    """
    if isinstance(corpus, str):
        corpus = corpus.encode("utf-8")
    if not corpus:
        raise TokenizerError("empty corpus")
    if num_merges < 0:
        raise TokenizerError("num_merges must be >= 0")

    chunk_counts = Counter(pretokenize(corpus))
    words = [list(c) for c in chunk_counts]
    freqs = list(chunk_counts.values())
    entries = [bytes([b]) for b in range(256)]
    existing = set(entries)

    pair_counts: dict[tuple[int, int], int] = defaultdict(int)
    where: dict[tuple[int, int], set[int]] = defaultdict(set)
    for wi, w in enumerate(words):
        for pair in zip(w, w[1:]):
            pair_counts[pair] += freqs[wi]
            where[pair].add(wi)

    heap = [(-c, entries[p[0]] + entries[p[1]], p) for p, c in pair_counts.items()]
    heapq.heapify(heap)
    merges: list[tuple[int, int]] = []

    while len(merges) < num_merges:
        best = None
        while heap:
            negc, merged, pair = heapq.heappop(heap)
            if pair_counts.get(pair, 0) != -negc or negc == 0:
                continue  # stale
            if merged in existing:
                continue
            best = pair
            break
        if best is None:
            logger.warning("BPE stopped after %d merges: no pairs left", len(merges))
            break
        new_id = len(entries)
        merged = entries[best[0]] + entries[best[1]]
        entries.append(merged)
        existing.add(merged)
        merges.append(best)

        touched: set[tuple[int, int]] = set()
        for wi in list(where.pop(best, ())):
            w = words[wi]
            f = freqs[wi]
            for pair in zip(w, w[1:]):
                pair_counts[pair] -= f
                touched.add(pair)
            out = []
            i = 0
            while i < len(w):
                if i + 1 < len(w) and w[i] == best[0] and w[i + 1] == best[1]:
                    out.append(new_id)
                    i += 2
                else:
                    out.append(w[i])
                    i += 1
            words[wi] = out
            for pair in zip(out, out[1:]):
                pair_counts[pair] += f
                where[pair].add(wi)
                touched.add(pair)
        pair_counts.pop(best, None)
        for pair in touched:
            c = pair_counts.get(pair, 0)
            if c > 0:
                heapq.heappush(heap, (-c, entries[pair[0]] + entries[pair[1]], pair))
            else:
                pair_counts.pop(pair, None)

    return Vocabulary(merges)


# ---------------------------------------------------------------------------
# target-language vocabulary

@dataclass(frozen=True)
class MonoWord:
    surface: bytes
    expansion: tuple[int, ...]


@dataclass(frozen=True)
class MonoVocabulary:
    words: tuple[MonoWord, ...]
    unicode_ranges: tuple[tuple[int, int], ...]

    def __len__(self) -> int:
        return len(self.words)

    @property
    def max_expansion(self) -> int:
        return max((len(w.expansion) for w in self.words), default=1)

    def trie(self) -> dict:
        """Nested dict over expansion ids; key None holds the word index."""
        root: dict = {}
        for idx, w in enumerate(self.words):
            node = root
            for t in w.expansion:
                node = node.setdefault(t, {})
            node[None] = idx
        return root

    def to_json(self) -> dict:
        return {
            "words": [
                {"surface": w.surface.decode("utf-8"), "expansion": list(w.expansion)}
                for w in self.words
            ],
            "unicode_ranges": [list(r) for r in self.unicode_ranges],
        }

    @classmethod
    def from_json(cls, data: dict) -> "MonoVocabulary":
        words = tuple(
            MonoWord(w["surface"].encode("utf-8"), tuple(int(i) for i in w["expansion"]))
            for w in data["words"]
        )
        ranges = tuple((int(lo), int(hi)) for lo, hi in data["unicode_ranges"])
        return cls(words, ranges)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), ensure_ascii=False))

    @classmethod
    def load(cls, path: str | Path) -> "MonoVocabulary":
        try:
            return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise TokenizerError(f"malformed mono vocabulary file {path}: {exc}") from exc


def parse_ranges(spec: str) -> tuple[tuple[int, int], ...]:
    """Parse "AC00-D7A3,3040-309F" (hex codepoints) into inclusive intervals."""
    out = []
    for part in spec.split(","):
        part = part.strip()
        if not part:
            continue
        lo, _, hi = part.partition("-")
        lo_i = int(lo, 16)
        hi_i = int(hi, 16) if hi else lo_i
        if hi_i < lo_i:
            raise TokenizerError(f"bad codepoint range {part!r}")
        out.append((lo_i, hi_i))
    return tuple(out)


def read_word_list(path: str | Path) -> list[bytes]:
    words = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        words.append(line.encode("utf-8"))
    return words


def _in_ranges(cp: int, ranges: Sequence[tuple[int, int]]) -> bool:
    return any(lo <= cp <= hi for lo, hi in ranges)


def build_mono_vocab(
    source_words: Iterable[bytes | str],
    ranges: Sequence[tuple[int, int]],
    vocab: Vocabulary,
    max_expansion: int = MAX_EXPANSION_LEN,
) -> MonoVocabulary:
    words = []
    seen = set()
    for w in source_words:
        if isinstance(w, str):
            w = w.encode("utf-8")
        try:
            text = w.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise TokenizerError(f"source word {w!r} is not valid UTF-8") from exc
        if not text or w in seen:
            continue
        if not all(_in_ranges(ord(ch), ranges) for ch in text):
            continue
        if w in vocab.lookup:
            continue
        expansion = tuple(vocab.encode(w))
        if len(expansion) > max_expansion:
            logger.warning("dropping %r: expansion length %d > %d", text, len(expansion), max_expansion)
            continue
        seen.add(w)
        words.append(MonoWord(w, expansion))
    if not words:
        raise TokenizerError("no target-language words survived filtering")
    return MonoVocabulary(tuple(words), tuple((int(a), int(b)) for a, b in ranges))


# ---------------------------------------------------------------------------
# segmentation

@dataclass(frozen=True)
class Unit:
    """One segmentation unit: a target word (`mono` set) or a single base token."""
    token: int | None = None
    mono: int | None = None

    @property
    def is_mono(self) -> bool:
        return self.mono is not None


@dataclass
class UnitSegmentation:
    units: list[Unit]
    boundary_positions: list[int]
    token_ids: list[int] = field(default_factory=list)

    def surfaces(self, mono: MonoVocabulary, vocab: Vocabulary) -> list[bytes]:
        return [
            mono.words[u.mono].surface if u.is_mono else vocab.entries[u.token]
            for u in self.units
        ]


def match_ids(ids: Sequence[int], trie: dict) -> list[Unit]:
    """Forward maximum matching of word expansions over a token-id sequence."""
    units = []
    i = 0
    n = len(ids)
    while i < n:
        node = trie
        best_word = None
        best_len = 0
        j = i
        while j < n:
            node = node.get(ids[j])
            if node is None:
                break
            j += 1
            if None in node:
                best_word = node[None]
                best_len = j - i
        if best_word is not None:
            units.append(Unit(mono=best_word))
            i += best_len
        else:
            units.append(Unit(token=ids[i]))
            i += 1
    return units


def segment_forward_max_match(
    text: bytes | str, mono: MonoVocabulary, vocab: Vocabulary, trie: dict | None = None
) -> UnitSegmentation:
    ids = vocab.encode(text)
    units = match_ids(ids, trie if trie is not None else mono.trie())
    positions = []
    pos = 0
    for u in units:
        positions.append(pos)
        pos += len(mono.words[u.mono].expansion) if u.is_mono else 1
    return UnitSegmentation(units, positions, ids)
