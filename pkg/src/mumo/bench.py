"""Side-by-side decoding benchmark and report writers."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

from .base_lm import BaseModel, score_continuation
from .decoder import MODES, DecodeConfig, DecodeTrace, generate
from .mumo_head import MonoHead
from .tokenizer import MonoVocabulary, Vocabulary

EXPANSION_MODE = "vocab_expansion"
REPORT_FORMATS = ("csv", "json", "markdown")


@dataclass
class BenchRow:
    mode: str
    steps: int
    tokens_emitted: int
    forward_invocations: int
    token_positions: int
    bytes_generated: int
    steps_per_byte: float
    speedup_forward: float | None
    speedup_wall: float | None
    speedup_positions: float | None
    perplexity: float | None
    lcs_f1: float | None


COLUMNS = [f.name for f in fields(BenchRow)]
HEADERS = {
    "mode": "Mode", "steps": "Steps", "tokens_emitted": "Tokens", "forward_invocations": "Forward Calls",
    "token_positions": "Token Positions", "bytes_generated": "Bytes", "steps_per_byte": "Steps/Byte",
    "speedup_forward": "Speed Up", "speedup_wall": "Speed Up (wall)",
    "speedup_positions": "Speed Up (positions)", "perplexity": "PPL", "lcs_f1": "LCS-F1",
}


@dataclass
class BenchReport:
    rows: list[BenchRow]
    prompt_perplexity: dict[str, list[float | None]] = field(default_factory=dict)

    def row(self, mode: str) -> BenchRow:
        for r in self.rows:
            if r.mode == mode:
                return r
        raise KeyError(mode)

    def to_json(self) -> dict:
        return {"rows": [asdict(r) for r in self.rows], "prompt_perplexity": self.prompt_perplexity}

    @classmethod
    def from_json(cls, data: dict) -> "BenchReport":
        return cls([BenchRow(**r) for r in data["rows"]], dict(data.get("prompt_perplexity", {})))


def lcs_length(a: str, b: str) -> int:
    """Bit-parallel LCS length (one big-int update per character of `b`)."""
    if not a or not b:
        return 0
    masks: dict[str, int] = {}
    for i, c in enumerate(a):
        masks[c] = masks.get(c, 0) | (1 << i)
    full = (1 << len(a)) - 1
    v = full
    for c in b:
        u = v & masks.get(c, 0)
        v = ((v + u) | (v - u)) & full
    return len(a) - bin(v).count("1")


def lcs_f1(candidate: str, reference: str) -> float:
    n = lcs_length(candidate, reference)
    if n == 0:
        return 0.0
    p, r = n / len(candidate), n / len(reference)
    return 2 * p * r / (p + r)


def continuation_nll(model: BaseModel, vocab: Vocabulary, prompt: bytes, text: bytes) -> tuple[float, int]:
    """Summed negative log-likelihood of `text` after `prompt` under the base model."""
    p = vocab.encode(prompt)
    c = vocab.encode(text)[: model.config.context_len - len(p)]
    if not c:
        return 0.0, 0
    lp = score_continuation(model, p, c)
    return -sum(lp), len(lp)


def make_prompts(heldout_docs: Sequence[str], n: int, words: int) -> tuple[list[str], list[str]]:
    """First `words` words of each document as prompt, the rest as reference."""
    prompts, refs = [], []
    for doc in heldout_docs:
        parts = doc.split(" ")
        if len(parts) <= words:
            continue
        prompts.append(" ".join(parts[:words]))
        refs.append(" " + " ".join(parts[words:]))
        if len(prompts) == n:
            break
    return prompts, refs


def bench(model: BaseModel, vocab: Vocabulary, head: MonoHead | None, mono: MonoVocabulary | None,
          prompts: Sequence[str], modes: Sequence[str], config: DecodeConfig,
          references: Sequence[str] | None = None, shortlist: frozenset[int] | None = None,
          expanded: BaseModel | None = None, min_prompts: int = 10,
          traces: dict[str, list[DecodeTrace]] | None = None) -> BenchReport:
    """Decode every prompt under every mode with identical seeds and aggregate the traces.

    Prompt i is decoded with seed ``config.seed + i`` in every mode.
    `traces`, if given, receives the per-prompt traces keyed by mode.
    """
    if len(prompts) < min_prompts:
        raise ValueError(f"need at least {min_prompts} prompts, got {len(prompts)}")
    if references is not None and len(references) != len(prompts):
        raise ValueError("references and prompts differ in length")
    for m in modes:
        if m not in MODES and m != EXPANSION_MODE:
            raise ValueError(f"unknown mode {m!r}")
        if m in ("mumo", "mumo_no_verify") and (head is None or mono is None):
            raise ValueError(f"mode {m} needs a mono vocabulary and a trained head")
        if m == EXPANSION_MODE and (expanded is None or mono is None):
            raise ValueError(f"mode {m} needs an expanded model")

    raw = {}
    for m in modes:
        totals = dict(steps=0, tokens=0, fwd=0, pos=0, nbytes=0, wall=0.0, nll=0.0, ntok=0, f1=[])
        ppl: list[float | None] = []
        kept: list[DecodeTrace] = []
        for i, prompt in enumerate(prompts):
            cfg = replace(config, mode="vanilla" if m == EXPANSION_MODE else m, seed=config.seed + i,
                          shortlist_allowed=shortlist if m == "shortlist" else None)
            net = expanded if m == EXPANSION_MODE else model
            text, tr = generate(net, vocab, prompt, cfg, head=head, mono=mono, record_candidates=False)
            kept.append(tr)
            totals["steps"] += tr.steps
            totals["tokens"] += tr.tokens_emitted
            totals["fwd"] += tr.forward_invocations
            totals["pos"] += tr.token_positions
            totals["nbytes"] += tr.bytes_generated
            totals["wall"] += tr.wall_clock
            nll, n = continuation_nll(model, vocab, prompt.encode("utf-8"), text)
            totals["nll"] += nll
            totals["ntok"] += n
            ppl.append(math.exp(nll / n) if n else None)
            if references is not None:
                totals["f1"].append(lcs_f1(text.decode("utf-8", errors="replace"), references[i]))
        raw[m] = (totals, ppl)
        if traces is not None:
            traces[m] = kept

    def per_byte(t, key):
        return t[key] / t["nbytes"] if t["nbytes"] else math.inf

    ref = raw.get("vanilla", (None,))[0]
    rows = []
    for m in modes:
        t, _ = raw[m]

        def speed(key):
            if ref is None:
                return None
            if m == "vanilla":
                return 1.0
            mine = per_byte(t, key)
            return per_byte(ref, key) / mine if mine else None

        rows.append(BenchRow(
            mode=m, steps=t["steps"], tokens_emitted=t["tokens"], forward_invocations=t["fwd"],
            token_positions=t["pos"], bytes_generated=t["nbytes"],
            steps_per_byte=per_byte(t, "steps"),
            speedup_forward=speed("fwd"), speedup_wall=speed("wall"), speedup_positions=speed("pos"),
            perplexity=math.exp(t["nll"] / t["ntok"]) if t["ntok"] else None,
            lcs_f1=sum(t["f1"]) / len(t["f1"]) if t["f1"] else None,
        ))
    return BenchReport(rows, {m: raw[m][1] for m in modes})


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def report_emit(report: BenchReport, fmt: str, path: str | Path | None = None) -> str:
    """Render `report` as csv, json or a markdown table; also write it when `path` is given."""
    if fmt not in REPORT_FORMATS:
        raise ValueError(f"unknown report format {fmt!r}")
    if not report.rows:
        raise ValueError("empty report")
    if fmt == "json":
        text = json.dumps(report.to_json(), indent=2)
    elif fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in report.rows:
            w.writerow([getattr(r, c) if getattr(r, c) is not None else "" for c in COLUMNS])
        text = buf.getvalue()
    else:
        lines = ["| " + " | ".join(HEADERS[c] for c in COLUMNS) + " |",
                 "|" + "|".join("---" for _ in COLUMNS) + "|"]
        for r in report.rows:
            lines.append("| " + " | ".join(_fmt(getattr(r, c)) for c in COLUMNS) + " |")
        text = "\n".join(lines) + "\n"
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text
