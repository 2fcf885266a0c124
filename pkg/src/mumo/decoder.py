"""Verify-then-commit multi-token decoding, plus vanilla and shortlist baselines."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .base_lm import (BaseModel, ContextOverflow, DecodeState, ModelConfig, TrainHyper, forward,
                      forward_batch, train_base)
from .mumo_head import MonoHead, joint_logits
from .tokenizer import EOT_ID, MonoVocabulary, Vocabulary, match_ids

logger = logging.getLogger(__name__)

MODES = ("mumo", "mumo_no_verify", "vanilla", "shortlist")


class NoFeasibleCandidate(RuntimeError):
    pass


@dataclass
class DecodeConfig:
    mode: str = "mumo"
    k: int = 10
    temperature: float = 0.1
    top_p: float = 0.7
    sample_top_k: int = 20
    repetition_penalty: float = 1.05
    length_penalty: tuple[int, float] = (256, 1.03)  # accepted for config parity; not applied
    max_new_tokens: int = 128
    deterministic: bool = False
    seed: int = 0
    shortlist_allowed: frozenset[int] | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown decode mode {self.mode!r}")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must lie in (0, 1]")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")


@dataclass
class Candidate:
    joint_id: int
    surface: bytes
    expansion: tuple[int, ...]
    prior: float
    sigma: float | None = None

    def to_json(self) -> dict:
        return {
            "id": self.joint_id,
            "surface": self.surface.decode("utf-8", errors="backslashreplace"),
            "prior": self.prior,
            "sigma": self.sigma,
        }


class JointVocab:
    """Maps joint ids (base tokens first, then target words) to surfaces and base expansions."""

    def __init__(self, vocab: Vocabulary, mono: MonoVocabulary | None = None):
        self.vocab = vocab
        self.mono = mono
        self.n_base = len(vocab)
        self.n_mono = len(mono) if mono is not None else 0

    def __len__(self) -> int:
        return self.n_base + self.n_mono

    def expansion(self, jid: int) -> tuple[int, ...]:
        if jid < self.n_base:
            return (jid,)
        return self.mono.words[jid - self.n_base].expansion

    def surface(self, jid: int) -> bytes:
        if jid < self.n_base:
            return self.vocab.entries[jid]
        return self.mono.words[jid - self.n_base].surface


@dataclass
class StepRecord:
    step: int
    candidates: list[Candidate]
    chosen: int
    committed: list[int]
    prob_mass: float | None = None

    def to_json(self) -> dict:
        return {
            "step": self.step,
            "candidates": [c.to_json() for c in self.candidates],
            "chosen": self.chosen,
            "committed": list(self.committed),
            "prob_mass": self.prob_mass,
        }


@dataclass
class DecodeTrace:
    mode: str
    records: list[StepRecord] = field(default_factory=list)
    steps: int = 0
    tokens_emitted: int = 0
    forward_invocations: int = 0
    token_positions: int = 0
    bytes_generated: int = 0
    wall_clock: float = 0.0
    context_truncated: bool = False
    notes: list[str] = field(default_factory=list)

    def totals(self) -> dict:
        return {
            "mode": self.mode,
            "steps": self.steps,
            "tokens_emitted": self.tokens_emitted,
            "forward_invocations": self.forward_invocations,
            "token_positions": self.token_positions,
            "bytes_generated": self.bytes_generated,
            "wall_clock": self.wall_clock,
            "context_truncated": self.context_truncated,
            "notes": list(self.notes),
        }

    def counters(self) -> tuple:
        """Everything except wall-clock, for determinism comparisons."""
        return (self.steps, self.tokens_emitted, self.forward_invocations, self.token_positions,
                self.bytes_generated, [r.to_json() for r in self.records])

    def write_jsonl(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for r in self.records:
                fh.write(json.dumps(r.to_json(), ensure_ascii=False) + "\n")
            fh.write(json.dumps({"totals": self.totals()}) + "\n")


def read_trace_jsonl(path: str | Path) -> tuple[list[dict], dict]:
    records, totals = [], None
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        obj = json.loads(line)
        if "totals" in obj:
            totals = obj["totals"]
        else:
            records.append(obj)
    return records, totals


# ---------------------------------------------------------------------------
# step 1: candidate selection

def apply_repetition_penalty(logits: torch.Tensor, seen: Iterable[int], penalty: float, n_base: int) -> torch.Tensor:
    """Shrink logits of already-committed base ids: positive ones divided, negative ones multiplied."""
    if penalty == 1.0:
        return logits
    idx = torch.tensor(sorted({i for i in seen if i < n_base}), dtype=torch.long)
    if len(idx) == 0:
        return logits
    logits = logits.clone()
    vals = logits[idx]
    logits[idx] = torch.where(vals > 0, vals / penalty, vals * penalty)
    return logits


def log_priors(logits: torch.Tensor, seen: Iterable[int] = (), repetition_penalty: float = 1.0,
               temperature: float = 1.0, n_base: int | None = None) -> np.ndarray:
    n_base = logits.shape[-1] if n_base is None else n_base
    z = apply_repetition_penalty(logits.float(), seen, repetition_penalty, n_base) / temperature
    return torch.log_softmax(z.double(), dim=-1).numpy()


def topk_ids(logp: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries, ties to the lower index."""
    k = min(k, len(logp))
    if k < len(logp) // 4:
        part = np.argpartition(-logp, k - 1)[:k]
        thresh = logp[part].min()
        pool = np.flatnonzero(logp >= thresh)
        order = pool[np.argsort(-logp[pool], kind="stable")]
        return order[:k]
    return np.argsort(-logp, kind="stable")[:k]


def select_topk(logits: torch.Tensor, k: int, jv: JointVocab | None = None, seen: Iterable[int] = (),
                repetition_penalty: float = 1.0, temperature: float = 1.0) -> list[Candidate]:
    """Top-k joint ids by penalised, tempered probability.

    `logits` may be log-probabilities; a normalised distribution passes through unchanged.
    """
    n = logits.shape[-1]
    if k > n:
        logger.warning("k=%d exceeds joint vocabulary size %d; clamping", k, n)
        k = n
    n_base = jv.n_base if jv is not None else n
    logp = log_priors(logits, seen, repetition_penalty, temperature, n_base)
    out = []
    for jid in topk_ids(logp, k).tolist():
        if jv is None:
            out.append(Candidate(jid, b"", (jid,), float(logp[jid])))
        else:
            out.append(Candidate(jid, jv.surface(jid), jv.expansion(jid), float(logp[jid])))
    return out


# ---------------------------------------------------------------------------
# step 2: verification

def verify(model: BaseModel, prefix: Sequence[int] | None, candidates: Sequence[Candidate],
           state: DecodeState | None = None, last_logits: torch.Tensor | None = None,
           notes: list[str] | None = None) -> list[Candidate]:
    """Length-normalised base log-probability of each candidate's expansion.

    All candidates are scored in one batched teacher-forced pass over the
    cached prefix; candidates that would overflow the context are dropped.
    """
    if state is None:
        if not prefix:
            raise ValueError("prefix must be non-empty")
        logits, _, state = forward(model, DecodeState(), prefix)
        last_logits = logits[-1]
    ctx = model.config.context_len
    kept = []
    for c in candidates:
        if state.t + len(c.expansion) > ctx:
            if notes is not None:
                notes.append(f"dropped candidate {c.joint_id}: context overflow")
            continue
        kept.append(c)
    if not kept:
        raise NoFeasibleCandidate("no feasible candidate")
    L = max(len(c.expansion) for c in kept)
    batch = torch.full((len(kept), L), EOT_ID, dtype=torch.long)
    for r, c in enumerate(kept):
        batch[r, : len(c.expansion)] = torch.tensor(c.expansion)
    out_logits = forward_batch(model, state, batch)
    logp_first = torch.log_softmax(last_logits.double(), dim=-1)
    logp_rest = torch.log_softmax(out_logits.double(), dim=-1)
    scored = []
    for r, c in enumerate(kept):
        e = c.expansion
        total = float(logp_first[e[0]])
        if len(e) > 1:
            nxt = torch.tensor(e[1:], dtype=torch.long)
            total += float(logp_rest[r, torch.arange(len(e) - 1), nxt].sum())
        scored.append(replace(c, sigma=total / len(e)))
    return scored


# ---------------------------------------------------------------------------
# final choice

def nucleus(probs: np.ndarray, top_p: float) -> np.ndarray:
    """Indices (descending probability, ties to lower index) of the smallest set reaching top_p."""
    order = np.argsort(-probs, kind="stable")
    csum = np.cumsum(probs[order])
    keep = int(np.searchsorted(csum, top_p - 1e-12) + 1)
    return order[: max(1, min(keep, len(order)))]


def choose(candidates: Sequence[Candidate], config: DecodeConfig, rng: np.random.Generator | None = None,
           use_prior: bool = False) -> Candidate:
    if not candidates:
        raise NoFeasibleCandidate("no feasible candidate")
    if use_prior:
        scores = np.array([c.prior for c in candidates])
    else:
        scores = np.array([c.sigma for c in candidates], dtype=float)
    if config.deterministic:
        best = max(range(len(candidates)), key=lambda i: (scores[i], -candidates[i].joint_id))
        return candidates[best]
    # priors are already tempered; sigma is a plain log-probability scale
    temp = 1.0 if use_prior else config.temperature
    z = scores / temp
    p = np.exp(z - z.max())
    p /= p.sum()
    keep = nucleus(p, config.top_p)
    q = p[keep] / p[keep].sum()
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    return candidates[int(keep[rng.choice(len(keep), p=q)])]


def sample_vanilla(logits: torch.Tensor, config: DecodeConfig, seen: Iterable[int],
                   rng: np.random.Generator) -> tuple[int, float]:
    """Repetition penalty, temperature, top-k then nucleus sampling over base logits."""
    logp = log_priors(logits, seen, config.repetition_penalty, config.temperature)
    if config.deterministic:
        jid = int(topk_ids(logp, 1)[0])
        return jid, float(logp[jid])
    top = topk_ids(logp, config.sample_top_k)
    p = np.exp(logp[top] - logp[top].max())
    p /= p.sum()
    keep = nucleus(p, config.top_p)
    q = p[keep] / p[keep].sum()
    jid = int(top[keep[rng.choice(len(keep), p=q)]])
    return jid, float(logp[jid])


# ---------------------------------------------------------------------------
# generation loop

def generate(model: BaseModel, vocab: Vocabulary, prompt: bytes | str, config: DecodeConfig,
             head: MonoHead | None = None, mono: MonoVocabulary | None = None,
             record_candidates: bool = True) -> tuple[bytes, DecodeTrace]:
    """Generate up to `config.max_new_tokens` base tokens after `prompt`.

    Each step runs one forward pass over the previously committed ids; the
    mumo mode adds one batched verification pass. Returns the generated
    bytes (without the end-of-text byte) and the trace.
    """
    mode = config.mode
    mumo = mode in ("mumo", "mumo_no_verify")
    if mumo and head is None and mono is not None and len(mono) > 0:
        raise ValueError("mumo decoding needs a trained head")
    if head is not None and mono is not None and head.n_words != len(mono):
        raise ValueError("head and mono vocabulary sizes differ")
    prompt_ids = vocab.encode(prompt)
    if not prompt_ids:
        raise ValueError("empty prompt")
    ctx = model.config.context_len
    if len(prompt_ids) >= ctx:
        raise ContextOverflow("prompt does not fit the context")

    extended = model.vocab_size > len(vocab)  # vocabulary-expansion baseline
    if mumo and extended:
        raise ValueError("mumo decoding needs an unextended base model")
    jv = JointVocab(vocab, mono if (mumo or extended) else None)
    if extended and model.vocab_size != len(jv):
        raise ValueError("extended model does not match the mono vocabulary")
    rng = np.random.default_rng(config.seed)
    allowed_mask = None
    if mode == "shortlist" and config.shortlist_allowed is not None:
        allowed_mask = torch.full((model.vocab_size,), float("-inf"))
        allowed_mask[torch.tensor(sorted(config.shortlist_allowed), dtype=torch.long)] = 0.0

    trace = DecodeTrace(mode=mode)
    t0 = time.perf_counter()
    state = DecodeState()
    seen = list(prompt_ids)
    pending = list(prompt_ids)
    out = bytearray()
    with torch.no_grad():
        while trace.tokens_emitted < config.max_new_tokens:
            if state.t + len(pending) > ctx:
                trace.context_truncated = True
                trace.notes.append("context full")
                break
            logits, h, state = forward(model, state, pending)
            trace.forward_invocations += 1
            trace.token_positions += len(pending)
            last = logits[-1]
            step = trace.steps
            prob_mass = None
            if mumo:
                jl = joint_logits(model, head, h[-1])
                prob_mass = float(torch.softmax(jl.double(), dim=-1).sum())
                cands = select_topk(jl, config.k, jv, seen, config.repetition_penalty, config.temperature)
                if not any(state.t + len(c.expansion) <= ctx for c in cands):
                    trace.context_truncated = True
                    trace.notes.append("context full")
                    break
                if mode == "mumo":
                    cands = verify(model, None, cands, state=state, last_logits=last, notes=trace.notes)
                    trace.forward_invocations += 1
                    trace.token_positions += len(cands) * max(len(c.expansion) for c in cands)
                    chosen = choose(cands, config, rng)
                else:
                    cands = [c for c in cands if state.t + len(c.expansion) <= ctx]
                    chosen = choose(cands, config, rng, use_prior=True)
                jid, expansion = chosen.joint_id, list(chosen.expansion)
                step_cands = cands
            else:
                if allowed_mask is not None:
                    last = last + allowed_mask
                jid, lp = sample_vanilla(last, config, seen, rng)
                expansion = list(jv.expansion(jid)) if extended else [jid]
                step_cands = [Candidate(jid, jv.surface(jid), tuple(expansion), lp)]

            budget = config.max_new_tokens - trace.tokens_emitted
            if extended:
                committed = [jid]
                emitted = len(expansion)
                surface = jv.surface(jid)
            else:
                committed = expansion[:budget]
                emitted = len(committed)
                surface = vocab.decode(committed)
            trace.steps += 1
            trace.tokens_emitted += emitted
            trace.records.append(StepRecord(step, step_cands if record_candidates else [], jid,
                                            committed, prob_mass))
            seen.extend(committed)
            if jid == EOT_ID:
                break
            out.extend(surface)
            pending = committed
    trace.bytes_generated = len(out)
    trace.wall_clock = time.perf_counter() - t0
    return bytes(out), trace


# ---------------------------------------------------------------------------
# vocabulary-expansion baseline

def expand_vocab_baseline(model: BaseModel, vocab: Vocabulary, mono: MonoVocabulary,
                          corpus: Iterable[bytes | str], hyper: TrainHyper | None = None) -> BaseModel:
    """Grow input embeddings and output head by one row per target word, then train every parameter.

    New rows and columns start at the mean of their expansion's base rows and
    columns. Training text is re-segmented so target words are single input tokens.
    """
    V, M = model.vocab_size, len(mono)
    cfg = model.config
    new_cfg = ModelConfig(vocab_size=V + M, d_multi=cfg.d_multi, n_layers=cfg.n_layers,
                          n_heads=cfg.n_heads, context_len=cfg.context_len, seed=cfg.seed)
    ext = BaseModel(new_cfg)
    state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    emb, head = state["tok_emb"], state["head"]
    new_emb = torch.empty(V + M, cfg.d_multi)
    new_head = torch.empty(cfg.d_multi, V + M)
    new_emb[:V] = emb
    new_head[:, :V] = head
    for j, w in enumerate(mono.words):
        e = list(w.expansion)
        new_emb[V + j] = emb[e].mean(dim=0)
        new_head[:, V + j] = head[:, e].mean(dim=1)
    state["tok_emb"], state["head"] = new_emb, new_head
    ext.load_state_dict(state)

    trie = mono.trie()
    stream: list[int] = []
    for text in corpus:
        for u in match_ids(vocab.encode(text), trie):
            stream.append(V + u.mono if u.is_mono else u.token)
        stream.append(EOT_ID)
    train_base(ext, stream, hyper or TrainHyper(lr=1e-3, steps=300, batch=8))
    ext.eval()
    return ext


def read_shortlist(path: str | Path, vocab: Vocabulary) -> frozenset[int]:
    """Newline-separated token ids or token surfaces."""
    ids = set()
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        s = line.strip()
        if s.lstrip("-").isdigit():
            i = int(s)
            if not 0 <= i < len(vocab):
                raise ValueError(f"shortlist id {i} out of range")
            ids.add(i)
        else:
            key = line.encode("utf-8")
            if key not in vocab.lookup:
                raise ValueError(f"shortlist surface {line!r} is not a vocabulary entry")
            ids.add(vocab.lookup[key])
    return frozenset(ids)


def config_to_json(config: DecodeConfig) -> dict:
    d = asdict(config)
    if d["shortlist_allowed"] is not None:
        d["shortlist_allowed"] = sorted(d["shortlist_allowed"])
    return d
