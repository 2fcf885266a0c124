"""Target-language output head on top of a frozen base model."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .base_lm import INIT_STD, BaseModel, Divergence, lr_at, write_train_log
from .tensorio import KIND_HEAD, Container, ContainerError, read_container, tensor_digest, write_container
from .tokenizer import EOT_ID, MonoVocabulary, Vocabulary, match_ids

logger = logging.getLogger(__name__)

STRATEGIES = ("multi_init", "random_init")
GATE_SCALE = 4.0


class ArtifactMismatch(ValueError):
    """A head file was trained against a different base model."""


def ffn_width(d_multi: int) -> int:
    return max(4, d_multi // 4)


class MonoHead(nn.Module):
    def __init__(self, d_multi: int, n_words: int):
        super().__init__()
        f = ffn_width(d_multi)
        self.W1 = nn.Parameter(torch.zeros(d_multi, f))
        self.W_gate = nn.Parameter(torch.zeros(d_multi, f))
        self.W2 = nn.Parameter(torch.zeros(f, d_multi))
        self.g_mono = nn.Parameter(torch.zeros(d_multi, n_words))

    @property
    def n_words(self) -> int:
        return self.g_mono.shape[1]

    def ffn(self, h: torch.Tensor) -> torch.Tensor:
        return (F.silu(h @ self.W_gate) * (h @ self.W1)) @ self.W2

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return self.ffn(h) @ self.g_mono

    def numpy_state(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy() for k, v in self.state_dict().items()}

    def digest(self) -> str:
        return tensor_digest(self.numpy_state())


def mono_forward(head: MonoHead, h: torch.Tensor) -> torch.Tensor:
    return head(h)


def joint_logits(model: BaseModel, head: MonoHead | None, h: torch.Tensor) -> torch.Tensor:
    """[f_multi(h) ; f_mono(h)] along the last axis."""
    base = h @ model.head
    if head is None or head.n_words == 0:
        return base
    return torch.cat([base, head(h)], dim=-1)


def init_mono_head(strategy: str, model: BaseModel, mono: MonoVocabulary, seed: int = 0,
                   hidden_mean: torch.Tensor | None = None) -> MonoHead:
    """Build a head for `mono`.

    random_init: every tensor ~ N(0, 0.02).

    multi_init: column j of g_mono is the mean of the base output-head
    columns of word j's expansion. The FFN starts as a scaled projection onto
    the top ``d_ffn`` left singular directions of g_mono: W1 holds those
    directions, W2 = W1^T / silu(s), and every gate column points along the
    mean hidden state scaled so the gate input sits near ``s``. `hidden_mean`
    should be the average final hidden state on target-language text; without
    it the mean over the words' own expansions is used.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown init strategy {strategy!r}")
    d = model.config.d_multi
    head = MonoHead(d, len(mono))
    f = head.W1.shape[1]
    g = torch.Generator().manual_seed(seed)
    V = model.vocab_size
    for j, w in enumerate(mono.words):
        if any(not 0 <= t < V for t in w.expansion):
            raise ValueError(f"expansion of word {j} has an id outside the base vocabulary")
    with torch.no_grad():
        if strategy == "random_init":
            for p in (head.W1, head.W_gate, head.W2, head.g_mono):
                p.normal_(0.0, INIT_STD, generator=g)
            return head
        cols = model.head.detach()
        for j, w in enumerate(mono.words):
            head.g_mono[:, j] = cols[:, list(w.expansion)].mean(dim=1)
        if len(mono) == 0:
            return head
        u, _, _ = torch.linalg.svd(head.g_mono, full_matrices=False)
        basis = torch.zeros(d, f)
        r = min(f, u.shape[1])
        basis[:, :r] = u[:, :r]
        if r < f:  # fewer words than FFN width; pad with random orthogonal directions
            extra = torch.randn(d, f - r, generator=g)
            extra -= basis[:, :r] @ (basis[:, :r].T @ extra)
            basis[:, r:] = torch.linalg.qr(extra).Q
        mu = hidden_mean if hidden_mean is not None else expansion_hidden_mean(model, mono)
        mu = mu.detach().float()
        gate = mu / mu.dot(mu).clamp_min(1e-12)  # h . gate ~ 1 for typical h
        head.W1.copy_(basis)
        head.W_gate.copy_(gate[:, None].expand(d, f) * GATE_SCALE)
        head.W2.copy_(basis.T / F.silu(torch.tensor(GATE_SCALE)))
    return head


@torch.no_grad()
def expansion_hidden_mean(model: BaseModel, mono: MonoVocabulary) -> torch.Tensor:
    """Mean final hidden state over every word expansion, each read after an end-of-text id."""
    total = torch.zeros(model.config.d_multi)
    count = 0
    for w in mono.words:
        h, _ = model.hidden(torch.tensor([[EOT_ID, *w.expansion]]))
        total += h[0].sum(dim=0)
        count += h.shape[1]
    return total / max(count, 1)


# ---------------------------------------------------------------------------
# training data

@dataclass
class TrainingUnit:
    input_ids: list[int]
    loss_positions: list[tuple[int, int]]  # (position in input_ids, joint target id)


def build_training_units(texts: Iterable[bytes | str], mono: MonoVocabulary, vocab: Vocabulary,
                         context_len: int) -> list[TrainingUnit]:
    """One loss position per segmentation unit, at the token preceding the unit.

    Every text is prefixed with the end-of-text id so its first unit is
    supervised too. Texts longer than the context are cut into windows at
    unit boundaries; each window restarts from the token preceding its first unit.
    """
    V = len(vocab)
    trie = mono.trie()
    out: list[TrainingUnit] = []
    any_text = False
    for text in texts:
        any_text = True
        seq = [EOT_ID] + vocab.encode(text)
        units = match_ids(seq[1:], trie)
        spans = []  # (start in seq, length, joint id)
        pos = 1
        for u in units:
            if u.is_mono:
                n = len(mono.words[u.mono].expansion)
                spans.append((pos, n, V + u.mono))
            else:
                spans.append((pos, 1, u.token))
            pos += n if u.is_mono else 1
        i = 0
        while i < len(spans):
            w0 = spans[i][0] - 1
            j = i
            while j < len(spans) and spans[j][0] + spans[j][1] - w0 <= context_len:
                j += 1
            if j == i:  # single unit longer than the context; cannot happen with capped expansions
                raise ValueError("unit longer than context window")
            end = spans[j - 1][0] + spans[j - 1][1]
            out.append(TrainingUnit(
                input_ids=seq[w0:end],
                loss_positions=[(s - 1 - w0, tgt) for s, _, tgt in spans[i:j]],
            ))
            i = j
    if not any_text:
        raise ValueError("empty corpus")
    return out


@torch.no_grad()
def collect_hidden(model: BaseModel, units: Sequence[TrainingUnit]) -> tuple[torch.Tensor, torch.Tensor]:
    """Hidden states at every loss position (the base is frozen, so these are fixed)."""
    hs, ts = [], []
    order = sorted(range(len(units)), key=lambda i: len(units[i].input_ids))
    batch: list[int] = []

    def flush():
        if not batch:
            return
        L = max(len(units[i].input_ids) for i in batch)
        x = torch.full((len(batch), L), EOT_ID, dtype=torch.long)
        for r, i in enumerate(batch):
            x[r, : len(units[i].input_ids)] = torch.tensor(units[i].input_ids)
        h, _ = model.hidden(x)
        for r, i in enumerate(batch):
            pos = [p for p, _ in units[i].loss_positions]
            hs.append(h[r, pos])
            ts.extend(t for _, t in units[i].loss_positions)
        batch.clear()

    for i in order:
        batch.append(i)
        if len(batch) == 32:
            flush()
    flush()
    return torch.cat(hs), torch.tensor(ts, dtype=torch.long)


# ---------------------------------------------------------------------------
# fine-tuning

@dataclass
class FinetuneHyper:
    lr: float = 1e-3
    steps: int = 1500
    batch: int = 128
    warmup: int = 150
    weight_decay: float = 0.01
    seed: int = 0
    log_every: int = 50


def joint_loss(model: BaseModel, head: MonoHead, h: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    base = (h @ model.head).detach()
    logits = torch.cat([base, head(h)], dim=-1)
    return F.cross_entropy(logits, targets)


def finetune_head(model: BaseModel, head: MonoHead, units: Sequence[TrainingUnit] | tuple,
                  hyper: FinetuneHyper | None = None, log_path: str | Path | None = None) -> MonoHead:
    """Maximise log p_mumo(target | prefix) over loss positions, updating only `head`.

    `units` may also be a precomputed ``(hidden, targets)`` pair from `collect_hidden`.
    """
    hyper = hyper or FinetuneHyper()
    if isinstance(units, tuple):
        H, T = units
    else:
        if not units:
            raise ValueError("no training units")
        model.eval()
        H, T = collect_hidden(model, units)
    before = model.digest()
    for p in model.parameters():
        p.requires_grad_(False)
    opt = torch.optim.AdamW(head.parameters(), lr=hyper.lr, weight_decay=hyper.weight_decay)
    g = torch.Generator().manual_seed(hyper.seed)
    rows = []
    try:
        for step in range(hyper.steps):
            lr = lr_at(step, hyper)
            for group in opt.param_groups:
                group["lr"] = lr
            idx = torch.randint(0, len(T), (min(hyper.batch, len(T)),), generator=g)
            loss = joint_loss(model, head, H[idx], T[idx])
            if not torch.isfinite(loss):
                raise Divergence(f"divergence: non-finite loss at step {step}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            if step % hyper.log_every == 0 or step == hyper.steps - 1:
                rows.append((step, loss.item(), lr))
                logger.info("head step %d loss %.4f lr %.2e", step, loss.item(), lr)
    finally:
        for p in model.parameters():
            p.requires_grad_(True)
    if model.digest() != before:
        raise RuntimeError("base model parameters changed during head fine-tuning")
    if log_path is not None:
        write_train_log(log_path, rows)
    return head


@torch.no_grad()
def heldout_joint_ce(model: BaseModel, head: MonoHead, data) -> float:
    H, T = data if isinstance(data, tuple) else collect_hidden(model, data)
    total = 0.0
    for s in range(0, len(T), 1024):
        total += joint_loss(model, head, H[s : s + 1024], T[s : s + 1024]).item() * len(T[s : s + 1024])
    return total / len(T)


# ---------------------------------------------------------------------------
# persistence

def save_head(head: MonoHead, model: BaseModel, path: str | Path) -> None:
    d, f = head.W1.shape
    c = Container(KIND_HEAD, [d, f, head.W2.shape[1], head.n_words], head.numpy_state(),
                  link=bytes.fromhex(model.digest()))
    write_container(path, c)


def load_head(path: str | Path, model: BaseModel) -> MonoHead:
    c = read_container(path)
    if c.kind != KIND_HEAD:
        raise ContainerError(f"{path}: not a head file")
    if c.link != bytes.fromhex(model.digest()):
        raise ArtifactMismatch(f"{path}: head was trained against a different base model")
    d, f, d_mono, n = c.ints
    head = MonoHead(d, n)
    head.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in c.tensors.items()})
    return head


def mean_target_rank(model: BaseModel, head: MonoHead, H: torch.Tensor, T: torch.Tensor) -> float:
    """Mean 1-based rank of the target under the joint distribution."""
    with torch.no_grad():
        logits = joint_logits(model, head, H)
        tgt = logits.gather(1, T[:, None])
        return float(((logits > tgt).sum(dim=1) + 1).float().mean())

