"""Small pre-norm decoder-only transformer used as the frozen base model."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .tensorio import KIND_BASE, Container, ContainerError, read_container, tensor_digest, write_container

logger = logging.getLogger(__name__)

INIT_STD = 0.02


class ContextOverflow(ValueError):
    pass


class Divergence(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_multi: int = 128
    n_layers: int = 4
    n_heads: int = 4
    context_len: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.d_multi <= 0 or self.n_heads <= 0 or self.d_multi % self.n_heads:
            raise ValueError("d_multi must be a positive multiple of n_heads")
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.context_len < 32:
            raise ValueError("context_len must be >= 32")
        if self.vocab_size < 257:
            raise ValueError("vocab_size must be >= 257")

    @property
    def d_head(self) -> int:
        return self.d_multi // self.n_heads

    def to_ints(self) -> list[int]:
        return [self.vocab_size, self.d_multi, self.n_layers, self.n_heads, self.context_len, self.seed]

    @classmethod
    def from_ints(cls, ints: Sequence[int]) -> "ModelConfig":
        v, d, nl, nh, ctx, seed = ints
        return cls(vocab_size=v, d_multi=d, n_layers=nl, n_heads=nh, context_len=ctx, seed=seed)


class BaseModel(nn.Module):
    """Token + learned position embeddings, pre-norm blocks, final norm and output head.

    Dense weights are stored input-major (``x @ W``); ``head`` is the
    d_multi x vocab output projection f_multi.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d, v = config.d_multi, config.vocab_size
        self.tok_emb = nn.Parameter(torch.empty(v, d))
        self.pos_emb = nn.Parameter(torch.empty(config.context_len, d))
        self.blocks = nn.ModuleList([Block(d) for _ in range(config.n_layers)])
        self.ln_f_w = nn.Parameter(torch.ones(d))
        self.ln_f_b = nn.Parameter(torch.zeros(d))
        self.head = nn.Parameter(torch.empty(d, v))

    @property
    def vocab_size(self) -> int:
        return self.config.vocab_size

    def hidden(self, ids: torch.Tensor, past=None, start: int = 0):
        """ids: (B, n). Returns final-norm hidden states (B, n, d) and the new per-layer (k, v)."""
        B, n = ids.shape
        if start + n > self.config.context_len:
            raise ContextOverflow("context length exceeded")
        x = self.tok_emb[ids] + self.pos_emb[start : start + n]
        presents = []
        for i, block in enumerate(self.blocks):
            x, kv = block(x, self.config.n_heads, None if past is None else past[i])
            presents.append(kv)
        h = F.layer_norm(x, (x.shape[-1],), self.ln_f_w, self.ln_f_b)
        return h, presents

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        h, _ = self.hidden(ids)
        return h @ self.head

    def digest(self) -> str:
        return tensor_digest(self.numpy_state())

    def numpy_state(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy() for k, v in self.state_dict().items()}


class Block(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.ln1_w = nn.Parameter(torch.ones(d))
        self.ln1_b = nn.Parameter(torch.zeros(d))
        self.w_qkv = nn.Parameter(torch.empty(d, 3 * d))
        self.w_o = nn.Parameter(torch.empty(d, d))
        self.ln2_w = nn.Parameter(torch.ones(d))
        self.ln2_b = nn.Parameter(torch.zeros(d))
        self.w_in = nn.Parameter(torch.empty(d, 4 * d))
        self.w_out = nn.Parameter(torch.empty(4 * d, d))

    def forward(self, x, n_heads, past):
        B, n, d = x.shape
        dh = d // n_heads
        a = F.layer_norm(x, (d,), self.ln1_w, self.ln1_b)
        q, k, v = (a @ self.w_qkv).split(d, dim=-1)
        q = q.view(B, n, n_heads, dh).transpose(1, 2)
        k = k.view(B, n, n_heads, dh).transpose(1, 2)
        v = v.view(B, n, n_heads, dh).transpose(1, 2)
        if past is not None:
            pk, pv = past
            if pk.shape[0] != B:
                pk = pk.expand(B, -1, -1, -1)
                pv = pv.expand(B, -1, -1, -1)
            k = torch.cat([pk, k], dim=2)
            v = torch.cat([pv, v], dim=2)
        t = k.shape[2]
        if past is None:
            att = F.scaled_dot_product_attention(q, k, v, is_causal=True)
        else:
            # new position i sits at absolute index t - n + i
            mask = torch.ones(n, t, dtype=torch.bool).tril(diagonal=t - n)
            att = F.scaled_dot_product_attention(q, k, v, attn_mask=mask)
        att = att.transpose(1, 2).reshape(B, n, d)
        x = x + att @ self.w_o
        m = F.layer_norm(x, (d,), self.ln2_w, self.ln2_b)
        x = x + F.gelu(m @ self.w_in) @ self.w_out
        return x, (k, v)


def init_model(config: ModelConfig) -> BaseModel:
    """All weight matrices and embeddings ~ N(0, 0.02); norms start at unit gain, zero shift."""
    model = BaseModel(config)
    g = torch.Generator().manual_seed(config.seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if p.ndim == 2:
                p.normal_(0.0, INIT_STD, generator=g)
    return model


# ---------------------------------------------------------------------------
# incremental decoding

@dataclass(frozen=True)
class DecodeState:
    ids: tuple[int, ...] = ()
    past: tuple | None = None

    @property
    def t(self) -> int:
        return len(self.ids)


@torch.no_grad()
def forward(model: BaseModel, state: DecodeState, new_ids: Sequence[int]):
    """Run `new_ids` after the cached prefix; returns (logits (n, V), h (n, d), new state)."""
    new_ids = list(new_ids)
    if not new_ids:
        raise ValueError("new_ids must be non-empty")
    if state.t + len(new_ids) > model.config.context_len:
        raise ContextOverflow("context length exceeded")
    x = torch.tensor([new_ids], dtype=torch.long)
    h, presents = model.hidden(x, state.past, start=state.t)
    logits = h @ model.head
    return logits[0], h[0], DecodeState(state.ids + tuple(new_ids), tuple(presents))


@torch.no_grad()
def forward_batch(model: BaseModel, state: DecodeState, batch: torch.Tensor):
    """Teacher-forced pass of a (B, n) batch of continuations sharing `state` as prefix.

    Returns logits (B, n, V). The state is not extended.
    """
    if state.t + batch.shape[1] > model.config.context_len:
        raise ContextOverflow("context length exceeded")
    h, _ = model.hidden(batch, state.past, start=state.t)
    return h @ model.head


@torch.no_grad()
def score_continuation(model: BaseModel, prefix: Sequence[int], continuation: Sequence[int]) -> list[float]:
    """log p(c_j | prefix, c_<j) for every continuation token, from one teacher-forced pass."""
    prefix = list(prefix)
    continuation = list(continuation)
    if not prefix:
        raise ValueError("prefix must be non-empty")
    if not continuation:
        return []
    seq = prefix + continuation
    if len(seq) > model.config.context_len:
        raise ContextOverflow("context length exceeded")
    logits = model(torch.tensor([seq[:-1]], dtype=torch.long))[0]
    logp = torch.log_softmax(logits[len(prefix) - 1 :].double(), dim=-1)
    target = torch.tensor(continuation, dtype=torch.long)
    return logp.gather(1, target[:, None])[:, 0].tolist()


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainHyper:
    lr: float = 3e-3
    steps: int = 1500
    batch: int = 16
    seq_len: int | None = None  # defaults to the model's context length
    warmup_ratio: float = 0.04
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    seed: int = 0
    log_every: int = 50

    @property
    def warmup(self) -> int:
        return int(round(self.warmup_ratio * self.steps))


def lr_at(step: int, hyper) -> float:
    """Linear warmup then cosine decay to 10% of the peak rate."""
    if hyper.warmup and step < hyper.warmup:
        return hyper.lr * (step + 1) / hyper.warmup
    span = max(1, hyper.steps - hyper.warmup)
    prog = min(1.0, (step - hyper.warmup) / span)
    return hyper.lr * (0.1 + 0.9 * 0.5 * (1 + math.cos(math.pi * prog)))


def lm_loss(model: BaseModel, batch: torch.Tensor) -> torch.Tensor:
    logits = model(batch[:, :-1])
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), batch[:, 1:].reshape(-1))


def sample_windows(tokens: torch.Tensor, batch: int, length: int, g: torch.Generator) -> torch.Tensor:
    starts = torch.randint(0, len(tokens) - length + 1, (batch,), generator=g)
    return torch.stack([tokens[s : s + length] for s in starts.tolist()])


def train_base(model: BaseModel, corpus_ids: Sequence[int], hyper: TrainHyper | None = None,
               log_path: str | Path | None = None) -> BaseModel:
    """Next-token cross-entropy with AdamW; updates `model` in place and returns it."""
    hyper = hyper or TrainHyper()
    length = (hyper.seq_len or model.config.context_len) + 1
    length = min(length, model.config.context_len + 1)
    tokens = torch.as_tensor(np.asarray(corpus_ids, dtype=np.int64))
    if len(tokens) < length:
        raise ValueError("corpus shorter than one context window")
    g = torch.Generator().manual_seed(hyper.seed)
    probe = sample_windows(tokens, min(hyper.batch, 8), length, torch.Generator().manual_seed(hyper.seed + 7919))

    decay = [p for p in model.parameters() if p.ndim == 2]
    no_decay = [p for p in model.parameters() if p.ndim < 2]
    opt = torch.optim.AdamW(
        [{"params": decay, "weight_decay": hyper.weight_decay}, {"params": no_decay, "weight_decay": 0.0}],
        lr=hyper.lr, betas=(0.9, 0.95),
    )
    rows = []
    model.train()
    with torch.no_grad():
        probe_start = lm_loss(model, probe).item()
    for step in range(hyper.steps):
        lr = lr_at(step, hyper)
        for group in opt.param_groups:
            group["lr"] = lr
        batch = sample_windows(tokens, hyper.batch, length, g)
        loss = lm_loss(model, batch)
        if not torch.isfinite(loss):
            raise Divergence(f"divergence: non-finite loss at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if hyper.grad_clip:
            torch.nn.utils.clip_grad_norm_(model.parameters(), hyper.grad_clip)
        opt.step()
        if step % hyper.log_every == 0 or step == hyper.steps - 1:
            rows.append((step, loss.item(), lr))
            logger.info("base step %d loss %.4f lr %.2e", step, loss.item(), lr)
    model.eval()
    with torch.no_grad():
        probe_end = lm_loss(model, probe).item()
    logger.info("probe loss %.4f -> %.4f", probe_start, probe_end)
    if log_path is not None:
        write_train_log(log_path, rows)
    return model


def write_train_log(path: str | Path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "lr"])
        for step, loss, lr in rows:
            w.writerow([step, f"{loss:.6f}", f"{lr:.6e}"])


@torch.no_grad()
def perplexity(model: BaseModel, ids: Sequence[int]) -> float:
    """Per-token perplexity of `ids` scored in non-overlapping context windows."""
    ids = list(ids)
    ctx = model.config.context_len
    total = 0.0
    count = 0
    for s in range(0, len(ids) - 1, ctx - 1):
        chunk = ids[s : s + ctx]
        if len(chunk) < 2:
            break
        lp = score_continuation(model, chunk[:1], chunk[1:])
        total += sum(lp)
        count += len(lp)
    return math.exp(-total / max(count, 1))


# ---------------------------------------------------------------------------
# persistence

def save_model(model: BaseModel, path: str | Path) -> None:
    write_container(path, Container(KIND_BASE, model.config.to_ints(), model.numpy_state()))


def load_model(path: str | Path) -> BaseModel:
    c = read_container(path)
    if c.kind != KIND_BASE:
        raise ContainerError(f"{path}: not a base model file")
    model = BaseModel(ModelConfig.from_ints(c.ints))
    state = {k: torch.from_numpy(v.copy()) for k, v in c.tensors.items()}
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise ContainerError(f"{path}: tensors do not match config ({exc})") from exc
    model.eval()
    return model


def config_dict(model: BaseModel) -> dict:
    return asdict(model.config)
