"""Acceptance criteria, run against one full default-config pipeline.

Set MUMO_ACCEPT_DIR to reuse (or keep) a run directory; unchanged stages are
skipped, and the runtime check reads the per-stage timings from the manifest.
"""
import contextlib
import json
import math
import os
from pathlib import Path

import numpy as np
import pytest
import torch

from conftest import ACCEPTANCE
from gradcheck import base_gradcheck, head_gradcheck
from mumo import pipeline as pl
from mumo.base_lm import load_model, score_continuation
from mumo.config import Config
from mumo.decoder import Candidate, DecodeConfig, JointVocab, generate, verify
from mumo.mumo_head import (FinetuneHyper, collect_hidden, finetune_head, heldout_joint_ce, init_mono_head,
                            joint_logits, load_head)
from mumo.tokenizer import EOT_ID, MonoVocabulary, Vocabulary, segment_forward_max_match

RUNTIME_BUDGET_S = 15 * 60


@contextlib.contextmanager
def criterion(n: int, desc: str):
    try:
        yield
    except BaseException:
        ACCEPTANCE[n] = (False, desc)
        print(f"criterion {n}: FAIL  {desc}")
        raise
    ACCEPTANCE[n] = (True, desc)
    print(f"criterion {n}: PASS  {desc}")


class Run:
    def __init__(self, cfg: Config):
        self.cfg = cfg
        self.out = Path(cfg.run.out_dir)
        f = lambda k: self.out / pl.FILES[k]  # noqa: E731
        self.vocab = Vocabulary.load(f("vocab"))
        self.mono = MonoVocabulary.load(f("mono"))
        self.model = load_model(f("base"))
        self.head = load_head(f("head"), self.model)
        self.report = json.loads(f("report_json").read_text())
        self.manifest = json.loads((self.out / pl.MANIFEST).read_text())
        self.train_docs = pl.target_docs(f("train").read_text(encoding="utf-8"), cfg)
        self.held_docs = pl.target_docs(f("heldout").read_text(encoding="utf-8"), cfg)
        self._data = {}

    def data(self, which):
        if which not in self._data:
            docs = self.train_docs if which == "train" else self.held_docs
            units = pl.build_training_units(docs, self.mono, self.vocab, self.model.config.context_len)
            self._data[which] = collect_hidden(self.model, units)
        return self._data[which]

    def row(self, mode):
        return next(r for r in self.report["rows"] if r["mode"] == mode)


@pytest.fixture(scope="session")
def run(tmp_path_factory):
    cfg = Config()
    cfg.run.out_dir = os.environ.get("MUMO_ACCEPT_DIR") or str(tmp_path_factory.mktemp("accept"))
    pl.run_pipeline(cfg)
    return Run(cfg)


def test_c1_step_reduction(run):
    with criterion(1, "mumo steps/byte <= 0.6x vanilla over >=50 prompts x 128 tokens; pipeline <= 15 min"):
        cfg = run.cfg
        assert cfg.bench.n_prompts >= 50 and cfg.decode.max_new_tokens == 128 and cfg.bench.deterministic
        assert cfg.finetune.steps == 1500
        mean_exp = np.mean([len(w.expansion) for w in run.mono.words])
        print(f"  mono words {len(run.mono)}, mean expansion {mean_exp:.2f}")
        assert 3.0 <= mean_exp <= 4.0
        mumo, van = run.row("mumo"), run.row("vanilla")
        ratio = mumo["steps_per_byte"] / van["steps_per_byte"]
        total = sum(e["seconds"] for e in run.manifest.values())
        print(f"  steps/byte mumo {mumo['steps_per_byte']:.4f} vanilla {van['steps_per_byte']:.4f} "
              f"ratio {ratio:.3f}; pipeline {total:.0f} s")
        assert ratio <= 0.6
        assert total <= RUNTIME_BUDGET_S


def test_c2_verification_ablation(run):
    with criterion(2, "no-verify uses fewer forward calls; mumo ppl <= no-verify ppl on >=70% of prompts"):
        mumo, nv = run.row("mumo"), run.row("mumo_no_verify")
        assert nv["forward_invocations"] < mumo["forward_invocations"]
        a = run.report["prompt_perplexity"]["mumo"]
        b = run.report["prompt_perplexity"]["mumo_no_verify"]
        wins = sum(x is not None and (y is None or x <= y) for x, y in zip(a, b))
        print(f"  forward calls {mumo['forward_invocations']} vs {nv['forward_invocations']}; "
              f"ppl wins {wins}/{len(a)}")
        assert wins >= 0.7 * len(a)


def random_prompts(run, n, seed):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        if i % 2:
            doc = run.held_docs[int(rng.integers(len(run.held_docs)))]
            s = int(rng.integers(0, max(1, len(doc) - 30)))
            text = doc[s : s + int(rng.integers(1, 30))]
            out.append(text if text.strip("\x00") else "가")
        else:
            ids = rng.integers(1, len(run.vocab), size=int(rng.integers(1, 12))).tolist()
            out.append(run.vocab.decode(ids))
    return out


def test_c3_degenerate_equivalence(run):
    with criterion(3, "empty mono vocab, k=1, deterministic == vanilla greedy on 100 random prompts"):
        empty = MonoVocabulary((), run.mono.unicode_ranges)
        for p in random_prompts(run, 100, seed=3):
            a, ta = generate(run.model, run.vocab, p, DecodeConfig(mode="mumo", k=1, deterministic=True,
                                                                   max_new_tokens=32), mono=empty)
            b, tb = generate(run.model, run.vocab, p, DecodeConfig(mode="vanilla", deterministic=True,
                                                                   max_new_tokens=32))
            assert a == b
            assert [r.committed for r in ta.records] == [r.committed for r in tb.records]


def test_c4_verify_oracle(run):
    with criterion(4, "batched verify == sequential scoring within 1e-5 on 1000 pairs; single tokens 1e-6"):
        rng = np.random.default_rng(4)
        jv = JointVocab(run.vocab, run.mono)
        ids = run.vocab.encode("".join(run.held_docs[:40]))
        pairs = worst = worst_single = 0.0
        pairs = 0
        while pairs < 1000:
            s = int(rng.integers(0, len(ids) - 120))
            prefix = ids[s : s + int(rng.integers(1, 100))]
            jids = rng.choice(len(jv), size=10, replace=False)
            jids[:5] = rng.integers(len(run.vocab), len(jv), size=5)  # bias towards multi-token words
            cands = [Candidate(int(j), jv.surface(int(j)), jv.expansion(int(j)), 0.0) for j in jids]
            for c in verify(run.model, prefix, cands):
                seq = score_continuation(run.model, prefix, list(c.expansion))
                err = abs(c.sigma - float(np.mean(seq)))
                worst = max(worst, err)
                if len(c.expansion) == 1:
                    worst_single = max(worst_single, err)
                pairs += 1
        print(f"  pairs {pairs}, max |err| {worst:.2e}, single-token max |err| {worst_single:.2e}")
        assert worst <= 1e-5 and worst_single <= 1e-6


def test_c5_frozen_base(run):
    with criterion(5, "base digest bitwise identical before and after finetune_head"):
        before = run.model.digest()
        head = load_head(run.out / pl.FILES["head_init"], run.model)
        finetune_head(run.model, head, run.data("train"), FinetuneHyper(steps=300))
        assert run.model.digest() == before
        from mumo.tensorio import read_container, tensor_digest
        assert tensor_digest(read_container(run.out / pl.FILES["base"]).tensors) == before


def test_c6_init_ablation(run):
    with criterion(6, "multi_init held-out joint CE <= random_init in >=4 of 5 seeds"):
        train, held = run.data("train"), run.data("heldout")
        mean = train[0].mean(dim=0)
        wins = 0
        for seed in range(5):
            ce = {}
            for strategy in ("multi_init", "random_init"):
                head = init_mono_head(strategy, run.model, run.mono, seed=seed, hidden_mean=mean)
                finetune_head(run.model, head, train, pl.finetune_hyper(run.cfg, seed=seed))
                ce[strategy] = heldout_joint_ce(run.model, head, held)
            wins += ce["multi_init"] <= ce["random_init"]
            print(f"  seed {seed}: multi {ce['multi_init']:.4f} random {ce['random_init']:.4f}")
        assert wins >= 4


def test_c7_joint_softmax(run):
    with criterion(7, "joint softmax sums to 1 +- 1e-6; base slice of joint logits bitwise f_multi (10k h)"):
        H, _ = run.data("heldout")
        g = torch.Generator().manual_seed(7)
        real = H[torch.randint(len(H), (5000,), generator=g)]
        fake = torch.randn(5000, H.shape[1], generator=g) * H.std() + H.mean(0)
        V = len(run.vocab)
        for h in (real, fake):
            jl = joint_logits(run.model, run.head, h)
            assert torch.equal(jl[:, :V], h @ run.model.head)
            s = torch.softmax(jl.double(), dim=-1).sum(-1)
            assert (s - 1).abs().max().item() <= 1e-6
        for i, p in enumerate(random_prompts(run, 10, seed=7)):
            _, tr = generate(run.model, run.vocab, p, DecodeConfig(max_new_tokens=64, seed=i),
                             head=run.head, mono=run.mono)
            assert all(abs(r.prob_mass - 1) <= 1e-6 for r in tr.records)


def test_c8_gradient_checks():
    with criterion(8, "finite-difference gradients (20 params, rel err <= 1e-2) for base and head losses"):
        b, h = base_gradcheck(), head_gradcheck()
        print(f"  max rel err base {max(b):.2e}, head {max(h):.2e}")
        assert len(b) == len(h) == 20
        assert max(b) <= 1e-2 and max(h) <= 1e-2


def random_utf8(rng, n):
    pools = [(0x20, 0x7E), (0xAC00, 0xD7A3), (0x80, 0x7FF), (0x800, 0xD7FF), (0xE000, 0xFFFD),
             (0x10000, 0x10FFFF), (0x0, 0x1F)]
    out = []
    for _ in range(n):
        chars = []
        for _ in range(int(rng.integers(0, 40))):
            lo, hi = pools[int(rng.integers(len(pools)))]
            chars.append(chr(int(rng.integers(lo, hi + 1))))
        out.append("".join(chars))
    return out


def oracle_fmm(ids, expansions):
    """Try every length at each position against the set of word expansions; keep the longest."""
    out, i = [], 0
    while i < len(ids):
        for n in range(min(16, len(ids) - i), 1, -1):
            w = expansions.get(tuple(ids[i : i + n]))
            if w is not None:
                out.append(("m", w))
                i += n
                break
        else:
            out.append(("t", ids[i]))
            i += 1
    return out


def test_c9_tokenizer_properties(run):
    with criterion(9, "round-trip on 10k UTF-8 strings; FMM == exhaustive oracle on 1k inputs; expansions sound"):
        rng = np.random.default_rng(9)
        v = run.vocab
        for s in random_utf8(rng, 10_000):
            assert v.decode(v.encode(s)) == s.encode("utf-8")
        expansions = {w.expansion: j for j, w in enumerate(run.mono.words)}
        surfaces = [w.surface for w in run.mono.words]
        filler = [b" ", b".", b"\n", b"ab", "가".encode(), "힣".encode(), b"x"]
        trie = run.mono.trie()
        for _ in range(1000):
            text = b""
            while True:
                piece = surfaces[int(rng.integers(len(surfaces)))] if rng.random() < 0.6 else \
                    filler[int(rng.integers(len(filler)))]
                if len(text) + len(piece) > 256:
                    break
                text += piece
            seg = segment_forward_max_match(text, run.mono, v, trie)
            got = [("m", u.mono) if u.is_mono else ("t", u.token) for u in seg.units]
            assert got == oracle_fmm(v.encode(text), expansions)
            assert b"".join(seg.surfaces(run.mono, v)) == text
        for w in run.mono.words:
            assert len(w.expansion) >= 2 and v.decode(w.expansion) == w.surface
            assert EOT_ID not in w.expansion


def test_c10_shortlist(run):
    with criterion(10, "shortlist with full vocab trace-identical to vanilla; restricted set never violated"):
        full = frozenset(range(len(run.vocab)))
        rng = np.random.default_rng(10)
        half = frozenset({EOT_ID} | set(rng.choice(len(run.vocab), size=len(run.vocab) // 2, replace=False).tolist()))
        for i, p in enumerate(random_prompts(run, 20, seed=10)):
            for det in (True, False):
                a = generate(run.model, run.vocab, p, DecodeConfig(mode="vanilla", deterministic=det, seed=i,
                                                                   max_new_tokens=48))
                b = generate(run.model, run.vocab, p, DecodeConfig(mode="shortlist", deterministic=det, seed=i,
                                                                   max_new_tokens=48, shortlist_allowed=full))
                assert a[0] == b[0]
                assert [r.to_json() for r in a[1].records] == [r.to_json() for r in b[1].records]
            _, tr = generate(run.model, run.vocab, p, DecodeConfig(mode="shortlist", seed=i, temperature=1.0,
                                                                   max_new_tokens=48, shortlist_allowed=half))
            assert all(t in half for r in tr.records for t in r.committed)
