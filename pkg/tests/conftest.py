import logging
from dataclasses import dataclass

import pytest
import torch

from mumo.base_lm import BaseModel, ModelConfig, TrainHyper, init_model, train_base
from mumo.mumo_head import FinetuneHyper, MonoHead, build_training_units, finetune_head, init_mono_head
from mumo.synth import SyntheticLangSpec, is_target_text, synth_corpus
from mumo.tokenizer import MonoVocabulary, Vocabulary, build_mono_vocab, learn_bpe

torch.set_num_threads(1)
logging.getLogger("mumo").setLevel(logging.WARNING)

TINY_SPEC = SyntheticLangSpec(inventory_size=60, alphabet_size=40, english_inventory=200,
                              sentences_per_doc=4, english_ratio=0.5, seed=3)

# criterion number -> (passed, description); filled by the acceptance tests
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@dataclass
class World:
    spec: SyntheticLangSpec
    train: str
    heldout: str
    vocab: Vocabulary
    mono: MonoVocabulary
    model: BaseModel
    head: MonoHead

    def target_docs(self, which="train"):
        text = self.train if which == "train" else self.heldout
        return [d for d in text.split("\x00") if d and is_target_text(d, self.spec)]


@pytest.fixture(scope="session")
def world() -> World:
    """A small trained base model plus fine-tuned head on a tiny synthetic language."""
    train, held, words = synth_corpus(TINY_SPEC, 60_000, heldout_fraction=0.25)
    vocab = learn_bpe(train, 150)
    mono = build_mono_vocab(words, [(TINY_SPEC.block_lo, TINY_SPEC.block_hi)], vocab)
    model = init_model(ModelConfig(vocab_size=len(vocab), d_multi=32, n_layers=2, n_heads=4,
                                   context_len=64, seed=0))
    train_base(model, vocab.encode(train), TrainHyper(lr=3e-3, steps=150, batch=8))
    w = World(TINY_SPEC, train, held, vocab, mono, model, None)
    head = init_mono_head("multi_init", model, mono, seed=0)
    units = build_training_units(w.target_docs(), mono, vocab, 64)
    finetune_head(model, head, units, FinetuneHyper(steps=150, warmup=15))
    w.head = head
    return w


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, desc = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {desc}")
