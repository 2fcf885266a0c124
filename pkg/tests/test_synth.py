import pytest

from mumo.synth import SyntheticLangSpec, is_target_text, split_sentences, synth_corpus

SPEC = SyntheticLangSpec(inventory_size=80, alphabet_size=50, english_inventory=300, seed=11)


def test_deterministic():
    assert synth_corpus(SPEC, 30_000) == synth_corpus(SPEC, 30_000)
    assert synth_corpus(SPEC, 30_000) != synth_corpus(SyntheticLangSpec(inventory_size=80, alphabet_size=50,
                                                                        english_inventory=300, seed=12), 30_000)


def test_words_fragment():
    _, _, words = synth_corpus(SPEC, 10_000)
    assert len(words) == 80 == len(set(words))
    assert all(len(w.encode("utf-8")) >= 4 for w in words)
    assert all(SPEC.block_lo <= ord(c) <= SPEC.block_hi for w in words for c in w)


def test_heldout_disjoint_at_sentence_level():
    train, held, _ = synth_corpus(SPEC, 60_000)
    assert held and train
    assert not set(split_sentences(train)) & set(split_sentences(held))


def test_sizes_and_documents():
    train, held, _ = synth_corpus(SPEC, 50_000, heldout_fraction=0.2)
    assert len(held.encode()) >= 10_000 and len(train.encode()) >= 40_000
    docs = [d for d in train.split("\x00") if d]
    assert train.endswith("\x00")
    # documents are monolingual
    for d in docs:
        lines = d.strip("\n").split("\n")
        kinds = {is_target_text(s, SPEC) for s in lines}
        assert len(kinds) == 1


@pytest.mark.parametrize("kw", [dict(min_word_len=3, max_word_len=2), dict(block_lo=0x41, block_hi=0x5A),
                                dict(filler_ratio=1.0), dict(english_ratio=-0.1), dict(inventory_size=1)])
def test_invalid_spec(kw):
    with pytest.raises(ValueError):
        SyntheticLangSpec(**kw)
