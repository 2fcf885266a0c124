"""Multi-token decoding for over-fragmented target languages on a frozen byte-level LM."""
from .base_lm import BaseModel, DecodeState, ModelConfig, forward, init_model, load_model, save_model
from .decoder import DecodeConfig, generate
from .mumo_head import MonoHead, init_mono_head, joint_logits, load_head, save_head
from .tokenizer import MonoVocabulary, Vocabulary, build_mono_vocab, learn_bpe

__version__ = "0.1.0"
