"""Byte-level prompt tokenizer and the text encoder tower.

Sentences are tokenized as raw UTF-8 bytes framed by START/END specials and
padded to a fixed length, so any attribute word — including ones never seen
in training — maps to a valid sequence with no external vocabulary. The
encoder is a two-block causal transformer over token + position embeddings;
a prompt's embedding is read at its END position of the final block.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import MASK_BLOCKED, Tensor
from .vision import EncoderConfig, init_block, transformer_block

BYTE_VOCAB = 256
START_ID = 256
END_ID = 257
PAD_ID = 258
VOCAB_SIZE = 259

TEXT_LAYERS = 2
TEXT_HEADS = 2


@dataclass(frozen=True)
class TokenSequence:
    """Fixed-length id vector; positions >= valid_length hold the pad id."""

    ids: tuple[int, ...]
    valid_length: int

    def __post_init__(self):
        assert all(0 <= i < VOCAB_SIZE for i in self.ids)
        assert 0 < self.valid_length <= len(self.ids)
        assert all(i == PAD_ID for i in self.ids[self.valid_length :])


def tokenize(sentence: str, length: int) -> TokenSequence:
    """Encode a sentence as [START, bytes..., END] padded/truncated to ``length``.

    Truncation keeps the first length-2 bytes and always terminates with END,
    so the read-out position exists for every input.
    """
    if not sentence:
        raise ValueError("cannot tokenize an empty sentence")
    if length < 3:
        raise ValueError("sequence length must fit START, one byte and END")
    body = list(sentence.encode("utf-8"))[: length - 2]
    ids = [START_ID] + body + [END_ID]
    valid = len(ids)
    ids.extend([PAD_ID] * (length - valid))
    return TokenSequence(tuple(ids), valid)


def _sequence_masks(sequences: list[TokenSequence], length: int) -> np.ndarray:
    """(m, 1, L, L) additive masks: causal and blind to pad keys."""
    causal = np.where(np.tril(np.ones((length, length))) > 0, 0.0, MASK_BLOCKED)
    masks = np.empty((len(sequences), 1, length, length))
    for i, seq in enumerate(sequences):
        m = causal.copy()
        m[:, seq.valid_length :] = MASK_BLOCKED
        masks[i, 0] = m
    return masks


class TextEncoder:
    """Token + position embeddings feeding a small causal transformer."""

    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        self.config = config
        d = config.dim
        self.token_table = T.parameter(rng.normal(0.0, 0.02, size=(VOCAB_SIZE, d)))
        self.pos = T.parameter(rng.normal(0.0, 0.02, size=(config.text_len, d)))
        self.blocks = [
            init_block(rng, d, config.mlp_ratio) for _ in range(TEXT_LAYERS)
        ]

    def params(self) -> dict[str, Tensor]:
        named = {"text.tokens": self.token_table, "text.pos": self.pos}
        for i, b in enumerate(self.blocks):
            named.update(b.named(f"text.block{i}"))
        return named

    def encode_sequences(self, sequences: list[TokenSequence]) -> Tensor:
        """Encode m token sequences into a (D, m) embedding matrix.

        Column j is the final-block activation at sequence j's END position.
        """
        length = self.config.text_len
        for seq in sequences:
            if len(seq.ids) != length:
                raise T.ShapeError(
                    f"sequence length {len(seq.ids)} != configured {length}"
                )
        ids = np.array([seq.ids for seq in sequences], dtype=np.int64)
        masks = _sequence_masks(sequences, length)
        x = T.add(T.take_rows(self.token_table, ids), self.pos)
        for block in self.blocks:
            x = transformer_block(x, masks, block, TEXT_HEADS)
        ends = np.array([seq.valid_length - 1 for seq in sequences])
        return T.transpose(T.take_positions(x, ends))

    def encode_prompts(self, sentences: list[str]) -> Tensor:
        """Tokenize and encode sentences; returns (D, m)."""
        seqs = [tokenize(s, self.config.text_len) for s in sentences]
        return self.encode_sequences(seqs)
