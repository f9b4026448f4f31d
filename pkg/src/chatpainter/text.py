"""Caption and dialogue encoders.

A trainable surrogate sentence embedder (embedding table + masked mean pool +
affine + tanh) stands in for pretrained sentence encoders. Dialogues are
summarized either flat (one long token string, order-insensitive by mean
pooling) or recurrent (per-turn vectors through a bidirectional LSTM,
order-sensitive).
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import torch
from torch import nn

from .scenes import Dialogue

PAD, UNK, SEP = "<pad>", "<unk>", "<sep>"
SPECIALS = (PAD, UNK, SEP)

_TOKEN_RE = re.compile(r"[a-z0-9]+")

DIALOGUE_VARIANTS = ("flat", "recurrent", "none")


def tokenize(text: str) -> list[str]:
    """Lowercase alphanumeric runs; whitespace and punctuation split."""
    return _TOKEN_RE.findall(text.lower())


class Vocabulary:
    """Dense token -> index map with PAD=0, UNK=1, SEP=2."""

    def __init__(self, tokens):
        self.tokens = list(tokens)
        if self.tokens[: len(SPECIALS)] != list(SPECIALS):
            raise ValueError(f"vocabulary must start with the special tokens {SPECIALS}")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.index = {t: i for i, t in enumerate(self.tokens)}

    @classmethod
    def from_texts(cls, texts) -> "Vocabulary":
        seen = set()
        for text in texts:
            seen.update(tokenize(text))
        return cls(list(SPECIALS) + sorted(seen))

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, tokens) -> list[int]:
        unk = self.index[UNK]
        return [self.index.get(t, unk) for t in tokens]

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens))

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls(Path(path).read_text().splitlines())


def caption_tokens(caption: str) -> list[str]:
    return tokenize(caption)


def turn_tokens(q: str, a: str, trailing_sep: bool) -> list[str]:
    toks = tokenize(q) + [SEP] + tokenize(a)
    return toks + [SEP] if trailing_sep else toks


def flat_dialogue_tokens(dialogue: Dialogue) -> list[str]:
    """All turns joined as "q SEP a SEP" blocks, encoded as one sentence."""
    out: list[str] = []
    for q, a in dialogue.turns:
        out.extend(turn_tokens(q, a, trailing_sep=True))
    return out


def recurrent_turn_token_lists(dialogue: Dialogue) -> list[list[str]]:
    """Per-turn "q SEP a" token lists for the recurrent variant."""
    return [turn_tokens(q, a, trailing_sep=False) for q, a in dialogue.turns]


def pad_token_batch(vocab: Vocabulary, token_lists, min_len: int = 1):
    """Encode and right-pad to a (B, L) id tensor plus a float mask."""
    length = max(min_len, max((len(t) for t in token_lists), default=0))
    ids = torch.zeros(len(token_lists), length, dtype=torch.long)
    mask = torch.zeros(len(token_lists), length)
    for i, toks in enumerate(token_lists):
        enc = vocab.encode(toks)
        ids[i, : len(enc)] = torch.tensor(enc, dtype=torch.long)
        mask[i, : len(enc)] = 1.0
    return ids, mask


class SentenceEncoder(nn.Module):
    """Masked mean of token embeddings, then one affine map + tanh.

    PAD positions carry zero mask weight; an all-PAD row yields the affine
    image of the zero vector.
    """

    def __init__(self, vocab_size: int, embed_dim: int, out_dim: int):
        super().__init__()
        self.embedding = nn.Embedding(vocab_size, embed_dim, padding_idx=0)
        self.proj = nn.Linear(embed_dim, out_dim)

    def forward(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        if ids.shape != mask.shape:
            raise ValueError(f"ids {tuple(ids.shape)} and mask {tuple(mask.shape)} differ")
        emb = self.embedding(ids)
        weights = mask.to(emb.dtype).unsqueeze(-1)
        mean = (emb * weights).sum(dim=-2) / weights.sum(dim=-2).clamp_min(1.0)
        return torch.tanh(self.proj(mean))


class FlatDialogueEncoder(SentenceEncoder):
    """One sentence encoder over the flattened dialogue string."""


class RecurrentDialogueEncoder(nn.Module):
    """Per-turn sentence vectors aggregated by a bidirectional LSTM.

    Output is the forward final hidden state concatenated with the backward
    final hidden state, dim 2*h_rnn.
    """

    def __init__(self, vocab_size: int, embed_dim: int, d_turn: int, h_rnn: int):
        super().__init__()
        self.turn_encoder = SentenceEncoder(vocab_size, embed_dim, d_turn)
        self.rnn = nn.LSTM(d_turn, h_rnn, batch_first=True, bidirectional=True)

    @property
    def out_dim(self) -> int:
        return 2 * self.rnn.hidden_size

    def forward(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        if ids.ndim != 3:
            raise ValueError(f"expected (batch, turns, tokens) ids, got {tuple(ids.shape)}")
        b, t, length = ids.shape
        turn_vecs = self.turn_encoder(ids.reshape(b * t, length), mask.reshape(b * t, length))
        turn_vecs = turn_vecs.reshape(b, t, -1)
        _, (h_n, _) = self.rnn(turn_vecs)
        return torch.cat([h_n[0], h_n[1]], dim=-1)


@dataclass
class EmbeddingBundle:
    """Caption embedding, dialogue embedding, and their concatenation."""

    phi_t: torch.Tensor
    zeta_d: torch.Tensor
    e: torch.Tensor

    def rolled(self, shift: int = -1) -> "EmbeddingBundle":
        """Condition derangement by rotation: row i takes row (i - shift) mod B."""
        return EmbeddingBundle(
            phi_t=torch.roll(self.phi_t, shifts=shift, dims=0),
            zeta_d=torch.roll(self.zeta_d, shifts=shift, dims=0),
            e=torch.roll(self.e, shifts=shift, dims=0),
        )


@dataclass
class TokenBatch:
    """Pre-encoded token id/mask tensors for a batch of samples."""

    caption_ids: torch.Tensor
    caption_mask: torch.Tensor
    flat_ids: torch.Tensor | None = None
    flat_mask: torch.Tensor | None = None
    turn_ids: torch.Tensor | None = None
    turn_mask: torch.Tensor | None = None

    def select(self, rows) -> "TokenBatch":
        idx = torch.as_tensor(rows, dtype=torch.long)
        pick = lambda t: None if t is None else t.index_select(0, idx)
        return TokenBatch(
            caption_ids=pick(self.caption_ids),
            caption_mask=pick(self.caption_mask),
            flat_ids=pick(self.flat_ids),
            flat_mask=pick(self.flat_mask),
            turn_ids=pick(self.turn_ids),
            turn_mask=pick(self.turn_mask),
        )


def prepare_token_batch(vocab: Vocabulary, samples, variant: str) -> TokenBatch:
    """Tokenize and tensorize captions plus the dialogue form the variant needs."""
    if variant not in DIALOGUE_VARIANTS:
        raise ValueError(f"dialogue_encoder must be one of {DIALOGUE_VARIANTS}, got {variant!r}")
    cap_ids, cap_mask = pad_token_batch(vocab, [caption_tokens(s.caption) for s in samples])
    batch = TokenBatch(caption_ids=cap_ids, caption_mask=cap_mask)
    if variant == "flat":
        batch.flat_ids, batch.flat_mask = pad_token_batch(
            vocab, [flat_dialogue_tokens(s.dialogue) for s in samples]
        )
    elif variant == "recurrent":
        per_turn = [recurrent_turn_token_lists(s.dialogue) for s in samples]
        longest = max(len(toks) for turns in per_turn for toks in turns)
        ids = torch.zeros(len(per_turn), len(per_turn[0]), longest, dtype=torch.long)
        mask = torch.zeros(len(per_turn), len(per_turn[0]), longest)
        for i, turns in enumerate(per_turn):
            t_ids, t_mask = pad_token_batch(vocab, turns, min_len=longest)
            ids[i], mask[i] = t_ids, t_mask
        batch.turn_ids, batch.turn_mask = ids, mask
    return batch


def encode_bundle(caption_encoder: SentenceEncoder, dialogue_encoder, tokens: TokenBatch) -> EmbeddingBundle:
    """phi_t from the caption encoder, zeta_d per variant (width 0 when absent)."""
    phi_t = caption_encoder(tokens.caption_ids, tokens.caption_mask)
    if dialogue_encoder is None:
        zeta_d = phi_t.new_zeros(phi_t.shape[0], 0)
    elif isinstance(dialogue_encoder, RecurrentDialogueEncoder):
        zeta_d = dialogue_encoder(tokens.turn_ids, tokens.turn_mask)
    else:
        zeta_d = dialogue_encoder(tokens.flat_ids, tokens.flat_mask)
    if not torch.isfinite(phi_t).all() or not torch.isfinite(zeta_d).all():
        raise ValueError("non-finite encoder output")
    return EmbeddingBundle(phi_t=phi_t, zeta_d=zeta_d, e=torch.cat([phi_t, zeta_d], dim=-1))
