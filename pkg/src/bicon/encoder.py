"""Toy transformer encoder and the pooling rules of the bi-encoder.

Two isomorphic but fully decoupled instances are used downstream: one for
relation labels and one for sentences.  Label embeddings concatenate the
CLS state with the mean over content tokens; sentence embeddings
concatenate the hidden states at the two entity start markers.  Both are
2*d-dimensional and live in the same similarity space.

Pre-LN blocks with a final layer norm; learned absolute positional
embeddings; PAD columns are removed from attention with an additive mask.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .corpus import CLS, PAD, SEP
from .errors import DataError, ShapeError
from .tensor import Tensor

_MASK_NEG = -1e9


@dataclass
class EncoderConfig:
    vocab_size: int
    d: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_seq_len: int = 64
    ffn_mult: int = 4

    def __post_init__(self):
        if self.d % self.n_heads != 0:
            raise DataError(f"hidden size {self.d} not divisible by {self.n_heads} heads")


@dataclass
class LayerParams:
    ln1_g: Tensor
    ln1_b: Tensor
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class EncoderParams:
    """All trainable leaves of one encoder."""

    config: EncoderConfig
    token_emb: Tensor
    pos_emb: Tensor
    layers: list
    lnf_g: Tensor
    lnf_b: Tensor
    mlm_w: Tensor
    mlm_b: Tensor

    def leaves(self):
        out = [("token_emb", self.token_emb), ("pos_emb", self.pos_emb)]
        for i, lp in enumerate(self.layers):
            for fname in LayerParams.__dataclass_fields__:
                out.append((f"layers.{i}.{fname}", getattr(lp, fname)))
        out.extend(
            [
                ("lnf_g", self.lnf_g),
                ("lnf_b", self.lnf_b),
                ("mlm_w", self.mlm_w),
                ("mlm_b", self.mlm_b),
            ]
        )
        return out


def init_encoder_params(config: EncoderConfig, rng) -> EncoderParams:
    d, V = config.d, config.vocab_size
    h = d * config.ffn_mult

    def w(*shape):
        return Tensor(rng.normal(0.0, 0.02, size=shape), requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    def ones(*shape):
        return Tensor(np.ones(shape), requires_grad=True)

    layers = [
        LayerParams(
            ln1_g=ones(d), ln1_b=zeros(d),
            wq=w(d, d), bq=zeros(d), wk=w(d, d), bk=zeros(d),
            wv=w(d, d), bv=zeros(d), wo=w(d, d), bo=zeros(d),
            ln2_g=ones(d), ln2_b=zeros(d),
            w1=w(d, h), b1=zeros(h), w2=w(h, d), b2=zeros(d),
        )
        for _ in range(config.n_layers)
    ]
    return EncoderParams(
        config=config,
        token_emb=w(V, d),
        pos_emb=w(config.max_seq_len, d),
        layers=layers,
        lnf_g=ones(d),
        lnf_b=zeros(d),
        mlm_w=w(d, V),
        mlm_b=zeros(V),
    )


@dataclass
class HiddenStates:
    """Per-token states for one sequence, with marker positions when present."""

    h: Tensor  # (L, d)
    length: int
    e1_pos: int | None = None
    e2_pos: int | None = None


@dataclass
class BatchHidden:
    """Padded batch of hidden states plus bookkeeping arrays."""

    h: Tensor  # (B, Lmax, d)
    lengths: np.ndarray
    ids: np.ndarray  # (B, Lmax) padded token ids


def _linear(x, w, b):
    return T.add(T.matmul(x, w), b)


def encode_batch(params: EncoderParams, sequences) -> BatchHidden:
    """Run the encoder over a list of token-id sequences (PAD-padded)."""
    cfg = params.config
    B = len(sequences)
    if B == 0:
        raise ShapeError("encode_batch of an empty sequence list")
    lengths = np.array([len(s) for s in sequences], dtype=np.intp)
    L = int(lengths.max())
    if L > cfg.max_seq_len:
        raise DataError(f"sequence of length {L} exceeds max_seq_len={cfg.max_seq_len}")
    ids = np.full((B, L), PAD, dtype=np.intp)
    for i, seq in enumerate(sequences):
        arr = np.asarray(seq, dtype=np.intp)
        if arr.size and (arr.min() < 0 or arr.max() >= cfg.vocab_size):
            raise DataError(
                f"out-of-vocab token id in sequence {i} (vocab size {cfg.vocab_size}); "
                "apply UNK upstream"
            )
        ids[i, : len(seq)] = arr

    pad_mask = ids == PAD
    attn_bias = Tensor(np.where(pad_mask, _MASK_NEG, 0.0)[:, None, None, :])

    x = T.add(T.take(params.token_emb, ids), T.take(params.pos_emb, np.arange(L)))
    H = cfg.n_heads
    dh = cfg.d // H
    scale = 1.0 / np.sqrt(dh)
    for lp in params.layers:
        xn = T.layer_norm(x, lp.ln1_g, lp.ln1_b)
        q = T.transpose(T.reshape(_linear(xn, lp.wq, lp.bq), (B, L, H, dh)), (0, 2, 1, 3))
        k = T.transpose(T.reshape(_linear(xn, lp.wk, lp.bk), (B, L, H, dh)), (0, 2, 1, 3))
        v = T.transpose(T.reshape(_linear(xn, lp.wv, lp.bv), (B, L, H, dh)), (0, 2, 1, 3))
        scores = T.add(T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), scale), attn_bias)
        ctx = T.matmul(T.softmax(scores), v)
        ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (B, L, cfg.d))
        x = T.add(x, _linear(ctx, lp.wo, lp.bo))
        xn = T.layer_norm(x, lp.ln2_g, lp.ln2_b)
        x = T.add(x, _linear(T.gelu(_linear(xn, lp.w1, lp.b1)), lp.w2, lp.b2))
    x = T.layer_norm(x, params.lnf_g, params.lnf_b)
    return BatchHidden(h=x, lengths=lengths, ids=ids)


def encode(params: EncoderParams, tokens, e1_pos=None, e2_pos=None) -> HiddenStates:
    """Encode a single sequence; one code path with the batched version."""
    batch = encode_batch(params, [tokens])
    h = T.reshape(batch.h, (len(tokens), params.config.d))
    return HiddenStates(h=h, length=len(tokens), e1_pos=e1_pos, e2_pos=e2_pos)


# ---------------------------------------------------------------------------
# pooling


def pool_label(hs: HiddenStates) -> Tensor:
    """concat(h_cls, mean over the label's own tokens) -> (2d,) vector.

    Content excludes CLS, SEP, and padding; CLS already contributes the
    other half of the embedding.
    """
    L = hs.length
    if L < 3:
        raise DataError("pool_label needs at least one content token between CLS and SEP")
    cls_row = T.take(hs.h, np.array([0]))
    content = T.take(hs.h, np.arange(1, L - 1))
    pooled = T.mean(content, axis=0, keepdims=True)
    return T.reshape(T.concat([cls_row, pooled], axis=1), (-1,))


def pool_sentence(hs: HiddenStates) -> Tensor:
    """concat(h at E1s, h at E2s) -> (2d,) vector."""
    if hs.e1_pos is None or hs.e2_pos is None:
        raise DataError("pool_sentence requires entity marker positions")
    rows = T.take(hs.h, np.array([hs.e1_pos, hs.e2_pos]))
    return T.reshape(rows, (-1,))


def pool_label_batch(batch: BatchHidden) -> Tensor:
    """Batched CLS (+) meanpool over content tokens -> (B, 2d)."""
    if batch.lengths.min() < 3:
        raise DataError("pool_label needs at least one content token between CLS and SEP")
    B, L, _ = batch.h.shape
    positions = np.arange(L)[None, :]
    content = (positions >= 1) & (positions <= (batch.lengths - 2)[:, None])
    counts = content.sum(axis=1, keepdims=True).astype(np.float64)
    mask = Tensor(content[:, :, None].astype(np.float64))
    pooled = T.div(T.sum_(T.mul(batch.h, mask), axis=1), Tensor(counts))
    cls_rows = T.take_pairs(batch.h, np.arange(B), np.zeros(B, dtype=np.intp))
    return T.concat([cls_rows, pooled], axis=1)


def pool_sentence_batch(batch: BatchHidden, e1_positions, e2_positions) -> Tensor:
    """Batched marker-state concatenation -> (B, 2d)."""
    B = batch.h.shape[0]
    rows = np.arange(B)
    h1 = T.take_pairs(batch.h, rows, np.asarray(e1_positions, dtype=np.intp))
    h2 = T.take_pairs(batch.h, rows, np.asarray(e2_positions, dtype=np.intp))
    return T.concat([h1, h2], axis=1)


# ---------------------------------------------------------------------------
# MLM head


def mlm_logits(params: EncoderParams, hs: HiddenStates, positions) -> Tensor:
    """Vocabulary logits at the given masked positions, (|positions|, V)."""
    positions = np.asarray(sorted(positions), dtype=np.intp)
    if positions.size and (positions.min() < 0 or positions.max() >= hs.length):
        raise DataError(f"masked position out of range for length {hs.length}")
    if positions.size == 0:
        return Tensor(np.zeros((0, params.config.vocab_size)))
    rows = T.take(hs.h, positions)
    return _linear(rows, params.mlm_w, params.mlm_b)


def mlm_logits_batch(params: EncoderParams, batch: BatchHidden, batch_rows, positions) -> Tensor:
    """Batched variant: logits for (sequence row, position) pairs."""
    batch_rows = np.asarray(batch_rows, dtype=np.intp)
    positions = np.asarray(positions, dtype=np.intp)
    if batch_rows.size == 0:
        return Tensor(np.zeros((0, params.config.vocab_size)))
    rows = T.take_pairs(batch.h, batch_rows, positions)
    return _linear(rows, params.mlm_w, params.mlm_b)


# ---------------------------------------------------------------------------
# the bi-encoder


@dataclass
class BiEncoder:
    """Decoupled label and sentence encoders sharing one temperature."""

    label_params: EncoderParams
    sentence_params: EncoderParams
    temperature: "object"  # losses.Temperature; kept loose to avoid a cycle

    def leaves(self):
        out = [(f"label_encoder.{n}", t) for n, t in self.label_params.leaves()]
        out += [(f"sentence_encoder.{n}", t) for n, t in self.sentence_params.leaves()]
        out.append(("temperature", self.temperature.tensor))
        return out


def embed_sentences(model: BiEncoder, marked_seqs, chunk: int = 64) -> np.ndarray:
    """Forward-only sentence embeddings, (N, 2d), chunked for memory."""
    out = []
    for lo in range(0, len(marked_seqs), chunk):
        part = marked_seqs[lo : lo + chunk]
        with T.no_grad():
            bh = encode_batch(model.sentence_params, [m.tokens for m in part])
            embs = pool_sentence_batch(
                bh, [m.pos_e1s for m in part], [m.pos_e2s for m in part]
            )
        out.append(embs.data)
    return np.concatenate(out, axis=0)


def embed_labels(model: BiEncoder, label_seqs, chunk: int = 64) -> np.ndarray:
    """Forward-only label embeddings, (M, 2d)."""
    out = []
    for lo in range(0, len(label_seqs), chunk):
        part = label_seqs[lo : lo + chunk]
        with T.no_grad():
            embs = pool_label_batch(encode_batch(model.label_params, part))
        out.append(embs.data)
    return np.concatenate(out, axis=0)
