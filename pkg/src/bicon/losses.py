"""Symmetric contrastive objective, MLM losses, and the weighted total.

A mini-batch pairs n sentence embeddings with the m <= n distinct relation
labels present in it.  Sentence-anchored loss treats each sentence as an
anchor over the m label candidates; label-anchored loss treats each label
as an anchor and sums over all of its positive sentences (no inner 1/|A|
normalization by default).  Both divide cosine similarities by one shared
learnable temperature, clamped from below after each optimizer step so
logits are never scaled by more than 100x.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import DataError, ShapeError
from .optim import clamp_
from .tensor import Tensor

TAU_INIT = 0.07
TAU_MIN = 0.01


@dataclass
class Temperature:
    """Shared trainable temperature, clamped to >= TAU_MIN post-step."""

    tensor: Tensor = field(default_factory=lambda: Tensor(np.asarray(TAU_INIT), requires_grad=True))
    minimum: float = TAU_MIN

    @property
    def value(self) -> float:
        return float(self.tensor.data)

    def clamp(self):
        clamp_(self.tensor, self.minimum)


@dataclass
class BatchPairing:
    """Embeddings and pairing bookkeeping for one contrastive batch.

    ``pair_index[i]`` is the label row of sentence i; ``positives[j]`` the
    sentence indices carrying label row j.  Label rows are deduplicated.
    """

    sentence_embs: Tensor  # (n, 2d)
    label_embs: Tensor  # (m, 2d)
    pair_index: np.ndarray
    positives: list

    def __post_init__(self):
        self.pair_index = np.asarray(self.pair_index, dtype=np.intp)
        n, m = self.n, self.m
        if self.pair_index.shape != (n,):
            raise ShapeError(f"pair_index has shape {self.pair_index.shape}, expected ({n},)")
        if n and (self.pair_index.min() < 0 or self.pair_index.max() >= m):
            raise DataError("pair_index refers to a missing label row")
        if len(self.positives) != m:
            raise DataError(f"{len(self.positives)} positive sets for {m} label rows")
        total = 0
        for j, pos in enumerate(self.positives):
            pos = np.asarray(pos, dtype=np.intp)
            if pos.size == 0:
                raise DataError(f"label row {j} has no positive sentences")
            if not (self.pair_index[pos] == j).all():
                raise DataError(f"positive set of label row {j} disagrees with pair_index")
            total += pos.size
        if total != n:
            raise DataError(f"positive sets cover {total} sentences, batch has {n}")

    @property
    def n(self) -> int:
        return self.sentence_embs.shape[0]

    @property
    def m(self) -> int:
        return self.label_embs.shape[0]


def make_batch_pairing(sentence_embs: Tensor, relation_ids, label_embed_fn) -> BatchPairing:
    """Deduplicate the batch's relations (first-appearance order) and embed them.

    ``label_embed_fn`` maps the ordered list of distinct relation_ids to a
    (m, 2d) embedding tensor.
    """
    order = []
    row_of = {}
    for rid in relation_ids:
        if rid not in row_of:
            row_of[rid] = len(order)
            order.append(rid)
    pair_index = np.array([row_of[r] for r in relation_ids], dtype=np.intp)
    positives = [np.flatnonzero(pair_index == j) for j in range(len(order))]
    return BatchPairing(
        sentence_embs=sentence_embs,
        label_embs=label_embed_fn(order),
        pair_index=pair_index,
        positives=positives,
    )


def _row_normalize(x: Tensor, what: str) -> Tensor:
    norms_sq = T.sum_(T.mul(x, x), axis=1, keepdims=True)
    bad = np.flatnonzero(norms_sq.data[:, 0] <= 0.0)
    if bad.size:
        raise DataError(f"zero-norm {what} row {int(bad[0])} in cosine similarity")
    return T.div(x, T.sqrt(norms_sq))


def cosine_similarity_matrix(sentence_embs, label_embs) -> Tensor:
    """(n, m) matrix of cosine similarities between the full 2d vectors."""
    s = _row_normalize(T.as_tensor(sentence_embs), "sentence")
    l = _row_normalize(T.as_tensor(label_embs), "label")
    return T.matmul(s, T.transpose(l, (1, 0)))


def scl_sentence_loss(pairing: BatchPairing, tau: Temperature, cos=None) -> Tensor:
    """Sentence-anchored InfoNCE over the batch's label candidates."""
    if cos is None:
        cos = cosine_similarity_matrix(pairing.sentence_embs, pairing.label_embs)
    logits = T.div(cos, tau.tensor)
    logp = T.log_softmax(logits)
    picked = T.take_pairs(logp, np.arange(pairing.n), pairing.pair_index)
    return T.neg(T.mean(picked))


def scl_label_loss(
    pairing: BatchPairing, tau: Temperature, cos=None, normalize_positives: bool = False
) -> Tensor:
    """Label-anchored InfoNCE; every positive sentence enters the numerator.

    ``normalize_positives`` divides each anchor's sum by |A| (ablation
    variant); the default follows the plain summed form.
    """
    if cos is None:
        cos = cosine_similarity_matrix(pairing.sentence_embs, pairing.label_embs)
    logits_t = T.div(T.transpose(cos, (1, 0)), tau.tensor)  # (m, n), softmax over sentences
    logp = T.log_softmax(logits_t)
    rows = np.concatenate([np.full(len(p), j, dtype=np.intp) for j, p in enumerate(pairing.positives)])
    cols = np.concatenate([np.asarray(p, dtype=np.intp) for p in pairing.positives])
    picked = T.take_pairs(logp, rows, cols)
    if normalize_positives:
        weights = np.concatenate(
            [np.full(len(p), 1.0 / len(p)) for p in pairing.positives]
        )
        total = T.sum_(T.mul(picked, Tensor(weights)))
    else:
        total = T.sum_(picked)
    return T.neg(T.div(total, float(pairing.m)))


def scl_loss(
    pairing: BatchPairing, tau: Temperature, cos=None, normalize_positives: bool = False
) -> Tensor:
    """Sum of the sentence-anchored and label-anchored losses."""
    if cos is None:
        cos = cosine_similarity_matrix(pairing.sentence_embs, pairing.label_embs)
    return T.add(
        scl_sentence_loss(pairing, tau, cos=cos),
        scl_label_loss(pairing, tau, cos=cos, normalize_positives=normalize_positives),
    )


def mlm_loss_pair(sentence_logits, sentence_targets, label_logits, label_targets) -> Tensor:
    """Mean cross-entropy per masked position, summed over the two encoders."""
    return T.add(
        T.masked_cross_entropy(sentence_logits, sentence_targets),
        T.masked_cross_entropy(label_logits, label_targets),
    )


def total_loss(scl, mlm) -> Tensor:
    """Half the contrastive loss plus the MLM loss."""
    return T.add(T.mul(T.as_tensor(scl), 0.5), T.as_tensor(mlm))
