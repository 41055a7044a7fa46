"""Alignment and uniformity diagnostics, plus embedding export.

align: mean squared distance between L2-normalized positive pairs
(sentence embedding vs its relation's label embedding); 0 is perfect,
4 the antipodal worst case.  uniform: half the log of the mean Gaussian
kernel e^{-2 ||x - y||^2} over distinct within-set pairs, summed for the
sentence set and the label set; lower means better spread on the
hypersphere.
"""

from __future__ import annotations

import csv

import numpy as np

from .errors import DataError
from .seeding import derive_rng

_PAIR_SAMPLE_SEED = 0x5EED


def _normalize_rows(x, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if (norms == 0.0).any():
        raise DataError(f"zero-norm {what} embedding cannot be normalized")
    return x / norms


def align_metric(pairs) -> float:
    """Mean ||f(s) - f(l)||^2 over positive (sentence, label) pairs."""
    if len(pairs) == 0:
        raise DataError("align metric needs at least one positive pair")
    total = 0.0
    for s, l in pairs:
        fs = _normalize_rows(np.atleast_1d(s), "sentence")
        fl = _normalize_rows(np.atleast_1d(l), "label")
        diff = fs - fl
        total += float((diff * diff).sum())
    return total / len(pairs)


def _uniform_term(embs, max_exact: int, sample_pairs: int) -> float:
    embs = _normalize_rows(np.asarray(embs, dtype=np.float64), "set")
    n = embs.shape[0]
    if n < 2:
        raise DataError("uniform metric needs at least 2 embeddings per set")
    if n <= max_exact:
        sq = ((embs[:, None, :] - embs[None, :, :]) ** 2).sum(axis=-1)
        off = ~np.eye(n, dtype=bool)
        vals = np.exp(-2.0 * sq[off])
    else:
        rng = derive_rng(_PAIR_SAMPLE_SEED, n, "uniform-pairs")
        i = rng.integers(0, n, size=sample_pairs)
        j = rng.integers(0, n - 1, size=sample_pairs)
        j = np.where(j >= i, j + 1, j)  # distinct pairs, uniform
        sq = ((embs[i] - embs[j]) ** 2).sum(axis=-1)
        vals = np.exp(-2.0 * sq)
    return float(np.log(vals.mean()) / 2.0)


def uniform_metric(
    sentence_embs, label_embs, max_exact: int = 500, sample_pairs: int = 100_000
) -> float:
    """Within-set uniformity, sentence term plus label term.

    Exact over all distinct pairs up to ``max_exact`` embeddings per set,
    otherwise estimated from ``sample_pairs`` seeded random distinct pairs.
    """
    return _uniform_term(sentence_embs, max_exact, sample_pairs) + _uniform_term(
        label_embs, max_exact, sample_pairs
    )


def export_embeddings(sentence_rows, label_rows, path):
    """Write normalized embeddings as CSV for external plotting.

    ``sentence_rows`` and ``label_rows`` are (relation_id, vector) pairs;
    rows come out as kind, relation_id, then the normalized entries.
    """
    rows = [("sentence", rid, vec) for rid, vec in sentence_rows]
    rows += [("label", rid, vec) for rid, vec in label_rows]
    if not rows:
        raise DataError("nothing to export")
    dim = len(np.atleast_1d(rows[0][2]))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["kind", "relation_id"] + [f"e{i}" for i in range(dim)])
        for kind, rid, vec in rows:
            unit = _normalize_rows(np.asarray(vec, dtype=np.float64).reshape(-1), kind)
            writer.writerow([kind, rid] + [repr(float(x)) for x in unit])


def export_relation_embeddings(model, dataset, relation_ids, path):
    """Embed and export every sentence of the listed relations plus their labels."""
    from .encoder import embed_labels, embed_sentences

    unknown = [r for r in relation_ids if r not in dataset.by_relation]
    if unknown:
        raise DataError(f"unknown relation_id(s) for export: {unknown}")
    sent_rows = []
    for rid in relation_ids:
        idx = dataset.by_relation[rid]
        embs = embed_sentences(model, [dataset.marked[i] for i in idx])
        sent_rows.extend((rid, embs[j]) for j in range(len(idx)))
    label_embs = embed_labels(model, [dataset.label_seq_of[r] for r in relation_ids])
    label_rows = [(rid, label_embs[j]) for j, rid in enumerate(relation_ids)]
    export_embeddings(sent_rows, label_rows, path)


def positive_pairs(model, dataset, limit: int | None = None):
    """(sentence, label-of-its-relation) embedding pairs for the align metric,
    plus the two embedding sets for the uniformity terms."""
    from .encoder import embed_labels, embed_sentences

    marked = dataset.marked if limit is None else dataset.marked[:limit]
    instances = dataset.instances if limit is None else dataset.instances[:limit]
    s_embs = embed_sentences(model, marked)
    l_embs = embed_labels(model, [dataset.label_seq_of[r] for r in dataset.relation_ids])
    row_of = {r: j for j, r in enumerate(dataset.relation_ids)}
    pairs = [(s_embs[i], l_embs[row_of[inst.relation_id]]) for i, inst in enumerate(instances)]
    return pairs, s_embs, l_embs
