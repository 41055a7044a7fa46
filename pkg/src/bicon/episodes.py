"""N-way-K-shot episodic sampling and the two downstream classifiers.

Few-shot classification is nearest-prototype over cosine similarity (a
Euclidean option is kept for comparison); zero-shot classification matches
queries directly against label embeddings.  Episodes are sampled with a
per-episode generator derived from (seed, episode index), so evaluation is
order-independent and reproducible.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .corpus import LabelDictionary, Vocab, insert_entity_markers, label_sequence
from .encoder import BiEncoder, embed_labels, embed_sentences
from .errors import DataError
from .seeding import derive_rng


@dataclass
class EvalDataset:
    """Instances grouped by relation, preprocessed for clean evaluation
    (entity markers only; no blank or MLM masking)."""

    instances: list
    marked: list
    relation_ids: list
    by_relation: dict
    label_seq_of: dict


def build_eval_dataset(instances, label_dict: LabelDictionary, vocab: Vocab, max_seq_len: int = 64) -> EvalDataset:
    instances = list(instances)
    if not instances:
        raise DataError("evaluation dataset is empty")
    by_relation: dict = {}
    for i, inst in enumerate(instances):
        if inst.relation_id not in label_dict:
            raise DataError(f"relation '{inst.relation_id}' missing from label dictionary")
        by_relation.setdefault(inst.relation_id, []).append(i)
    relation_ids = sorted(by_relation)
    return EvalDataset(
        instances=instances,
        marked=[insert_entity_markers(inst, max_seq_len) for inst in instances],
        relation_ids=relation_ids,
        by_relation={r: np.array(v, dtype=np.intp) for r, v in by_relation.items()},
        label_seq_of={
            r: label_sequence(label_dict[r], vocab, max_seq_len) for r in relation_ids
        },
    )


@dataclass
class Episode:
    """One task: N candidate relations, K supports per class, T queries."""

    relation_ids: list
    support_idx: np.ndarray  # (N, K) dataset indices; K may be 0
    query_idx: np.ndarray  # (T,)
    query_gold: np.ndarray  # (T,) class positions within relation_ids

    def support_instances(self, dataset: EvalDataset):
        return [[dataset.instances[i] for i in row] for row in self.support_idx]

    def query_instances(self, dataset: EvalDataset):
        return [dataset.instances[i] for i in self.query_idx]


def sample_episode(dataset: EvalDataset, n: int, k: int, t: int, rng) -> Episode:
    """N classes without replacement, K supports per class, T pooled queries."""
    if n < 1 or k < 0 or t < 1:
        raise DataError(f"invalid episode spec n={n} k={k} t={t}")
    if len(dataset.relation_ids) < n:
        raise DataError(
            f"dataset has {len(dataset.relation_ids)} relations, episode needs {n}"
        )
    need = k + math.ceil(t / n)
    classes = [
        dataset.relation_ids[i]
        for i in rng.choice(len(dataset.relation_ids), size=n, replace=False)
    ]
    for rid in classes:
        if len(dataset.by_relation[rid]) < need:
            raise DataError(
                f"relation '{rid}' has {len(dataset.by_relation[rid])} instances, "
                f"episode needs at least {need}"
            )
    support_rows = []
    remaining = []
    class_of = {}
    for c, rid in enumerate(classes):
        idx = dataset.by_relation[rid]
        picked = rng.choice(len(idx), size=k, replace=False) if k else np.array([], dtype=np.intp)
        chosen = idx[np.asarray(picked, dtype=np.intp)]
        support_rows.append(chosen)
        rest = np.setdiff1d(idx, chosen)
        remaining.append(rest)
        for i in rest:
            class_of[int(i)] = c
    pool = np.concatenate(remaining)
    q = pool[np.asarray(rng.choice(len(pool), size=t, replace=False), dtype=np.intp)]
    return Episode(
        relation_ids=classes,
        support_idx=np.stack(support_rows) if k else np.zeros((n, 0), dtype=np.intp),
        query_idx=q,
        query_gold=np.array([class_of[int(i)] for i in q], dtype=np.intp),
    )


# ---------------------------------------------------------------------------
# classifiers (pure NumPy; embeddings already computed)


def _unit_rows(x, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if (norms == 0.0).any():
        raise DataError(f"zero-norm {what} embedding")
    return x / norms


def prototype_classify(
    support_embs, query_embs, use_label_info: bool = False, label_embs=None,
    metric: str = "cosine",
) -> np.ndarray:
    """Nearest-prototype predictions; ties go to the lowest class index.

    ``support_embs`` holds one (K, 2d) array per class.  With
    ``use_label_info`` each prototype is the sum of the L2-normalized mean
    support embedding and the L2-normalized label embedding.
    """
    if any(len(s) == 0 for s in support_embs):
        raise DataError("prototype classification requires K >= 1 support per class")
    prototypes = np.stack([np.mean(np.asarray(s, dtype=np.float64), axis=0) for s in support_embs])
    if use_label_info:
        if label_embs is None or len(label_embs) != len(support_embs):
            raise DataError("use_label_info requires one label embedding per class")
        prototypes = _unit_rows(prototypes, "prototype") + _unit_rows(label_embs, "label")
    queries = np.asarray(query_embs, dtype=np.float64)
    if metric == "cosine":
        scores = _unit_rows(queries, "query") @ _unit_rows(prototypes, "prototype").T
    elif metric == "euclidean":
        diff = queries[:, None, :] - prototypes[None, :, :]
        scores = -np.sqrt((diff * diff).sum(axis=-1))
    else:
        raise DataError(f"unknown similarity metric '{metric}'")
    return np.argmax(scores, axis=1)


def zero_shot_classify(label_embs, query_embs) -> np.ndarray:
    """Match queries to label embeddings by cosine; lowest index wins ties."""
    labels = np.asarray(label_embs, dtype=np.float64)
    if labels.shape[0] < 2:
        raise DataError("zero-shot classification needs at least 2 candidate labels")
    scores = _unit_rows(query_embs, "query") @ _unit_rows(labels, "label").T
    return np.argmax(scores, axis=1)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    n: int
    k: int
    t: int
    episodes: int
    seed: int
    accuracy: float
    ci95_half_width: float
    total_queries: int
    per_episode_correct: list
    use_label_info: bool = False
    metric: str = "cosine"
    query_sampling: str = "uniform over remaining instances of the N classes"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def evaluate_embedded(
    dataset: EvalDataset,
    sentence_embs: np.ndarray,
    label_embs_by_rid: dict,
    n: int,
    k: int,
    t: int | None = None,
    episodes: int = 2000,
    seed: int = 7,
    use_label_info: bool = False,
    metric: str = "cosine",
) -> EvalReport:
    """Episodic evaluation over precomputed embeddings."""
    if episodes < 1:
        raise DataError("episodes must be >= 1")
    t = n if t is None else t
    correct_per_episode = []
    for ep in range(episodes):
        rng = derive_rng(seed, ep, "episode")
        episode = sample_episode(dataset, n, k, t, rng)
        queries = sentence_embs[episode.query_idx]
        if k == 0:
            cand = np.stack([label_embs_by_rid[r] for r in episode.relation_ids])
            pred = zero_shot_classify(cand, queries)
        else:
            support = [sentence_embs[row] for row in episode.support_idx]
            cand = (
                np.stack([label_embs_by_rid[r] for r in episode.relation_ids])
                if use_label_info
                else None
            )
            pred = prototype_classify(
                support, queries, use_label_info=use_label_info, label_embs=cand, metric=metric
            )
        correct_per_episode.append(int((pred == episode.query_gold).sum()))
    total = episodes * t
    acc = sum(correct_per_episode) / total
    ci = 1.96 * math.sqrt(max(acc * (1.0 - acc), 1e-12) / total)
    return EvalReport(
        n=n,
        k=k,
        t=t,
        episodes=episodes,
        seed=seed,
        accuracy=acc,
        ci95_half_width=ci,
        total_queries=total,
        per_episode_correct=correct_per_episode,
        use_label_info=use_label_info,
        metric=metric,
    )


def evaluate(
    model: BiEncoder,
    dataset: EvalDataset,
    n: int,
    k: int,
    t: int | None = None,
    episodes: int = 2000,
    seed: int = 7,
    use_label_info: bool = False,
    metric: str = "cosine",
) -> EvalReport:
    """Embed the dataset once, then run independent episodes."""
    sentence_embs = embed_sentences(model, dataset.marked)
    label_embs = embed_labels(model, [dataset.label_seq_of[r] for r in dataset.relation_ids])
    label_by_rid = {r: label_embs[i] for i, r in enumerate(dataset.relation_ids)}
    return evaluate_embedded(
        dataset, sentence_embs, label_by_rid, n, k, t, episodes, seed, use_label_info, metric
    )
