"""Synthetic relation-extraction corpus with known ground truth.

Each relation owns a disjoint set of signal tokens; every instance of that
relation contains them alongside a random head entity, tail entity, and
filler noise.  Label descriptions reuse the signal tokens, so sentence and
label views genuinely share semantics.  Difficulty is controlled by the
signal/noise ratio; relation_signal=0 is the no-signal negative control.

The relation split mirrors disjoint base/novel classes: the first
``train_relations`` relations feed pre-training, the rest are held out for
episodic evaluation.  A slice of each training relation's instances is
additionally held out as fresh sentences for zero-shot evaluation.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

from .errors import DataError
from .seeding import derive_rng


@dataclass
class SynthSpec:
    n_relations: int = 20
    instances_per_relation: int = 50
    vocab_size: int = 2000
    relation_signal: int = 3
    noise_tokens: int = 5
    rng_seed: int = 13
    train_relations: int | None = None  # default: 70% of relations
    zeroshot_instances: int | None = None  # default: 20% of instances

    def __post_init__(self):
        if self.vocab_size <= self.n_relations * self.relation_signal:
            raise DataError(
                "vocab_size must exceed n_relations * relation_signal "
                f"({self.vocab_size} <= {self.n_relations * self.relation_signal})"
            )
        if self.train_relations is None:
            self.train_relations = max(1, round(0.7 * self.n_relations))
        if self.zeroshot_instances is None:
            self.zeroshot_instances = max(1, self.instances_per_relation // 5)
        if not 0 < self.train_relations <= self.n_relations:
            raise DataError(f"train_relations {self.train_relations} out of range")
        if not 0 <= self.zeroshot_instances < self.instances_per_relation:
            raise DataError("zeroshot_instances must leave training instances")

    @classmethod
    def from_json(cls, path):
        with open(path, encoding="utf-8") as fh:
            try:
                payload = json.load(fh)
            except json.JSONDecodeError as e:
                raise DataError(f"synthetic spec {path} is not valid JSON: {e}") from None
        known = set(cls.__dataclass_fields__)
        unknown = set(payload) - known
        if unknown:
            raise DataError(f"unknown synthetic spec keys: {sorted(unknown)}")
        return cls(**payload)


@dataclass
class SynthPaths:
    corpus_all: str
    corpus_train: str
    corpus_zeroshot: str
    corpus_eval: str
    labels: str


def _token(i: int) -> str:
    return f"w{i:04d}"


def _relation_id(r: int) -> str:
    return f"R{r:03d}"


def _make_instance(spec: SynthSpec, relation: int, rng):
    signal = [_token(t) for t in range(relation * spec.relation_signal,
                                       (relation + 1) * spec.relation_signal)]
    rng.shuffle(signal)
    pool_lo = spec.n_relations * spec.relation_signal
    pool = spec.vocab_size - pool_lo
    head = _token(pool_lo + int(rng.integers(pool)))
    tail = _token(pool_lo + int(rng.integers(pool)))
    noise = [_token(pool_lo + int(rng.integers(pool))) for _ in range(spec.noise_tokens)]

    words = [head, tail] + signal + noise
    order = rng.permutation(len(words))
    shuffled = [words[i] for i in order]
    head_pos = int(list(order).index(0))
    tail_pos = int(list(order).index(1))
    return {
        "text": " ".join(shuffled),
        "head": {"start": head_pos, "end": head_pos + 1},
        "tail": {"start": tail_pos, "end": tail_pos + 1},
        "relation_id": _relation_id(relation),
    }


def generate(spec: SynthSpec, out_dir) -> SynthPaths:
    """Write the corpus, its splits, and the label file; byte-deterministic."""
    os.makedirs(out_dir, exist_ok=True)
    labels = {}
    rows_by_relation = []
    for r in range(spec.n_relations):
        rng = derive_rng(spec.rng_seed, r, "relation")
        signal = [_token(t) for t in range(r * spec.relation_signal,
                                           (r + 1) * spec.relation_signal)]
        desc = "context tokens " + " ".join(signal) if signal else "no distinguishing context"
        labels[_relation_id(r)] = {"label": f"relation {r:02d}", "description": desc}
        rows_by_relation.append(
            [_make_instance(spec, r, rng) for _ in range(spec.instances_per_relation)]
        )

    train_rel = range(spec.train_relations)
    eval_rel = range(spec.train_relations, spec.n_relations)
    n_train_inst = spec.instances_per_relation - spec.zeroshot_instances

    def rows_to_file(path, rows):
        with open(path, "w", encoding="utf-8") as fh:
            for row in rows:
                fh.write(json.dumps(row, sort_keys=True))
                fh.write("\n")

    paths = SynthPaths(
        corpus_all=os.path.join(out_dir, "corpus.jsonl"),
        corpus_train=os.path.join(out_dir, "corpus_train.jsonl"),
        corpus_zeroshot=os.path.join(out_dir, "corpus_zeroshot.jsonl"),
        corpus_eval=os.path.join(out_dir, "corpus_eval.jsonl"),
        labels=os.path.join(out_dir, "labels.json"),
    )
    rows_to_file(paths.corpus_all, [row for rows in rows_by_relation for row in rows])
    rows_to_file(paths.corpus_train, [row for r in train_rel for row in rows_by_relation[r][:n_train_inst]])
    rows_to_file(paths.corpus_zeroshot, [row for r in train_rel for row in rows_by_relation[r][n_train_inst:]])
    rows_to_file(paths.corpus_eval, [row for r in eval_rel for row in rows_by_relation[r]])
    with open(paths.labels, "w", encoding="utf-8") as fh:
        json.dump(labels, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return paths
