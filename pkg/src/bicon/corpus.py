"""Corpus ingestion and text-level preprocessing.

Covers the label dictionary, vocabulary construction, entity-marker
insertion, blank masking of entity spans, and MLM masking.  All masking is
driven by generators from :mod:`bicon.seeding`, keyed by (seed, epoch,
instance index), so preprocessing is pure given its inputs and may run in
any order.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .seeding import derive_rng

RESERVED_TOKENS = (
    "[PAD]",
    "[UNK]",
    "[CLS]",
    "[SEP]",
    "[MASK]",
    "[BLANK]",
    "[E1s]",
    "[E1e]",
    "[E2s]",
    "[E2e]",
)

PAD, UNK, CLS, SEP, MASK, BLANK, E1S, E1E, E2S, E2E = range(10)

MARKER_IDS = (E1S, E1E, E2S, E2E)

# tokens never selected by MLM masking; UNK stays maskable
_MLM_PROTECTED = frozenset({PAD, CLS, SEP, MASK, BLANK, E1S, E1E, E2S, E2E})

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def tokenize(text: str) -> list[str]:
    """Lowercased whitespace + punctuation split."""
    return _TOKEN_RE.findall(text.lower())


# ---------------------------------------------------------------------------
# vocabulary


class Vocab:
    """Bijective token <-> id map with fixed reserved ids up front."""

    def __init__(self, tokens=()):
        self.id_to_token = list(RESERVED_TOKENS) + list(tokens)
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise DataError("duplicate token in vocabulary")

    def __len__(self):
        return len(self.id_to_token)

    def __contains__(self, token):
        return token in self.token_to_id

    def encode(self, tokens) -> list[int]:
        get = self.token_to_id.get
        return [get(t, UNK) for t in tokens]

    def decode(self, ids) -> list[str]:
        return [self.id_to_token[i] for i in ids]

    def save(self, path):
        payload = {
            "reserved": list(RESERVED_TOKENS),
            "tokens": self.id_to_token[len(RESERVED_TOKENS):],
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, ensure_ascii=False, indent=0)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
        if payload.get("reserved") != list(RESERVED_TOKENS):
            raise DataError(f"vocab file {path} has unexpected reserved tokens")
        return cls(payload["tokens"])


def build_vocab(sentence_tokens, label_dictionary=None, min_count: int = 1) -> Vocab:
    """Vocabulary over corpus tokens plus the label dictionary's text.

    Tokens with frequency >= min_count get ids; everything else maps to
    UNK at encode time.  Order is (count desc, token asc) so rebuilds are
    reproducible.
    """
    counts: dict[str, int] = {}
    for tokens in sentence_tokens:
        for t in tokens:
            counts[t] = counts.get(t, 0) + 1
    if label_dictionary is not None:
        for entry in label_dictionary.entries():
            for t in entry.serialized_tokens():
                counts[t] = counts.get(t, 0) + 1
    if not counts:
        raise DataError("cannot build a vocabulary from an empty corpus")
    kept = sorted(
        (t for t, c in counts.items() if c >= min_count and t not in RESERVED_TOKENS),
        key=lambda t: (-counts[t], t),
    )
    return Vocab(kept)


# ---------------------------------------------------------------------------
# label dictionary


@dataclass(frozen=True)
class LabelEntry:
    relation_id: str
    label_text: tuple
    description: tuple

    def serialized_tokens(self) -> list[str]:
        """Label tokens, the ':' separator, then the description tokens."""
        return list(self.label_text) + [":"] + list(self.description)

    def serialized_text(self) -> str:
        return " ".join(self.serialized_tokens())


class LabelDictionary:
    def __init__(self, entries):
        self._entries = {}
        for e in entries:
            if not e.relation_id:
                raise DataError("label entry with empty relation_id")
            if e.relation_id in self._entries:
                raise DataError(f"duplicate relation_id '{e.relation_id}' in label dictionary")
            self._entries[e.relation_id] = e

    def __len__(self):
        return len(self._entries)

    def __contains__(self, relation_id):
        return relation_id in self._entries

    def __getitem__(self, relation_id) -> LabelEntry:
        try:
            return self._entries[relation_id]
        except KeyError:
            raise DataError(f"relation_id '{relation_id}' not in label dictionary") from None

    def relation_ids(self) -> list[str]:
        return list(self._entries)

    def entries(self) -> list[LabelEntry]:
        return list(self._entries.values())


def build_label_dictionary(records) -> LabelDictionary:
    """Build the dictionary from raw records with id, label, description."""
    entries = []
    for rec in records:
        rid = rec["relation_id"]
        label_tokens = tuple(tokenize(rec["label"]))
        if not label_tokens:
            raise DataError(f"relation '{rid}' has empty label text")
        entries.append(
            LabelEntry(
                relation_id=rid,
                label_text=label_tokens,
                description=tuple(tokenize(rec.get("description", ""))),
            )
        )
    return LabelDictionary(entries)


# ---------------------------------------------------------------------------
# sentence instances


@dataclass(frozen=True)
class SentenceInstance:
    """Tokenized sentence with [start, end) head/tail spans, as token ids."""

    tokens: tuple
    head_span: tuple
    tail_span: tuple
    relation_id: str

    def __post_init__(self):
        n = len(self.tokens)
        for name, (s, e) in (("head", self.head_span), ("tail", self.tail_span)):
            if not (0 <= s < e <= n):
                raise DataError(
                    f"{name} span [{s}, {e}) out of bounds for {n}-token sentence "
                    f"(relation '{self.relation_id}')"
                )
        hs, he = self.head_span
        ts, te = self.tail_span
        if hs < te and ts < he:
            raise DataError(f"overlapping entity spans (relation '{self.relation_id}')")


@dataclass(frozen=True)
class MarkedSequence:
    """Token ids including CLS/SEP and the four entity markers."""

    tokens: tuple
    pos_e1s: int
    pos_e2s: int


@dataclass
class PreprocessConfig:
    rho_blank: float = 0.7
    mlm_rate: float = 0.15
    max_seq_len: int = 64
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.rho_blank <= 1.0:
            raise DataError(f"rho_blank must be in [0, 1], got {self.rho_blank}")
        if not 0.0 <= self.mlm_rate <= 1.0:
            raise DataError(f"mlm_rate must be in [0, 1], got {self.mlm_rate}")
        if self.max_seq_len < 8:
            raise DataError(f"max_seq_len too small: {self.max_seq_len}")


def insert_entity_markers(inst: SentenceInstance, max_seq_len: int = 64) -> MarkedSequence:
    """Wrap head and tail spans in marker tokens and add CLS/SEP.

    Markers keep the original entity order.  Truncation drops tokens from
    the sentence tail (just before SEP); an instance whose markers cannot
    fit is rejected.
    """
    hs, he = inst.head_span
    ts, te = inst.tail_span
    # at equal positions an end marker must close before the next start opens
    inserts = sorted(
        [(hs, E1S), (he, E1E), (ts, E2S), (te, E2E)],
        key=lambda p: (p[0], 0 if p[1] in (E1E, E2E) else 1),
    )
    body: list[int] = []
    cursor = 0
    for pos, marker in inserts:
        body.extend(inst.tokens[cursor:pos])
        body.append(marker)
        cursor = pos
    body.extend(inst.tokens[cursor:])

    seq = [CLS] + body + [SEP]
    if len(seq) > max_seq_len:
        last_marker = max(i for i, t in enumerate(seq) if t in MARKER_IDS)
        removable = len(seq) - 2 - last_marker  # plain tokens after the last marker
        overflow = len(seq) - max_seq_len
        if overflow > removable:
            raise DataError(
                f"instance (relation '{inst.relation_id}') cannot fit entity markers "
                f"within max_seq_len={max_seq_len}"
            )
        del seq[len(seq) - 1 - overflow : len(seq) - 1]
    return MarkedSequence(tokens=tuple(seq), pos_e1s=seq.index(E1S), pos_e2s=seq.index(E2S))


def _span_extent(tokens, start_marker, end_marker):
    lo = tokens.index(start_marker) + 1
    hi = tokens.index(end_marker)
    return lo, hi


def apply_blank_masking(marked: MarkedSequence, cfg: PreprocessConfig, rng) -> MarkedSequence:
    """Collapse each entity span to a single BLANK token with prob rho_blank.

    Spans are decided independently (head drawn first, then tail); marker
    tokens always survive and positions are re-indexed afterward.
    """
    blank_head = rng.random() < cfg.rho_blank
    blank_tail = rng.random() < cfg.rho_blank
    if not blank_head and not blank_tail:
        return marked

    tokens = list(marked.tokens)
    spans = []
    if blank_head:
        spans.append(_span_extent(tokens, E1S, E1E))
    if blank_tail:
        spans.append(_span_extent(tokens, E2S, E2E))
    for lo, hi in sorted(spans, reverse=True):
        tokens[lo:hi] = [BLANK]
    return MarkedSequence(
        tokens=tuple(tokens), pos_e1s=tokens.index(E1S), pos_e2s=tokens.index(E2S)
    )


def apply_mlm_masking(tokens, cfg: PreprocessConfig, rng):
    """Independently mask each non-special token with prob mlm_rate.

    Returns (masked tokens, {position: original id}).  CLS/SEP, markers,
    BLANK and PAD are never selected; the input must not contain MASK.
    """
    tokens = list(tokens)
    if MASK in tokens:
        raise DataError("MLM masking applied to a sequence that already contains MASK")
    targets: dict[int, int] = {}
    if cfg.mlm_rate > 0.0:
        draws = rng.random(len(tokens))
        for i, tok in enumerate(tokens):
            if tok in _MLM_PROTECTED:
                continue
            if draws[i] < cfg.mlm_rate:
                targets[i] = tok
                tokens[i] = MASK
    return tuple(tokens), targets


def mask_rng(seed: int, epoch: int, instance_index: int, stream: str = "mask") -> np.random.Generator:
    """Per-(epoch, instance) masking stream; parallel and serial runs agree."""
    return derive_rng(seed, epoch, instance_index, stream)


# ---------------------------------------------------------------------------
# file formats


def load_label_file(path) -> LabelDictionary:
    """Label file: one JSON object mapping relation_id -> {label, description}."""
    with open(path, encoding="utf-8") as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as e:
            raise DataError(f"label file {path} is not valid JSON: {e}") from None
    if not isinstance(payload, dict):
        raise DataError(f"label file {path} must be a JSON object")
    records = [
        {"relation_id": rid, "label": spec.get("label", ""), "description": spec.get("description", "")}
        for rid, spec in payload.items()
    ]
    return build_label_dictionary(records)


def load_corpus_file(path, vocab: Vocab | None = None, label_dictionary: LabelDictionary | None = None):
    """Corpus file: JSON lines with text, head/tail token spans, relation_id.

    With a vocab the sentences come back as SentenceInstance (ids); without
    one, as (token list, head, tail, relation_id) raw tuples for vocabulary
    building.  Every relation_id must resolve in the label dictionary when
    one is supplied.
    """
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{lineno}: invalid JSON: {e}") from None
            try:
                tokens = tokenize(rec["text"])
                head = (int(rec["head"]["start"]), int(rec["head"]["end"]))
                tail = (int(rec["tail"]["start"]), int(rec["tail"]["end"]))
                rid = rec["relation_id"]
            except (KeyError, TypeError) as e:
                raise DataError(f"{path}:{lineno}: missing corpus field: {e}") from None
            if label_dictionary is not None and rid not in label_dictionary:
                raise DataError(f"{path}:{lineno}: relation_id '{rid}' not in label dictionary")
            if vocab is None:
                out.append((tokens, head, tail, rid))
            else:
                out.append(
                    SentenceInstance(
                        tokens=tuple(vocab.encode(tokens)),
                        head_span=head,
                        tail_span=tail,
                        relation_id=rid,
                    )
                )
    return out


def label_sequence(entry: LabelEntry, vocab: Vocab, max_seq_len: int = 64) -> tuple:
    """[CLS] label : description [SEP] as ids, truncated from the tail."""
    ids = vocab.encode(entry.serialized_tokens())
    if len(ids) > max_seq_len - 2:
        ids = ids[: max_seq_len - 2]
    return tuple([CLS] + ids + [SEP])
