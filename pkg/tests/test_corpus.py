import json

import numpy as np
import pytest

from bicon import corpus as C
from bicon.corpus import (
    BLANK,
    CLS,
    E1E,
    E1S,
    E2E,
    E2S,
    MASK,
    MARKER_IDS,
    SEP,
    UNK,
    MarkedSequence,
    PreprocessConfig,
    SentenceInstance,
    Vocab,
    apply_blank_masking,
    apply_mlm_masking,
    build_label_dictionary,
    build_vocab,
    insert_entity_markers,
    load_corpus_file,
    load_label_file,
    tokenize,
)
from bicon.errors import DataError
from bicon.seeding import derive_rng


# --- label dictionary -------------------------------------------------------


def test_label_entry_serialized_form():
    d = build_label_dictionary(
        [
            {
                "relation_id": "P2384",
                "label": "statement describes",
                "description": "formalization of the statement contains a bound variable in this class",
            }
        ]
    )
    expected = tokenize(
        "statement describes: formalization of the statement contains a bound variable in this class"
    )
    assert d["P2384"].serialized_tokens() == expected


def test_empty_label_list_gives_empty_dictionary():
    d = build_label_dictionary([])
    assert len(d) == 0


def test_three_records_cardinality_and_lookup():
    recs = [
        {"relation_id": f"R{i}", "label": f"name {i}", "description": f"desc {i}"}
        for i in range(3)
    ]
    d = build_label_dictionary(recs)
    assert len(d) == 3
    for i in range(3):
        assert d[f"R{i}"].label_text == tuple(tokenize(f"name {i}"))


def test_duplicate_relation_id_rejected_naming_id():
    recs = [
        {"relation_id": "P17", "label": "a", "description": ""},
        {"relation_id": "P17", "label": "b", "description": ""},
    ]
    with pytest.raises(DataError, match="P17"):
        build_label_dictionary(recs)


def test_empty_label_text_rejected():
    with pytest.raises(DataError, match="R1"):
        build_label_dictionary([{"relation_id": "R1", "label": "", "description": "x"}])


# --- entity markers ---------------------------------------------------------


def _vocab_for(words):
    return Vocab(sorted(set(words)))


def _instance(words, head, tail, vocab, rid="R0"):
    return SentenceInstance(
        tokens=tuple(vocab.encode(words)), head_span=head, tail_span=tail, relation_id=rid
    )


def test_insert_markers_worked_example():
    words = tokenize("Entity1 was founded by Entity2")
    v = _vocab_for(words)
    inst = _instance(words, (0, 1), (4, 5), v)
    marked = insert_entity_markers(inst, max_seq_len=64)
    decoded = v.decode(marked.tokens)
    assert decoded == [
        "[CLS]", "[E1s]", "entity1", "[E1e]", "was", "founded", "by",
        "[E2s]", "entity2", "[E2e]", "[SEP]",
    ]
    assert marked.pos_e1s == 1
    assert marked.pos_e2s == 7


def test_insert_markers_adjacent_spans_nest_without_overlap():
    words = ["t0", "t1"]
    v = _vocab_for(words)
    marked = insert_entity_markers(_instance(words, (0, 1), (1, 2), v))
    assert v.decode(marked.tokens) == [
        "[CLS]", "[E1s]", "t0", "[E1e]", "[E2s]", "t1", "[E2e]", "[SEP]"
    ]


def test_insert_markers_tail_before_head_keeps_original_order():
    words = ["a", "b", "c", "d"]
    v = _vocab_for(words)
    marked = insert_entity_markers(_instance(words, (3, 4), (0, 1), v))
    assert v.decode(marked.tokens) == [
        "[CLS]", "[E2s]", "a", "[E2e]", "b", "c", "[E1s]", "d", "[E1e]", "[SEP]"
    ]
    assert marked.pos_e1s == 6
    assert marked.pos_e2s == 1


def test_markers_appear_exactly_once_on_random_inputs():
    rng = np.random.default_rng(3)
    v = _vocab_for([f"w{i}" for i in range(50)])
    for _ in range(200):
        n = int(rng.integers(2, 20))
        words = [f"w{int(rng.integers(0, 50))}" for _ in range(n)]
        hs = int(rng.integers(0, n))
        he = int(rng.integers(hs + 1, n + 1))
        remaining = [
            (s, e)
            for s in range(n)
            for e in range(s + 1, n + 1)
            if e <= hs or s >= he
        ]
        if not remaining:
            continue
        ts, te = remaining[int(rng.integers(0, len(remaining)))]
        marked = insert_entity_markers(_instance(words, (hs, he), (ts, te), v), max_seq_len=64)
        toks = list(marked.tokens)
        for marker in MARKER_IDS:
            assert toks.count(marker) == 1
        # proper nesting: each span closes before the other opens
        i1, j1 = toks.index(E1S), toks.index(E1E)
        i2, j2 = toks.index(E2S), toks.index(E2E)
        assert i1 < j1 and i2 < j2
        assert j1 < i2 or j2 < i1


def test_truncation_drops_tail_tokens_not_markers():
    words = [f"w{i}" for i in range(20)]
    v = _vocab_for(words)
    inst = _instance(words, (0, 1), (2, 3), v)
    marked = insert_entity_markers(inst, max_seq_len=12)
    assert len(marked.tokens) == 12
    assert marked.tokens[-1] == SEP
    for marker in MARKER_IDS:
        assert marker in marked.tokens


def test_unfittable_markers_rejected_naming_instance():
    words = [f"w{i}" for i in range(30)]
    v = _vocab_for(words)
    inst = _instance(words, (0, 1), (28, 29), v, rid="R_long")
    with pytest.raises(DataError, match="R_long"):
        insert_entity_markers(inst, max_seq_len=16)


def test_span_validation():
    v = _vocab_for(["a", "b"])
    with pytest.raises(DataError):
        SentenceInstance(tokens=(10, 11), head_span=(0, 3), tail_span=(1, 2), relation_id="R")
    with pytest.raises(DataError, match="overlap"):
        SentenceInstance(tokens=(10, 11, 12), head_span=(0, 2), tail_span=(1, 3), relation_id="R")


# --- blank masking ----------------------------------------------------------


def _marked(words, head, tail, vocab):
    return insert_entity_markers(_instance(words, head, tail, vocab))


def test_blank_rho_zero_is_identity():
    v = _vocab_for(["a", "b", "c", "d"])
    marked = _marked(["a", "b", "c", "d"], (0, 2), (3, 4), v)
    cfg = PreprocessConfig(rho_blank=0.0)
    out = apply_blank_masking(marked, cfg, derive_rng(1))
    assert out.tokens == marked.tokens


def test_blank_rho_one_collapses_two_token_head():
    v = _vocab_for(["a", "b", "c", "d"])
    marked = _marked(["a", "b", "c", "d"], (0, 2), (3, 4), v)
    cfg = PreprocessConfig(rho_blank=1.0)
    out = apply_blank_masking(marked, cfg, derive_rng(2))
    assert len(out.tokens) == len(marked.tokens) - 1  # head 2 -> 1, tail already 1
    decoded = v.decode(out.tokens)
    assert decoded == [
        "[CLS]", "[E1s]", "[BLANK]", "[E1e]", "c", "[E2s]", "[BLANK]", "[E2e]", "[SEP]"
    ]
    assert out.pos_e2s == 5


def test_blank_masking_preserves_markers_and_reindexes():
    v = _vocab_for(["a", "b", "c", "d", "e"])
    # tail first in text; blanking the tail shifts E1s
    marked = _marked(["a", "b", "c", "d", "e"], (3, 5), (0, 2), v)
    cfg = PreprocessConfig(rho_blank=1.0)
    out = apply_blank_masking(marked, cfg, derive_rng(3))
    for marker in MARKER_IDS:
        assert list(out.tokens).count(marker) == 1
    assert out.tokens[out.pos_e1s] == E1S
    assert out.tokens[out.pos_e2s] == E2S


def test_blank_rate_monte_carlo():
    # 10,000 spans at rho=0.7 -> empirical rate within [0.68, 0.72]
    v = _vocab_for(["a", "b", "c"])
    marked = _marked(["a", "b", "c"], (0, 1), (2, 3), v)
    cfg = PreprocessConfig(rho_blank=0.7)
    blanked = 0
    for i in range(5000):
        out = apply_blank_masking(marked, cfg, C.mask_rng(99, 0, i))
        blanked += list(out.tokens).count(BLANK)
    rate = blanked / 10000
    assert 0.68 <= rate <= 0.72


def test_blank_determinism():
    v = _vocab_for(["a", "b", "c"])
    marked = _marked(["a", "b", "c"], (0, 1), (2, 3), v)
    cfg = PreprocessConfig(rho_blank=0.5)
    a = apply_blank_masking(marked, cfg, C.mask_rng(5, 2, 17))
    b = apply_blank_masking(marked, cfg, C.mask_rng(5, 2, 17))
    assert a == b


# --- MLM masking ------------------------------------------------------------


def test_mlm_rate_zero_masks_nothing():
    tokens = (CLS, 12, 13, 14, SEP)
    out, targets = apply_mlm_masking(tokens, PreprocessConfig(mlm_rate=0.0), derive_rng(1))
    assert out == tokens
    assert targets == {}


def test_mlm_rate_one_masks_all_non_special():
    v = _vocab_for(["a", "b", "c", "d"])
    marked = _marked(["a", "b", "c", "d"], (0, 2), (3, 4), v)
    out, targets = apply_mlm_masking(marked.tokens, PreprocessConfig(mlm_rate=1.0), derive_rng(2))
    specials = {CLS, SEP, *MARKER_IDS, BLANK}
    expected_positions = {i for i, t in enumerate(marked.tokens) if t not in specials}
    assert set(targets) == expected_positions
    for i in expected_positions:
        assert out[i] == MASK
        assert targets[i] == marked.tokens[i]
    for i, t in enumerate(marked.tokens):
        if i not in expected_positions:
            assert out[i] == t


def test_mlm_never_masks_specials_or_blank():
    tokens = (CLS, E1S, BLANK, E1E, 44, E2S, 45, E2E, SEP)
    out, targets = apply_mlm_masking(tokens, PreprocessConfig(mlm_rate=1.0), derive_rng(3))
    assert set(targets) == {4, 6}
    assert out[2] == BLANK


def test_mlm_rejects_pre_masked_input():
    with pytest.raises(DataError):
        apply_mlm_masking((CLS, MASK, SEP), PreprocessConfig(), derive_rng(0))


def test_mlm_rate_monte_carlo():
    # 100,000 maskable tokens at rate 0.15 -> within [0.14, 0.16]
    tokens = tuple([CLS] + list(range(20, 120)) + [SEP])
    cfg = PreprocessConfig(mlm_rate=0.15)
    masked = 0
    for i in range(1000):
        _, targets = apply_mlm_masking(tokens, cfg, C.mask_rng(123, 0, i))
        masked += len(targets)
    rate = masked / 100000
    assert 0.14 <= rate <= 0.16


# --- vocabulary -------------------------------------------------------------


def test_vocab_min_count_threshold():
    v = build_vocab([["a", "b", "a"]], min_count=2)
    assert "a" in v
    assert "b" not in v
    assert v.encode(["a", "b"])[1] == UNK


def test_vocab_min_count_one_keeps_everything():
    v = build_vocab([["a", "b", "a"], ["c"]], min_count=1)
    for t in ("a", "b", "c"):
        assert t in v


def test_vocab_roundtrip(tmp_path):
    v = build_vocab([["x", "y", "x", "z"]], min_count=1)
    path = tmp_path / "vocab.json"
    v.save(path)
    v2 = Vocab.load(path)
    assert v2.token_to_id == v.token_to_id
    assert v2.id_to_token == v.id_to_token


def test_vocab_reserved_ids_stable(tmp_path):
    v = build_vocab([["hello"]], min_count=1)
    path = tmp_path / "vocab.json"
    v.save(path)
    v2 = Vocab.load(path)
    assert v2.id_to_token[:10] == list(C.RESERVED_TOKENS)
    assert v2.token_to_id["[CLS]"] == CLS


def test_empty_corpus_rejected():
    with pytest.raises(DataError):
        build_vocab([], min_count=1)


# --- file formats -----------------------------------------------------------


def test_corpus_file_roundtrip(tmp_path):
    path = tmp_path / "corpus.jsonl"
    rows = [
        {
            "text": "Alpha works for Beta",
            "head": {"start": 0, "end": 1},
            "tail": {"start": 3, "end": 4},
            "relation_id": "R0",
        }
    ]
    path.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
    raw = load_corpus_file(path)
    assert raw[0][0] == ["alpha", "works", "for", "beta"]

    labels = tmp_path / "labels.json"
    labels.write_text(json.dumps({"R0": {"label": "employer", "description": "works for"}}))
    ld = load_label_file(labels)
    v = build_vocab([r[0] for r in raw], ld, min_count=1)
    insts = load_corpus_file(path, vocab=v, label_dictionary=ld)
    assert insts[0].relation_id == "R0"
    assert insts[0].head_span == (0, 1)


def test_unknown_relation_fails_loudly(tmp_path):
    path = tmp_path / "corpus.jsonl"
    path.write_text(
        json.dumps(
            {
                "text": "a b",
                "head": {"start": 0, "end": 1},
                "tail": {"start": 1, "end": 2},
                "relation_id": "R_missing",
            }
        )
        + "\n"
    )
    labels = tmp_path / "labels.json"
    labels.write_text(json.dumps({"R0": {"label": "x", "description": "y"}}))
    ld = load_label_file(labels)
    v = Vocab(["a", "b"])
    with pytest.raises(DataError, match="R_missing"):
        load_corpus_file(path, vocab=v, label_dictionary=ld)


def test_malformed_corpus_line_names_location(tmp_path):
    path = tmp_path / "corpus.jsonl"
    path.write_text("{not json}\n")
    with pytest.raises(DataError, match="corpus.jsonl:1"):
        load_corpus_file(path)


def test_preprocessing_determinism_end_to_end():
    v = _vocab_for(["a", "b", "c", "d"])
    inst = _instance(["a", "b", "c", "d"], (0, 2), (3, 4), v)
    cfg = PreprocessConfig(rho_blank=0.7, mlm_rate=0.15)

    def run(seed):
        marked = insert_entity_markers(inst)
        blanked = apply_blank_masking(marked, cfg, C.mask_rng(seed, 0, 0))
        return apply_mlm_masking(blanked.tokens, cfg, C.mask_rng(seed, 0, 0, "mlm"))

    assert run(11) == run(11)
    seqs = {run(s)[0] for s in range(40)}
    assert len(seqs) > 1  # different seeds do change the stream
