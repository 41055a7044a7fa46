import numpy as np
import pytest

from bicon import tensor as T
from bicon.encoder import (
    BatchHidden,
    EncoderConfig,
    EncoderParams,
    HiddenStates,
    encode,
    encode_batch,
    init_encoder_params,
    mlm_logits,
    mlm_logits_batch,
    pool_label,
    pool_label_batch,
    pool_sentence,
    pool_sentence_batch,
)
from bicon.errors import DataError
from bicon.tensor import Tensor, backward, no_grad

from helpers import max_rel_err

CFG = EncoderConfig(vocab_size=40, d=16, n_layers=2, n_heads=4, max_seq_len=32)


@pytest.fixture(scope="module")
def params():
    return init_encoder_params(CFG, np.random.default_rng(0))


def test_encode_shape(params):
    seq = [2, 11, 12, 13, 3]
    with no_grad():
        hs = encode(params, seq)
    assert hs.h.shape == (5, CFG.d)


def test_encode_deterministic(params):
    seq = [2, 11, 12, 13, 3]
    with no_grad():
        a = encode(params, seq).h.data
        b = encode(params, seq).h.data
    np.testing.assert_array_equal(a, b)


def test_positional_encoding_breaks_permutation_symmetry(params):
    with no_grad():
        a = encode(params, [2, 11, 12, 3]).h.data
        b = encode(params, [2, 12, 11, 3]).h.data
    assert np.abs(a - b).max() > 1e-8


def test_out_of_vocab_id_rejected(params):
    with pytest.raises(DataError, match="out-of-vocab"):
        encode(params, [2, 40, 3])


def test_too_long_sequence_rejected(params):
    with pytest.raises(DataError, match="max_seq_len"):
        encode(params, list(range(10, 13)) * 20)


def test_pool_label_constant_rows():
    u = np.array([0.5, -1.5, 2.0])
    hs = HiddenStates(h=Tensor(np.tile(u, (5, 1))), length=5)
    out = pool_label(hs)
    np.testing.assert_allclose(out.data, np.concatenate([u, u]), atol=1e-15)


def test_pool_label_hand_example():
    # CLS=[1,0], content rows [[0,2],[2,0]], SEP excluded -> [1,0,1,1]
    h = Tensor(np.array([[1.0, 0.0], [0.0, 2.0], [2.0, 0.0], [9.0, 9.0]]))
    out = pool_label(HiddenStates(h=h, length=4))
    np.testing.assert_allclose(out.data, [1.0, 0.0, 1.0, 1.0], atol=1e-15)


def test_pool_label_dimension_is_2d(params):
    for L in (4, 9, 17):
        seq = [2] + [11] * (L - 2) + [3]
        with no_grad():
            out = pool_label(encode(params, seq))
        assert out.shape == (2 * CFG.d,)


def test_pool_sentence_selects_rows():
    rng = np.random.default_rng(4)
    h = Tensor(rng.normal(size=(9, 4)))
    out = pool_sentence(HiddenStates(h=h, length=9, e1_pos=1, e2_pos=7))
    np.testing.assert_array_equal(out.data, np.concatenate([h.data[1], h.data[7]]))


def test_pool_sentence_hand_example():
    h = Tensor(np.array([[0.0, 0.0], [1.0, 2.0], [3.0, 4.0]]))
    out = pool_sentence(HiddenStates(h=h, length=3, e1_pos=1, e2_pos=2))
    np.testing.assert_array_equal(out.data, [1.0, 2.0, 3.0, 4.0])


def test_pool_sentence_requires_marker_positions():
    h = Tensor(np.zeros((3, 2)))
    with pytest.raises(DataError, match="marker"):
        pool_sentence(HiddenStates(h=h, length=3))


def test_pooling_linearity():
    rng = np.random.default_rng(5)
    h = rng.normal(size=(6, 8))
    base = pool_label(HiddenStates(h=Tensor(h), length=6)).data
    scaled = pool_label(HiddenStates(h=Tensor(2.5 * h), length=6)).data
    np.testing.assert_allclose(scaled, 2.5 * base, rtol=1e-12)


def test_pool_sentence_is_pure_projection():
    rng = np.random.default_rng(6)
    h = rng.normal(size=(7, 5))
    out = pool_sentence(HiddenStates(h=Tensor(h), length=7, e1_pos=2, e2_pos=5)).data
    entries = set(h.reshape(-1).tolist())
    assert all(x in entries for x in out.tolist())


def test_gradients_reach_both_pooled_halves(params):
    seq = [2, 11, 12, 13, 14, 3]
    hs = encode(params, seq, e1_pos=1, e2_pos=3)
    emb = pool_sentence(hs)
    w = np.linspace(0.5, 1.5, emb.size)
    backward(T.sum_(T.mul(emb, Tensor(w))))
    g = hs.h.grad
    assert np.abs(g[1]).max() > 0
    assert np.abs(g[3]).max() > 0

    hs2 = encode(params, seq)
    emb2 = pool_label(hs2)
    backward(T.sum_(T.mul(emb2, Tensor(w))))
    g2 = hs2.h.grad
    assert np.abs(g2[0]).max() > 0  # CLS half
    assert np.abs(g2[2]).max() > 0  # meanpool half


def test_encoders_are_decoupled():
    label_params = init_encoder_params(CFG, np.random.default_rng(1))
    sent_params = init_encoder_params(CFG, np.random.default_rng(2))
    seq = [2, 6, 11, 7, 12, 8, 13, 9, 3]
    with no_grad():
        before = pool_sentence_batch(encode_batch(sent_params, [seq]), [1], [5]).data.copy()
    label_params.layers[0].wq.data += 10.0
    label_params.token_emb.data[:] = 0.0
    with no_grad():
        after = pool_sentence_batch(encode_batch(sent_params, [seq]), [1], [5]).data
    np.testing.assert_array_equal(before, after)


def test_batched_encoding_matches_single(params):
    seqs = [[2, 11, 12, 3], [2, 13, 14, 15, 16, 17, 3], [2, 18, 3]]
    with no_grad():
        batch = encode_batch(params, seqs)
        for i, seq in enumerate(seqs):
            single = encode(params, seq).h.data
            padded = batch.h.data[i, : len(seq)]
            assert max_rel_err(single, padded, floor=1e-12) < 1e-9


def test_pad_columns_do_not_leak_into_real_rows(params):
    # appending a longer neighbor (hence PAD columns) must not change a sequence
    seq = [2, 11, 12, 13, 3]
    with no_grad():
        alone = encode_batch(params, [seq]).h.data[0, :5]
        padded = encode_batch(params, [seq, [2] + [14] * 20 + [3]]).h.data[0, :5]
    assert max_rel_err(alone, padded, floor=1e-12) < 1e-9


def test_batched_pooling_matches_single(params):
    seqs = [[2, 11, 12, 13, 3], [2, 14, 15, 3]]
    with no_grad():
        batch = encode_batch(params, seqs)
        lab = pool_label_batch(batch).data
        for i, seq in enumerate(seqs):
            single = pool_label(encode(params, seq)).data
            assert max_rel_err(single, lab[i], floor=1e-12) < 1e-9

        sent = pool_sentence_batch(batch, [1, 2], [3, 1]).data
        for i, (seq, e1, e2) in enumerate(zip(seqs, [1, 2], [3, 1])):
            single = pool_sentence(encode(params, seq, e1_pos=e1, e2_pos=e2)).data
            assert max_rel_err(single, sent[i], floor=1e-12) < 1e-9


def test_mlm_logits_empty_positions(params):
    with no_grad():
        hs = encode(params, [2, 11, 3])
        out = mlm_logits(params, hs, [])
    assert out.shape == (0, CFG.vocab_size)
    assert T.masked_cross_entropy(out, np.zeros(0, dtype=int)).data == 0.0


def test_mlm_logits_single_position_softmax_sums_to_one(params):
    with no_grad():
        hs = encode(params, [2, 4, 3])  # MASK at position 1
        out = mlm_logits(params, hs, [1])
    assert out.shape == (1, CFG.vocab_size)
    assert T.softmax(out).data.sum() == pytest.approx(1.0, abs=1e-12)


def test_mlm_logits_batch_matches_single(params):
    seqs = [[2, 4, 11, 3], [2, 12, 4, 13, 3]]
    with no_grad():
        batch = encode_batch(params, seqs)
        batched = mlm_logits_batch(params, batch, [0, 1], [1, 2]).data
        s0 = mlm_logits(params, encode(params, seqs[0]), [1]).data
        s1 = mlm_logits(params, encode(params, seqs[1]), [2]).data
    assert max_rel_err(batched[0], s0[0], floor=1e-12) < 1e-9
    assert max_rel_err(batched[1], s1[0], floor=1e-12) < 1e-9
