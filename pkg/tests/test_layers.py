import itertools
import math

import numpy as np
import pytest

from hermit import numerics as nx
from hermit.corpus import parse_conll
from hermit.layers import (
    BiLstmParams,
    CrfParams,
    EmbeddingError,
    FixedRandomEmbedding,
    LookupEmbedding,
    LstmParams,
    PrecomputedEmbedding,
    SelfAttentionParams,
    Tagger,
    bilstm_forward,
    crf_log_partition,
    crf_nll,
    crf_sequence_score,
    crf_viterbi,
    lstm_step,
    make_provider,
    read_embedding_file,
    self_attention,
    token_cross_entropy,
    write_embedding_file,
)
from hermit.numerics import ShapeError, Tensor
from oracles import (
    attention_loops,
    check_gradients,
    crf_brute_force,
    crf_path_score,
    lstm_sequence_scalar,
    lstm_step_scalar,
)

rng = np.random.default_rng(11)


def random_crf(k, scale=1.0, seed=None):
    r = np.random.default_rng(seed) if seed is not None else rng
    p = CrfParams.init(k, "crf")
    p.transitions.data[...] = r.normal(scale=scale, size=(k, k))
    p.start.data[...] = r.normal(scale=scale, size=k)
    p.stop.data[...] = r.normal(scale=scale, size=k)
    return p


def zero_lstm(d, h):
    p = LstmParams.init(rng, d, h, "z")
    for t in p.parameters():
        t.data[...] = 0.0
    return p


# ---------------------------------------------------------------- embeddings

def test_fixed_random_is_pure_function_of_token_and_seed():
    a = FixedRandomEmbedding(8, seed=3)
    m = a.embed(["go", "home", "go"]).data
    np.testing.assert_array_equal(m[0], m[2])
    assert not np.array_equal(m[0], m[1])
    np.testing.assert_array_equal(FixedRandomEmbedding(8, seed=3).embed(["go"]).data[0], m[0])
    assert not np.array_equal(FixedRandomEmbedding(8, seed=4).embed(["go"]).data[0], m[0])


def test_lookup_unknown_token_uses_reserved_row():
    emb = LookupEmbedding(["go", "home"], 4, np.random.default_rng(0))
    m = emb.embed(["go", "zebra", "unicorn"]).data
    table = emb.parameters()[0].data
    np.testing.assert_array_equal(m[1], table[0])
    np.testing.assert_array_equal(m[2], table[0])
    assert not np.array_equal(m[0], table[0])


def test_lookup_lowercase_option():
    emb = LookupEmbedding(["go"], 4, np.random.default_rng(0), lowercase=True)
    m = emb.embed(["GO", "go"]).data
    np.testing.assert_array_equal(m[0], m[1])


def test_precomputed_starbucks_sentence(tmp_path, fixtures):
    [sent] = parse_conll((fixtures / "starbucks.conll").read_text())
    assert len(sent) == 6
    vectors = np.random.default_rng(1).normal(size=(6, 1024)).astype(np.float32)
    path = tmp_path / "starbucks.hemb"
    write_embedding_file(path, {sent.id: vectors})
    provider = PrecomputedEmbedding(read_embedding_file(path))
    m = provider.embed(sent.tokens, sent.id)
    assert m.shape == (6, 1024)
    np.testing.assert_array_equal(m.data, vectors.astype(np.float64))


def test_precomputed_text_variant(tmp_path):
    path = tmp_path / "tiny.txt"
    path.write_text("s1 2 3\n1 2 3\n4 5 6\ns2 1 3\n0 0 1\n")
    store = read_embedding_file(path)
    assert store["s1"].tolist() == [[1, 2, 3], [4, 5, 6]]
    assert store["s2"].shape == (1, 3)


def test_precomputed_binary_round_trip_is_float32_exact(tmp_path):
    store = {"a": rng.normal(size=(3, 5)), "b": rng.normal(size=(1, 5))}
    write_embedding_file(tmp_path / "x.hemb", store)
    back = read_embedding_file(tmp_path / "x.hemb")
    for k in store:
        np.testing.assert_array_equal(back[k], store[k].astype(np.float32).astype(np.float64))


def test_precomputed_missing_and_mismatched_entries():
    provider = PrecomputedEmbedding({"s1": np.zeros((2, 4))})
    with pytest.raises(EmbeddingError):
        provider.embed(["a", "b"], "s9")
    with pytest.raises(EmbeddingError):
        provider.embed(["a", "b", "c"], "s1")
    with pytest.raises(EmbeddingError):
        PrecomputedEmbedding({"s1": np.zeros((2, 4))}, dim=8)


def test_embed_batch_pads_and_masks():
    emb = FixedRandomEmbedding(5, seed=0)
    e, mask = emb.embed_batch([(("a", "b", "c"), None), (("d",), None)])
    assert e.shape == (2, 3, 5)
    assert mask.tolist() == [[True, True, True], [True, False, False]]
    assert np.all(e.data[1, 1:] == 0)


def test_make_provider_modes():
    assert isinstance(make_provider({"mode": "fixed-random", "dim": 4, "seed": 0}),
                      FixedRandomEmbedding)
    with pytest.raises((ValueError, KeyError)):
        make_provider({"mode": "bogus", "dim": 4})


# ---------------------------------------------------------------------- LSTM

def test_lstm_step_all_zero():
    p = zero_lstm(3, 4)
    h, c = lstm_step(Tensor(np.zeros(3)), Tensor(np.zeros(4)), Tensor(np.zeros(4)), p)
    assert np.all(h.data == 0) and np.all(c.data == 0)


def test_lstm_step_half_gates():
    p = zero_lstm(3, 4)
    v = np.array([1.0, -2.0, 0.5, 3.0])
    h, c = lstm_step(Tensor(rng.normal(size=3)), Tensor(rng.normal(size=4)), Tensor(v), p)
    np.testing.assert_allclose(c.data, 0.5 * v, atol=1e-15)
    np.testing.assert_allclose(h.data, 0.5 * np.tanh(0.5 * v), atol=1e-15)


def test_lstm_step_matches_scalar_oracle():
    p = LstmParams.init(rng, 5, 3, "l")
    p.b.data[...] = rng.normal(size=12)
    x, h0, c0 = rng.normal(size=5), rng.normal(size=3), rng.normal(size=3)
    h, c = lstm_step(Tensor(x), Tensor(h0), Tensor(c0), p)
    hr, cr = lstm_step_scalar(x, h0, c0, p.W.data, p.U.data, p.b.data)
    assert np.max(np.abs(h.data - hr)) <= 1e-12
    assert np.max(np.abs(c.data - cr)) <= 1e-12


def test_lstm_step_shape_mismatch():
    p = LstmParams.init(rng, 5, 3, "l")
    with pytest.raises(ShapeError):
        lstm_step(Tensor(np.zeros(4)), Tensor(np.zeros(3)), Tensor(np.zeros(3)), p)


def test_lstm_init_forget_bias_and_range():
    p = LstmParams.init(np.random.default_rng(0), 6, 4, "l")
    assert p.b.data.tolist() == [0.0] * 4 + [1.0] * 4 + [0.0] * 8
    assert np.max(np.abs(p.W.data)) <= 0.5 and np.max(np.abs(p.U.data)) <= 0.5
    assert p.W.shape == (16, 6) and p.U.shape == (16, 4)


def test_bilstm_single_step():
    p = BiLstmParams.init(rng, 3, 2, "bi")
    x = rng.normal(size=(1, 3))
    out = bilstm_forward(Tensor(x), np.ones(1, bool), p).data
    f = lstm_step_scalar(x[0], np.zeros(2), np.zeros(2), p.forward.W.data, p.forward.U.data,
                         p.forward.b.data)[0]
    b = lstm_step_scalar(x[0], np.zeros(2), np.zeros(2), p.backward.W.data, p.backward.U.data,
                         p.backward.b.data)[0]
    np.testing.assert_allclose(out[0], np.concatenate([f, b]), atol=1e-12)


def test_bilstm_matches_scalar_sequences():
    p = BiLstmParams.init(rng, 4, 3, "bi")
    x = rng.normal(size=(5, 4))
    out = bilstm_forward(Tensor(x), np.ones(5, bool), p).data
    fw = lstm_sequence_scalar(x, p.forward.W.data, p.forward.U.data, p.forward.b.data)
    bw = lstm_sequence_scalar(x[::-1], p.backward.W.data, p.backward.U.data,
                              p.backward.b.data)[::-1]
    assert np.max(np.abs(out - np.concatenate([fw, bw], axis=1))) <= 1e-12


def test_bilstm_masked_tail_rows_are_zero_and_prefix_matches_truncation():
    p = BiLstmParams.init(rng, 4, 3, "bi")
    x = rng.normal(size=(6, 4))
    mask = np.array([True] * 4 + [False] * 2)
    out = bilstm_forward(Tensor(x), mask, p).data
    assert np.all(out[4:] == 0)
    short = bilstm_forward(Tensor(x[:4]), np.ones(4, bool), p).data
    assert np.max(np.abs(out[:4] - short)) <= 1e-12


def test_bilstm_reversal_swaps_directions():
    p = BiLstmParams.init(rng, 3, 2, "bi")
    swapped = BiLstmParams(p.backward, p.forward)
    x = rng.normal(size=(5, 3))
    out = bilstm_forward(Tensor(x), np.ones(5, bool), p).data
    rev = bilstm_forward(Tensor(x[::-1].copy()), np.ones(5, bool), swapped).data
    # the reversed run's first half is the original's second half, and vice versa
    np.testing.assert_allclose(rev[::-1, :2], out[:, 2:], atol=1e-12)
    np.testing.assert_allclose(rev[::-1, 2:], out[:, :2], atol=1e-12)


def test_bilstm_batch_equals_individual_runs():
    p = BiLstmParams.init(rng, 3, 2, "bi")
    xs = [rng.normal(size=(t, 3)) for t in (4, 2, 3)]
    batch = np.zeros((3, 4, 3))
    mask = np.zeros((3, 4), bool)
    for i, x in enumerate(xs):
        batch[i, :len(x)] = x
        mask[i, :len(x)] = True
    out = bilstm_forward(Tensor(batch), mask, p).data
    for i, x in enumerate(xs):
        single = bilstm_forward(Tensor(x), np.ones(len(x), bool), p).data
        assert np.max(np.abs(out[i, :len(x)] - single)) <= 1e-12


def test_bilstm_empty_sequence_rejected():
    p = BiLstmParams.init(rng, 3, 2, "bi")
    with pytest.raises(ShapeError):
        bilstm_forward(Tensor(np.zeros((0, 3))), np.zeros(0, bool), p)


def test_bilstm_gradients():
    p = BiLstmParams.init(rng, 3, 2, "bi")
    x = Tensor(rng.normal(size=(2, 4, 3)), requires_grad=True)
    mask = np.array([[True] * 4, [True, True, False, False]])
    w = rng.normal(size=(2, 4, 4))
    loss = lambda: nx.sum(nx.mul_const(bilstm_forward(x, mask, p), w))  # noqa: E731
    assert check_gradients(loss, [x] + p.parameters()) <= 1e-4


# ------------------------------------------------------------ self-attention

def test_attention_single_position():
    p = SelfAttentionParams.init(rng, 4, 3, "att")
    s = rng.normal(size=(1, 4))
    out = self_attention(Tensor(s), np.ones(1, bool), p).data
    np.testing.assert_allclose(out[0], s[0] @ p.Wv.data, atol=1e-14)


def test_attention_identical_rows_give_identical_outputs():
    p = SelfAttentionParams.init(rng, 4, 3, "att")
    s = np.tile(rng.normal(size=4), (5, 1))
    out = self_attention(Tensor(s), np.ones(5, bool), p).data
    assert np.max(np.abs(out - out[0])) <= 1e-14


def test_attention_matches_double_loop():
    p = SelfAttentionParams.init(rng, 6, 4, "att")
    s = rng.normal(size=(5, 6))
    out = self_attention(Tensor(s), np.ones(5, bool), p).data
    ref = attention_loops(s, p.Wq.data, p.Wk.data, p.Wv.data)
    assert np.max(np.abs(out - ref)) <= 1e-10


def test_attention_masked_keys_and_zeroed_queries():
    p = SelfAttentionParams.init(rng, 4, 2, "att")
    s = rng.normal(size=(5, 4))
    mask = np.array([True, True, True, False, False])
    out = self_attention(Tensor(s), mask, p).data
    ref = attention_loops(s[:3], p.Wq.data, p.Wk.data, p.Wv.data)
    assert np.max(np.abs(out[:3] - ref)) <= 1e-10
    assert np.all(out[3:] == 0)


def test_attention_all_masked_rejected():
    p = SelfAttentionParams.init(rng, 4, 2, "att")
    with pytest.raises(ValueError):
        self_attention(Tensor(np.zeros((3, 4))), np.zeros(3, bool), p)


def test_attention_gradients():
    p = SelfAttentionParams.init(rng, 4, 3, "att")
    s = Tensor(rng.normal(size=(2, 4, 4)), requires_grad=True)
    mask = np.array([[True] * 4, [True, True, True, False]])
    w = rng.normal(size=(2, 4, 4))
    loss = lambda: nx.sum(nx.mul_const(self_attention(s, mask, p), w))  # noqa: E731
    assert check_gradients(loss, [s] + p.parameters()) <= 1e-4


# ----------------------------------------------------------------------- CRF

def test_crf_sequence_score_zero():
    p = CrfParams.init(3, "c")
    assert crf_sequence_score(Tensor(np.zeros((4, 3))), [0, 2, 1, 1], p).item() == 0.0


def test_crf_sequence_score_single_step():
    p = random_crf(3)
    em = rng.normal(size=(1, 3))
    got = crf_sequence_score(Tensor(em), [2], p).item()
    assert got == pytest.approx(p.start.data[2] + em[0, 2] + p.stop.data[2], abs=1e-14)


def test_crf_sequence_score_direct_sum():
    p = random_crf(4)
    em = rng.normal(size=(6, 4))
    tags = [0, 3, 3, 1, 2, 0]
    ref = crf_path_score(em, tags, p.transitions.data, p.start.data, p.stop.data)
    assert abs(crf_sequence_score(Tensor(em), tags, p).item() - ref) <= 1e-12


def test_crf_sequence_score_index_out_of_range():
    with pytest.raises(IndexError):
        crf_sequence_score(Tensor(np.zeros((2, 3))), [0, 3], CrfParams.init(3, "c"))


def test_crf_partition_single_label():
    p = random_crf(1)
    em = rng.normal(size=(4, 1))
    z = crf_log_partition(Tensor(em), np.ones(4, bool), p).item()
    assert z == pytest.approx(crf_sequence_score(Tensor(em), [0] * 4, p).item(), abs=1e-12)


def test_crf_partition_uniform_scores():
    for T, K in [(1, 3), (4, 2), (5, 4)]:
        z = crf_log_partition(Tensor(np.zeros((T, K))), np.ones(T, bool), CrfParams.init(K, "c"))
        assert abs(z.item() - T * math.log(K)) <= 1e-12


def test_crf_partition_vs_brute_force_4096():
    p = random_crf(4)
    em = rng.normal(size=(6, 4))
    z = crf_log_partition(Tensor(em), np.ones(6, bool), p).item()
    ref, _, _ = crf_brute_force(em, p.transitions.data, p.start.data, p.stop.data)
    assert abs(z - ref) <= 1e-6


def test_crf_probabilities_sum_to_one():
    p = random_crf(3)
    em = rng.normal(size=(4, 3))
    z = crf_log_partition(Tensor(em), np.ones(4, bool), p).item()
    total = sum(math.exp(crf_path_score(em, path, p.transitions.data, p.start.data,
                                        p.stop.data) - z)
                for path in itertools.product(range(3), repeat=4))
    assert abs(total - 1.0) <= 1e-9


def test_crf_partition_dominates_any_path_score():
    p = random_crf(3)
    em = rng.normal(size=(5, 3))
    z = crf_log_partition(Tensor(em), np.ones(5, bool), p).item()
    for _ in range(20):
        tags = rng.integers(0, 3, 5)
        assert z > crf_sequence_score(Tensor(em), tags, p).item()


def test_crf_masked_steps_are_skipped():
    p = random_crf(3)
    em = rng.normal(size=(6, 3))
    mask = np.array([True, False, True, True, False, True])
    z = crf_log_partition(Tensor(em), mask, p).item()
    ref, path, best = crf_brute_force(em[mask], p.transitions.data, p.start.data, p.stop.data)
    assert abs(z - ref) <= 1e-9
    tags, score = crf_viterbi(em, mask, p)
    assert [t for t in tags if t >= 0] == path and tags[1] == -1 and tags[4] == -1
    assert abs(score - best) <= 1e-9
    full_tags = np.zeros(6, int)
    full_tags[mask] = path
    assert abs(crf_sequence_score(Tensor(em), full_tags, p, mask).item() - best) <= 1e-9


def test_crf_empty_effective_sequence_rejected():
    with pytest.raises(ValueError):
        crf_log_partition(Tensor(np.zeros((3, 2))), np.zeros(3, bool), CrfParams.init(2, "c"))


def test_crf_nll_single_label_is_zero():
    p = random_crf(1)
    nll = crf_nll(Tensor(rng.normal(size=(3, 1))), np.ones(3, bool), [0, 0, 0], p).item()
    assert abs(nll) <= 1e-12


def test_crf_nll_overwhelming_margin():
    p = CrfParams.init(3, "c")
    gold = [2, 0, 1, 1]
    em = np.zeros((4, 3))
    em[np.arange(4), gold] = 60.0
    nll = crf_nll(Tensor(em), np.ones(4, bool), gold, p).item()
    assert 0.0 <= nll < 1e-20 or 0.0 <= nll < 1e-12


def test_crf_nll_vs_brute_force_probability():
    p = random_crf(3)
    em = rng.normal(size=(5, 3))
    gold = [1, 1, 0, 2, 2]
    logz, _, _ = crf_brute_force(em, p.transitions.data, p.start.data, p.stop.data)
    ref = logz - crf_path_score(em, gold, p.transitions.data, p.start.data, p.stop.data)
    nll = crf_nll(Tensor(em), np.ones(5, bool), gold, p).item()
    assert abs(nll - ref) <= 1e-6 and nll >= -1e-9


def test_crf_nll_gradients():
    p = random_crf(3)
    em = Tensor(rng.normal(size=(2, 5, 3)), requires_grad=True)
    mask = np.array([[True] * 5, [True, True, True, False, False]])
    gold = np.array([[0, 1, 2, 2, 1], [2, 2, 0, 0, 0]])
    loss = lambda: nx.sum(crf_nll(em, mask, gold, p))  # noqa: E731
    assert check_gradients(loss, [em] + p.parameters()) <= 1e-4


def test_viterbi_zero_transitions_is_emission_argmax():
    p = CrfParams.init(4, "c")
    em = rng.normal(size=(6, 4))
    em[np.arange(6), rng.integers(0, 4, 6)] += 10.0
    tags, _ = crf_viterbi(em, None, p)
    assert tags == np.argmax(em, axis=1).tolist()


def test_viterbi_single_label():
    tags, score = crf_viterbi(np.ones((3, 1)), None, CrfParams.init(1, "c"))
    assert tags == [0, 0, 0] and score == 3.0


def test_viterbi_ties_prefer_lowest_label():
    tags, score = crf_viterbi(np.zeros((4, 3)), None, CrfParams.init(3, "c"))
    assert tags == [0, 0, 0, 0] and score == 0.0


def test_viterbi_vs_brute_force_78125():
    p = random_crf(5)
    em = rng.normal(size=(7, 5))
    tags, score = crf_viterbi(em, np.ones(7, bool), p)
    _, path, best = crf_brute_force(em, p.transitions.data, p.start.data, p.stop.data)
    assert tags == path
    assert abs(score - best) <= 1e-9


# ------------------------------------------------------------------- taggers

def test_tagger_parameter_names():
    crf = Tagger.init(rng, 6, 4, "da", use_crf=True)
    soft = Tagger.init(rng, 6, 4, "da", use_crf=False)
    assert [q.name for q in crf.parameters()] == [
        "da.proj.W", "da.proj.b", "da.crf.transitions", "da.crf.start", "da.crf.stop"]
    assert [q.name for q in soft.parameters()] == ["da.proj.W", "da.proj.b"]


def test_token_cross_entropy_reference():
    em = rng.normal(size=(1, 4, 3))
    mask = np.array([[True, True, True, False]])
    gold = np.array([[2, 0, 1, 0]])
    got = token_cross_entropy(Tensor(em), mask, gold).item()
    ref = 0.0
    for t in range(3):
        row = em[0, t]
        ref += math.log(np.exp(row).sum()) - row[gold[0, t]]
    assert abs(got - ref) <= 1e-12


def test_softmax_tagger_decodes_argmax():
    tagger = Tagger.init(rng, 4, 3, "x", use_crf=False)
    em = rng.normal(size=(2, 3, 3))
    mask = np.array([[True] * 3, [True, False, False]])
    out = tagger.decode(em, mask)
    assert out[0] == np.argmax(em[0], axis=1).tolist()
    assert out[1] == [int(np.argmax(em[1, 0]))]
