"""Encoder tests: pooling identities, gradient oracle, training, io."""

from __future__ import annotations

import numpy as np
import pytest

import helpers
from ragward import defense, encoder
from ragward.errors import (
    ConfigInvalid,
    DimensionMismatch,
    EmptyInput,
    FormatVersionMismatch,
    IdOutOfRange,
    IoError,
)


def _params(seed=0, V=20, D=4):
    return encoder.init_params(V, D, seed)


def test_encode_single_token_is_embedding_row():
    p = _params()
    ids = [7]
    np.testing.assert_array_equal(encoder.encode(p, ids), p.E[7])


def test_encode_zero_attention_is_uniform_mean():
    p = _params()
    p.w[:] = 0.0
    ids = [1, 4, 9, 2]
    np.testing.assert_allclose(
        encoder.encode(p, ids), p.E[ids].mean(axis=0), rtol=1e-12, atol=1e-15
    )
    np.testing.assert_allclose(
        encoder.attention(p, ids), np.full(4, 0.25), rtol=1e-12, atol=0
    )


def test_encode_matches_scalar_reference():
    p = _params(seed=3)
    rng = np.random.default_rng(0)
    for _ in range(10):
        ids = rng.integers(0, p.V, size=int(rng.integers(1, 12)))
        href, _ = helpers.reference_pool(p.E, p.w, p.scale, list(ids))
        np.testing.assert_allclose(encoder.encode(p, ids), href, rtol=1e-12, atol=1e-14)


def test_similarity_values_and_shape_check():
    assert encoder.similarity(np.array([1.0, 2.0]), np.array([3.0, -1.0])) == 1.0
    assert encoder.similarity(np.zeros(3), np.ones(3)) == 0.0
    with pytest.raises(DimensionMismatch):
        encoder.similarity(np.zeros(3), np.zeros(4))


def test_gradient_single_token_norm_is_query_norm():
    p = _params(seed=1)
    q = np.random.default_rng(2).standard_normal(p.D)
    prof = encoder.gradient_profile(p, q, "d", [5])
    assert prof.norms.shape == (1,)
    assert abs(prof.norms[0] - np.linalg.norm(q)) < 1e-12


def test_gradient_zero_attention_norms_are_query_norm_over_T():
    p = _params(seed=4)
    p.w[:] = 0.0
    q = np.random.default_rng(5).standard_normal(p.D)
    ids = [3, 3, 8, 1, 0]
    prof = encoder.gradient_profile(p, q, "d", ids)
    np.testing.assert_allclose(
        prof.norms, np.full(5, np.linalg.norm(q) / 5.0), rtol=1e-12, atol=1e-15
    )


def test_gradient_profile_matches_finite_differences():
    rng = np.random.default_rng(6)
    for case in range(20):
        D = int(rng.choice([4, 8]))
        T = int(rng.integers(1, 17))
        p = encoder.init_params(30, D, seed=100 + case)
        q = rng.standard_normal(D)
        ids = rng.integers(0, 30, size=T)
        prof = encoder.gradient_profile(p, q, f"case-{case}", ids)
        want = helpers.fd_grad_norms(p.E, p.w, p.scale, list(ids), q)
        np.testing.assert_allclose(prof.norms, want, rtol=1e-4, atol=1e-8)
        assert abs(prof.mean - prof.norms.mean()) < 1e-15


def test_gradient_profile_permutation_covariance():
    p = _params(seed=7)
    rng = np.random.default_rng(8)
    q = rng.standard_normal(p.D)
    ids = rng.integers(0, p.V, size=9)
    perm = rng.permutation(9)
    base = encoder.gradient_profile(p, q, "d", ids).norms
    permuted = encoder.gradient_profile(p, q, "d", ids[perm]).norms
    np.testing.assert_allclose(permuted, base[perm], rtol=1e-12, atol=1e-14)


def test_gradient_norms_scale_linearly_with_query():
    # scaling the query scales every norm by the same factor, so the
    # above-mean set and the top-N selection cannot change
    p = _params(seed=9)
    rng = np.random.default_rng(10)
    q = rng.standard_normal(p.D)
    ids = rng.integers(0, p.V, size=12)
    base = encoder.gradient_profile(p, q, "d", ids)
    for c in (0.5, 3.0, 17.0):
        scaled = encoder.gradient_profile(p, c * q, "d", ids)
        np.testing.assert_allclose(scaled.norms, c * base.norms, rtol=1e-12, atol=1e-14)
        assert defense.key_tokens(scaled, 4) == defense.key_tokens(base, 4)


def test_token_gradients_uses_query_encoder_and_doc_positions(tiny_bundle, tiny_pair):
    q = tiny_bundle.queries[0]
    d = tiny_bundle.documents[0]
    prof = encoder.token_gradients(tiny_pair, q, d)
    assert prof.doc_id == d.doc_id
    assert prof.norms.shape == (len(d.token_ids),)
    q_vec = encoder.encode(tiny_pair.query, q.token_ids)
    direct = encoder.gradient_profile(tiny_pair.doc, q_vec, d.doc_id, d.token_ids)
    np.testing.assert_array_equal(prof.norms, direct.norms)


def test_embedding_l2norm_hand_case():
    E = np.zeros((3, 2))
    E[1] = [3.0, 4.0]
    p = encoder.EncoderParams(E=E, w=np.zeros(2))
    assert abs(encoder.embedding_l2norm(p, [1]) - 5.0) < 1e-12


def test_input_validation_errors():
    p = _params()
    with pytest.raises(EmptyInput):
        encoder.encode(p, [])
    with pytest.raises(IdOutOfRange):
        encoder.encode(p, [p.V])
    with pytest.raises(IdOutOfRange):
        encoder.encode(p, [-1])
    with pytest.raises(DimensionMismatch):
        encoder.gradient_profile(p, np.zeros(p.D + 1), "d", [0])
    with pytest.raises(ConfigInvalid):
        encoder.EncoderParams(E=np.zeros((4, 1)), w=np.zeros(1))
    with pytest.raises(ConfigInvalid):
        encoder.EncoderParams(E=np.full((4, 2), np.nan), w=np.zeros(2))
    with pytest.raises(ConfigInvalid):
        a, b = _params(0), _params(0)
        encoder.EncoderPair(query=a, doc=b, shared=True)


def test_init_pair_shared_and_split():
    shared = encoder.init_pair(10, 4, seed=0, shared=True)
    assert shared.query is shared.doc
    split = encoder.init_pair(10, 4, seed=0, shared=False)
    assert split.query is not split.doc
    # split doc params come from a different stream
    assert not np.array_equal(split.query.E, split.doc.E)
    np.testing.assert_array_equal(split.query.E, shared.query.E)


def _toy_pairs():
    # two disjoint (query, doc) token groups
    return [([0, 1], [2, 3]), ([4, 5], [6, 7])]


def test_train_zero_learning_rate_is_identity():
    pair = encoder.init_pair(10, 4, seed=1, shared=True)
    before = encoder.fingerprint_pair(pair)
    res = encoder.train_contrastive(pair, _toy_pairs(), epochs=3,
                                    learning_rate=0.0, batch_size=2, seed=0)
    assert encoder.fingerprint_pair(res.pair) == before
    assert len(res.epoch_losses) == 3


def test_train_reduces_loss_and_raises_pair_similarity():
    pair = encoder.init_pair(10, 4, seed=1, shared=True)
    pairs = _toy_pairs()
    sims_before = [
        encoder.similarity(encoder.encode(pair.query, q), encoder.encode(pair.doc, d))
        for q, d in pairs
    ]
    res = encoder.train_contrastive(pair, pairs, epochs=15,
                                    learning_rate=0.5, batch_size=2, seed=0)
    assert res.epoch_losses[-1] <= res.epoch_losses[0]
    for (q, d), before in zip(pairs, sims_before):
        after = encoder.similarity(
            encoder.encode(res.pair.query, q), encoder.encode(res.pair.doc, d)
        )
        assert after > before


def test_train_is_deterministic():
    a = encoder.train_contrastive(encoder.init_pair(10, 4, seed=1), _toy_pairs(),
                                  epochs=4, learning_rate=0.3, batch_size=2, seed=9)
    b = encoder.train_contrastive(encoder.init_pair(10, 4, seed=1), _toy_pairs(),
                                  epochs=4, learning_rate=0.3, batch_size=2, seed=9)
    assert encoder.fingerprint_pair(a.pair) == encoder.fingerprint_pair(b.pair)
    assert a.epoch_losses == b.epoch_losses


def test_train_config_validation():
    pair = encoder.init_pair(10, 4, seed=1)
    with pytest.raises(ConfigInvalid):
        encoder.train_contrastive(pair, _toy_pairs(), 1, 0.1, batch_size=1, seed=0)
    with pytest.raises(ConfigInvalid):
        encoder.train_contrastive(pair, _toy_pairs(), 0, 0.1, batch_size=2, seed=0)
    with pytest.raises(ConfigInvalid):
        encoder.train_contrastive(pair, _toy_pairs(), 1, -0.1, batch_size=2, seed=0)
    with pytest.raises(ConfigInvalid):
        encoder.train_contrastive(pair, [([0], [1])], 1, 0.1, batch_size=2, seed=0)


def test_fingerprint_distinguishes_params():
    a = encoder.init_pair(10, 4, seed=1)
    b = encoder.init_pair(10, 4, seed=2)
    assert encoder.fingerprint_pair(a) != encoder.fingerprint_pair(b)
    assert encoder.fingerprint_pair(a) == encoder.fingerprint_pair(
        encoder.init_pair(10, 4, seed=1)
    )


@pytest.mark.parametrize("shared", [True, False])
def test_save_load_round_trip_is_bit_exact(tmp_path, shared):
    pair = encoder.init_pair(12, 5, seed=3, shared=shared)
    path = tmp_path / "enc.bin"
    encoder.save_params(pair, path)
    loaded = encoder.load_params(path)
    assert loaded.shared == shared
    assert encoder.fingerprint_pair(loaded) == encoder.fingerprint_pair(pair)
    np.testing.assert_array_equal(loaded.query.E, pair.query.E)
    np.testing.assert_array_equal(loaded.doc.w, pair.doc.w)
    if shared:
        assert loaded.query is loaded.doc


def test_load_rejects_bad_magic_and_truncation(tmp_path):
    pair = encoder.init_pair(6, 3, seed=0)
    path = tmp_path / "enc.bin"
    encoder.save_params(pair, path)
    blob = path.read_bytes()
    (tmp_path / "bad.bin").write_bytes(b"NOTMAGIC" + blob[8:])
    with pytest.raises(FormatVersionMismatch):
        encoder.load_params(tmp_path / "bad.bin")
    (tmp_path / "short.bin").write_bytes(blob[:-10])
    with pytest.raises(IoError):
        encoder.load_params(tmp_path / "short.bin")
