"""Masked and causal n-gram model tests against hand-counted oracles."""

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ragward import mlm
from ragward.errors import (
    ConfigInvalid,
    EmptyCorpus,
    EmptyInput,
    FormatVersionMismatch,
    PositionOutOfRange,
)


def test_masked_prob_hand_count_abab():
    # corpus: one doc 0 1 0 1 over V=2, default weights, delta=0.1
    m = mlm.fit_mlm([(0, 1, 0, 1)], 2)
    # position 1 (token 1): the two-sided quad pattern falls off both
    # ends, so pair/left/right/unigram renormalize over mass 0.60
    pair = (1 + 0.1) / (1 + 0.2)      # ctx (0,0) saw token 1 once
    left = (2 + 0.1) / (2 + 0.2)      # ctx (0,) saw token 1 twice
    right = (1 + 0.1) / (1 + 0.2)     # ctx (0,) on the right saw 1 once
    uni = (2 + 0.1) / (4 + 0.2)       # token 1 twice among 4
    want = (0.25 * pair + 0.15 * left + 0.15 * right + 0.05 * uni) / 0.60
    assert abs(m.masked_prob([0, 1, 0, 1], 1) - want) < 1e-12
    assert abs(want - 0.8914141414141414) < 1e-12


def test_masked_prob_hand_count_three_tokens():
    # one doc 5 6 7 over V=10: interior and boundary positions
    m = mlm.fit_mlm([(5, 6, 7)], 10)
    mid = (0.25 * (1.1 / 2) + 0.15 * (1.1 / 2) + 0.15 * (1.1 / 2)
           + 0.05 * (1.1 / 4)) / 0.60
    assert abs(m.masked_prob([5, 6, 7], 1) - mid) < 1e-12
    first = (0.15 * (1.1 / 2) + 0.05 * (1.1 / 4)) / 0.20
    assert abs(m.masked_prob([5, 6, 7], 0) - first) < 1e-12
    assert abs(first - 0.48125) < 1e-12


def test_unigram_only_profile_is_smoothed_frequency():
    cfg = mlm.MlmConfig(mu=(0.0, 0.0, 0.0, 0.0, 1.0), delta=0.1)
    m = mlm.fit_mlm([(0, 1, 0, 1)], 2, cfg)
    for pos, tok in enumerate((0, 1, 0, 1)):
        count = 2
        want = (count + 0.1) / (4 + 0.2)
        assert abs(m.masked_prob([0, 1, 0, 1], pos) - want) < 1e-12


def test_degenerate_boundary_falls_back_to_unigram():
    cfg = mlm.MlmConfig(mu=(1.0, 0.0, 0.0, 0.0, 0.0), delta=0.1)
    m = mlm.fit_mlm([(0, 1, 0, 1, 0)], 2, cfg)
    # position 0 has no quad context and the profile puts no weight on
    # anything else, so scoring falls back to the raw unigram
    want = (3 + 0.1) / (5 + 0.2)
    assert abs(m.masked_prob([0, 1, 0, 1, 0], 0) - want) < 1e-12
    # position 2 has the quad available and gets it exclusively
    assert abs(m.masked_prob([0, 1, 0, 1, 0], 2) - 1.1 / 1.2) < 1e-12


def test_masked_prob_floor():
    m = mlm.BidirectionalNGramModel(10**10)
    assert m.masked_prob([0, 1], 0) == mlm.PROB_FLOOR


def test_masked_prob_is_mask_equivalent():
    # the scored token never contributes to its own context counts, so
    # changing it does not change the weights, only the lookup
    m = mlm.fit_mlm([(0, 1, 2, 3, 4)], 5)
    a = m.full_distribution([0, 1, 2, 3, 4], 2)
    b = m.full_distribution([0, 1, 4, 3, 4], 2)
    np.testing.assert_array_equal(a, b)


@settings(max_examples=40, deadline=None)
@given(st.data())
def test_full_distribution_sums_to_one(data):
    docs = data.draw(
        st.lists(st.lists(st.integers(0, 7), min_size=1, max_size=8), min_size=1, max_size=4)
    )
    m = mlm.fit_mlm([tuple(d) for d in docs], 8)
    probe = data.draw(st.lists(st.integers(0, 7), min_size=1, max_size=8))
    pos = data.draw(st.integers(0, len(probe) - 1))
    vec = m.full_distribution(probe, pos)
    assert abs(vec.sum() - 1.0) < 1e-6
    assert (vec >= 0).all()


def test_top_candidates_full_permutation_and_ties():
    m = mlm.BidirectionalNGramModel(6)
    # unfitted model is uniform, so ties resolve to ascending ids
    assert m.top_candidates([0, 1], 0, 6) == [0, 1, 2, 3, 4, 5]

    fitted = mlm.fit_mlm([(0, 1, 0, 2)], 6)
    probe = [3, 1, 4]
    vec = fitted.full_distribution(probe, 0)
    want = sorted(range(6), key=lambda i: (-vec[i], i))
    assert fitted.top_candidates(probe, 0, 6) == want
    assert fitted.top_candidates(probe, 0, 2) == want[:2]
    with pytest.raises(ConfigInvalid):
        fitted.top_candidates(probe, 0, 0)


def test_position_bounds_checked():
    m = mlm.fit_mlm([(0, 1)], 2)
    with pytest.raises(PositionOutOfRange):
        m.masked_prob([0, 1], 2)
    with pytest.raises(PositionOutOfRange):
        m.masked_prob([0, 1], -1)
    with pytest.raises(PositionOutOfRange):
        m.full_distribution([0, 1], 5)


def test_mlm_config_validation():
    with pytest.raises(ConfigInvalid):
        mlm.MlmConfig(mu=(0.5, 0.5))
    with pytest.raises(ConfigInvalid):
        mlm.MlmConfig(mu=(0.5, 0.5, 0.5, -0.5, 0.0))
    with pytest.raises(ConfigInvalid):
        mlm.MlmConfig(mu=(0.5, 0.2, 0.1, 0.1, 0.2))
    with pytest.raises(ConfigInvalid):
        mlm.MlmConfig(delta=0.0)
    with pytest.raises(ConfigInvalid):
        mlm.MlmConfig.from_profile("unknown")
    narrow = mlm.MlmConfig.from_profile("narrow")
    assert narrow.mu[0] == 0.0 and narrow.delta == 0.05


def test_mlm_id_tracks_content_and_config():
    a = mlm.fit_mlm([(0, 1, 2)], 5)
    b = mlm.fit_mlm([(0, 1, 2)], 5)
    assert a.mlm_id == b.mlm_id
    c = mlm.fit_mlm([(0, 1, 2), (0, 1, 2)], 5)
    assert c.mlm_id != a.mlm_id
    d = mlm.fit_mlm([(0, 1, 2)], 5, mlm.MlmConfig.from_profile("narrow"))
    assert d.mlm_id != a.mlm_id


def test_fit_mlm_requires_documents():
    with pytest.raises(EmptyCorpus):
        mlm.fit_mlm([], 5)
    with pytest.raises(EmptyCorpus):
        mlm.fit_causal([], 5)
    with pytest.raises(ConfigInvalid):
        mlm.BidirectionalNGramModel(0)


def test_bidirectional_save_load_round_trip(tmp_path):
    m = mlm.fit_mlm([(0, 1, 0, 1), (2, 3, 2)], 5,
                    mlm.MlmConfig.from_profile("narrow"))
    path = tmp_path / "mlm.txt"
    m.save(path)
    loaded = mlm.load_mlm(path)
    assert isinstance(loaded, mlm.BidirectionalNGramModel)
    assert loaded.mlm_id == m.mlm_id
    probe = [0, 1, 3, 2]
    for pos in range(4):
        assert loaded.masked_prob(probe, pos) == m.masked_prob(probe, pos)


def test_causal_save_load_round_trip(tmp_path):
    m = mlm.fit_causal([(0, 1, 2), (0, 1, 3)], 5, order=2, delta=0.2)
    path = tmp_path / "causal.txt"
    m.save(path)
    loaded = mlm.load_mlm(path)
    assert isinstance(loaded, mlm.CausalNGramModel)
    assert loaded.order == 2 and loaded.delta == 0.2
    assert loaded.mlm_id == m.mlm_id
    assert mlm.perplexity(loaded, [0, 1, 2]) == mlm.perplexity(m, [0, 1, 2])


def test_load_mlm_rejects_unknown_formats(tmp_path):
    bad = tmp_path / "bad.txt"
    bad.write_text("something else\n")
    with pytest.raises(FormatVersionMismatch):
        mlm.load_mlm(bad)
    odd = tmp_path / "odd.txt"
    odd.write_text("ragward-mlm v1\nkind mystery\nvocab 3\n")
    with pytest.raises(FormatVersionMismatch):
        mlm.load_mlm(odd)


def test_perplexity_uniform_is_vocab_size():
    m = mlm.CausalNGramModel(5)
    assert abs(mlm.perplexity(m, [0, 1, 2, 3]) - 5.0) < 1e-9


def test_perplexity_memorized_approaches_one():
    m = mlm.fit_causal([(4, 4, 4)], 10, order=3, delta=1e-12)
    assert abs(mlm.perplexity(m, [4, 4, 4]) - 1.0) < 1e-6


def test_perplexity_bigram_hand_value():
    m = mlm.fit_causal([(0, 1), (0, 1), (0, 2)], 3, order=2, delta=0.1)
    # empty-context table sees one start event per sequence: 0 thrice
    p0 = (3 + 0.1) / (3 + 0.3)
    # context (0,) continues with 1 twice and 2 once
    p1 = (2 + 0.1) / (3 + 0.3)
    want = math.exp(-(math.log(p0) + math.log(p1)) / 2)
    assert abs(mlm.perplexity(m, [0, 1]) - want) < 1e-12


def test_perplexity_grows_with_smoothing_on_seen_data():
    values = []
    for delta in (0.01, 0.1, 1.0):
        m = mlm.fit_causal([(4, 4, 4)], 10, order=3, delta=delta)
        values.append(mlm.perplexity(m, [4, 4, 4]))
    assert values[0] < values[1] < values[2]


def test_perplexity_empty_input():
    with pytest.raises(EmptyInput):
        mlm.perplexity(mlm.CausalNGramModel(5), [])


def test_causal_config_validation():
    with pytest.raises(ConfigInvalid):
        mlm.CausalNGramModel(5, order=0)
    with pytest.raises(ConfigInvalid):
        mlm.CausalNGramModel(5, delta=0.0)
