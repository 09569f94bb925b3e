"""
Tests for perfrank.core.

This tests:
- PART 1: Scoring and ground-truth preferences
- PART 2: Domain type invariants and hyperparameter validation
- PART 3: Market state construction and round transitions
- PART 4: Random streams and errors crossing process boundaries
"""

import pickle

import numpy as np
import pytest

from perfrank.core.config import Settings
from perfrank.core.exceptions import (
    ConfigurationError,
    DegenerateInputError,
    DimensionMismatchError,
    IngestionError,
    NonFiniteValueError,
    RoundDivergenceError,
)
from perfrank.core.schemas import CandidateList, GroundTruthPref, HyperParams, ItemFeatures, MarketState, UserRep
from perfrank.core.services import build_market_state, ground_truth_pref, ground_truth_prefs, make_rng, score


def e(i, d=3):
    v = np.zeros(d)
    v[i] = 1.0
    return v


# ==================== PART 1: scoring ====================

def test_score_unit_self_product():
    assert score(UserRep(id=0, u=e(0)), ItemFeatures(id=0, x=e(0))) == pytest.approx(1.0)


def test_score_orthogonal():
    assert score(UserRep(id=0, u=e(0)), ItemFeatures(id=0, x=e(1))) == pytest.approx(0.0)


def test_score_hand_arithmetic():
    assert score(UserRep(id=0, u=[0.6, 0.8]), ItemFeatures(id=0, x=[0.8, 0.6])) == pytest.approx(0.96, abs=1e-12)


def test_score_dimension_mismatch():
    with pytest.raises(DimensionMismatchError):
        score(UserRep(id=0, u=[1.0, 0.0]), ItemFeatures(id=0, x=e(0)))


def test_ground_truth_pref_singleton():
    items = [ItemFeatures(id=0, x=e(0))]
    pref = ground_truth_pref(CandidateList(user_id=0, items=(0,)), items)
    np.testing.assert_allclose(pref.u_star, e(0))


def test_ground_truth_pref_two_basis_vectors():
    items = np.stack([e(0), e(1)])
    pref = ground_truth_pref(CandidateList(user_id=4, items=(0, 1)), items)
    np.testing.assert_allclose(pref.u_star, [1 / np.sqrt(2), 1 / np.sqrt(2), 0.0], atol=1e-12)
    assert pref.id == 4


def test_ground_truth_pref_zero_mean():
    items = np.stack([e(0), -e(0)])
    with pytest.raises(DegenerateInputError, match="degenerate candidate set"):
        ground_truth_pref(CandidateList(user_id=0, items=(0, 1)), items)


def test_ground_truth_prefs_matches_single_user_form(tiny_market):
    state, _ = tiny_market
    prefs = ground_truth_prefs(state.candidates, state.items)
    for i in range(state.m):
        single = ground_truth_pref(state.candidate_list(i), state.items)
        np.testing.assert_allclose(prefs[i], single.u_star, atol=1e-12)


# ==================== PART 2: types ====================

def test_item_features_must_be_unit_norm():
    with pytest.raises(ConfigurationError):
        ItemFeatures(id=0, x=[1.0, 1.0])


def test_item_features_reject_non_finite():
    with pytest.raises(ConfigurationError):
        ItemFeatures(id=0, x=[np.nan, 1.0])


def test_vectors_are_frozen():
    item = ItemFeatures(id=0, x=e(1))
    with pytest.raises(ValueError):
        item.x[0] = 1.0


def test_ground_truth_pref_must_be_unit_norm():
    with pytest.raises(ConfigurationError):
        GroundTruthPref(id=0, u_star=[2.0, 0.0])


def test_candidate_list_rejects_duplicates():
    with pytest.raises(ValueError):
        CandidateList(user_id=0, items=(1, 2, 1))


def test_hyperparams_protocol_defaults():
    hyper = HyperParams()
    assert (hyper.k, hyper.rounds, hyper.tau1, hyper.tau2, hyper.learning_rate, hyper.epochs) == (10, 10, 0.1, 1.0, 0.1, 100)
    assert hyper.training_size == hyper.c - 10


def test_hyperparams_k_above_c_names_both_fields():
    with pytest.raises(ValueError) as info:
        HyperParams(k=12, c=10, train_holdout=0)
    message = str(info.value)
    assert "k (12)" in message and "c (10)" in message


def test_hyperparams_lambda_alias():
    assert HyperParams(**{"lambda": 5}).lambda_ == 5.0


def test_hyperparams_reject_unknown_keys():
    with pytest.raises(ValueError):
        HyperParams(temperature=3)


def test_settings_read_prefixed_environment(monkeypatch):
    monkeypatch.setenv("PERFRANK_THREADS", "3")
    assert Settings().THREADS == 3


# ==================== PART 3: market state ====================

def test_build_market_state_is_seeded(tiny_market):
    state, _ = tiny_market
    again = build_market_state(state.items, state.candidates, seed=3)
    np.testing.assert_array_equal(again.users, state.users)
    np.testing.assert_array_equal(again.prefs, state.prefs)


def test_market_state_shapes(tiny_market):
    state, _ = tiny_market
    assert (state.m, state.n, state.d, state.c) == (12, 40, 6, 8)
    np.testing.assert_allclose(np.linalg.norm(state.items, axis=1), 1.0, atol=1e-9)


def test_market_state_rejects_out_of_range_candidates(tiny_market):
    state, _ = tiny_market
    candidates = np.array(state.candidates)
    candidates[0, 0] = state.n
    with pytest.raises(ValueError):
        MarketState(items=state.items, users=state.users, candidates=candidates, prefs=state.prefs)


def test_advance_keeps_candidates_and_prefs(tiny_market):
    state, _ = tiny_market
    following = state.advance(state.items, state.users + 1.0)
    assert following.round == state.round + 1
    assert following.candidates is state.candidates
    assert following.prefs is state.prefs
    np.testing.assert_array_equal(following.users, state.users + 1.0)


# ==================== PART 4: streams and errors ====================

def test_streams_do_not_share_draws():
    for seed in (0, 3, 17):
        draws = {stream: make_rng(seed, stream=stream).normal(size=5) for stream in ("round", "market", "ingest", "warm_start")}
        for first in draws:
            for second in draws:
                if first != second:
                    assert not np.allclose(draws[first], draws[second])


def test_warm_start_noise_is_independent_of_round_one(tiny_market):
    state, _ = tiny_market
    noise = state.users - state.prefs
    round_one = 0.1 * make_rng(3, 0).normal(size=state.prefs.shape)
    assert not np.allclose(noise, round_one)
    np.testing.assert_allclose(noise, 0.1 * make_rng(3, stream="warm_start").normal(size=state.prefs.shape), atol=1e-12)


def test_round_generator_offsets_the_seed():
    np.testing.assert_array_equal(make_rng(5, 2).normal(size=3), np.random.default_rng(7).normal(size=3))


def test_round_divergence_error_pickles_with_its_fields():
    error = RoundDivergenceError("agent_based_l10", 3, "loss is nan")
    restored = pickle.loads(pickle.dumps(error))
    assert type(restored) is RoundDivergenceError
    assert (restored.policy, restored.round, restored.detail) == (error.policy, 3, error.detail)
    assert str(restored) == str(error) == "policy 'agent_based_l10' diverged in round 3: loss is nan"
    assert restored.exit_code == 1


@pytest.mark.parametrize("error", [
    NonFiniteValueError("sinkhorn"),
    IngestionError("2 malformed rows", report={"errors": 2}),
    ConfigurationError("bad", messages=["line 3: bad"]),
])
def test_errors_survive_pickling(error):
    restored = pickle.loads(pickle.dumps(error))
    assert type(restored) is type(error)
    assert str(restored) == str(error)
    assert restored.__dict__ == error.__dict__
