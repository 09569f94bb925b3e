"""
Tests for perfrank.dynamics.

This tests:
- PART 1: Policies and per-user losses
- PART 2: One round of training and the creators' response
- PART 3: MMR re-ranking and exact evaluation
- PART 4: Multi-round runs
- PART 5: Trends on the desk-scale synthetic market (slow)
"""

from pathlib import Path

import numpy as np
import pytest
import torch

from perfrank.agent.services import apply_agent
from perfrank.core.exceptions import ConfigurationError, RoundDivergenceError
from perfrank.core.schemas import HyperParams
from perfrank.diffrank.services import exact_rank
from perfrank.dynamics.schemas import Policy, PolicyVariant
from perfrank.dynamics.services import (
    evaluate_state,
    mmr_rerank,
    ranking_metrics,
    run_dynamics,
    train_round,
    training_subsets,
    user_loss,
)
from perfrank.gradengine.services import backward
from perfrank.harness.services import build_report, cmd_baseline_metrics, load_config, prepare_market, prepare_simulator
from perfrank.simulator.services import category_array

SMALL = dict(k=3, c=8, train_holdout=2, epochs=3, rounds=2, batch_size=5)
SYNTHETIC_CONFIG = Path(__file__).parent / "configs" / "synthetic.yaml"


def _loss(state, model, policy, user=0, u=None):
    u = torch.tensor(state.users[user] if u is None else u, requires_grad=True)
    return u, user_loss(u, state.candidates[user], state.items, state.prefs[user], model, policy)


# ==================== PART 1: policies and losses ====================

@pytest.mark.parametrize("variant", [PolicyVariant.ACCURACY_ONLY, PolicyVariant.MMR])
def test_unregularised_variants_drop_lambda(variant):
    policy = Policy(name="p", variant=variant, hyper=HyperParams(lambda_=7.0))
    assert policy.hyper.lambda_ == 0.0


def test_non_retraining_does_not_train():
    assert not Policy(name="p", variant=PolicyVariant.NON_RETRAINING).trains


def test_without_fairness_weight_the_variants_agree(tiny_market, random_model, make_policy):
    state, _ = tiny_market
    _, agent = _loss(state, random_model, make_policy("agent_based", lambda_=0.0, **SMALL))
    _, plain = _loss(state, random_model, make_policy("non_agent", lambda_=0.0, **SMALL))
    _, accuracy = _loss(state, random_model, make_policy("accuracy_only", **SMALL))
    assert float(agent) == float(plain) == float(accuracy)


def test_zero_lambda_gradient_has_no_fairness_part(tiny_market, random_model, make_policy):
    state, _ = tiny_market
    u_agent, agent = _loss(state, random_model, make_policy("agent_based", lambda_=0.0, **SMALL))
    u_plain, plain = _loss(state, random_model, make_policy("accuracy_only", **SMALL))
    torch.testing.assert_close(backward(agent, {"u": u_agent})["u"], backward(plain, {"u": u_plain})["u"])


def test_costly_modification_makes_agent_loss_match_non_agent(tiny_market, random_model, make_policy):
    state, _ = tiny_market
    _, agent = _loss(state, random_model, make_policy("agent_based", lambda_=5.0, alpha=1e6, **SMALL))
    _, plain = _loss(state, random_model, make_policy("non_agent", lambda_=5.0, alpha=1e6, **SMALL))
    assert abs(float(agent) - float(plain)) < 1e-4


def test_fairness_term_changes_the_loss(tiny_market, random_model, make_policy):
    state, _ = tiny_market
    _, fair = _loss(state, random_model, make_policy("non_agent", lambda_=5.0, **SMALL))
    _, plain = _loss(state, random_model, make_policy("accuracy_only", **SMALL))
    assert float(fair) < float(plain)


def test_loss_is_differentiable_in_the_user(tiny_market, random_model, make_policy):
    state, _ = tiny_market
    u, loss = _loss(state, random_model, make_policy("agent_based", lambda_=5.0, **SMALL))
    grad = backward(loss, {"u": u})["u"]
    assert grad.shape == (state.d,)
    assert torch.isfinite(grad).all()
    assert grad.abs().sum() > 0


# ==================== PART 2: train_round ====================

def test_training_subsets_are_seeded_subsets(tiny_market):
    state, _ = tiny_market
    subsets = training_subsets(state.candidates, 5, np.random.default_rng(3))
    again = training_subsets(state.candidates, 5, np.random.default_rng(3))
    np.testing.assert_array_equal(subsets, again)
    for row, candidates in zip(subsets, state.candidates):
        assert len(set(row)) == 5
        assert set(row) <= set(candidates)


def test_zero_epochs_keep_users_but_creators_still_respond(tiny_market, tiny_model, make_policy):
    state, _ = tiny_market
    outcome = train_round(state, make_policy("accuracy_only", **{**SMALL, "epochs": 0}), tiny_model)
    np.testing.assert_array_equal(outcome.users, state.users)
    np.testing.assert_allclose(outcome.items, apply_agent(state, 1.0).items)
    assert outcome.trace == []


def test_non_retraining_keeps_users(tiny_market, tiny_model, make_policy):
    state, _ = tiny_market
    outcome = train_round(state, make_policy("non_retraining", **SMALL), tiny_model)
    np.testing.assert_array_equal(outcome.users, state.users)


def test_training_moves_users_and_traces_epochs(tiny_market, tiny_model, make_policy):
    state, _ = tiny_market
    outcome = train_round(state, make_policy("agent_based", lambda_=2.0, **SMALL), tiny_model)
    assert not np.allclose(outcome.users, state.users)
    assert [epoch.epoch for epoch in outcome.trace] == [1, 2, 3]
    assert all(epoch.dr_gini is not None for epoch in outcome.trace)
    assert all(0.0 <= epoch.dr_ndcg <= 1.0 for epoch in outcome.trace)


def test_accuracy_trace_has_no_fairness_term(tiny_market, tiny_model, make_policy):
    state, _ = tiny_market
    outcome = train_round(state, make_policy("accuracy_only", optimizer="sgd", **SMALL), tiny_model)
    assert all(epoch.dr_gini is None for epoch in outcome.trace)


def test_accuracy_training_raises_ndcg_over_epochs(tiny_market, tiny_model, make_policy):
    state, _ = tiny_market
    policy = make_policy(
        "accuracy_only", k=3, c=8, train_holdout=2, epochs=20, batch_size=64, optimizer="adam", learning_rate=0.01,
    )
    ndcg = np.array([epoch.dr_ndcg for epoch in train_round(state, policy, tiny_model).trace])
    windows = ndcg.reshape(4, 5).mean(axis=1)
    assert np.all(np.diff(windows) >= -1e-6), windows
    assert windows[-1] > windows[0]


def test_round_rejects_mismatched_candidate_size(tiny_market, tiny_model, make_policy):
    state, _ = tiny_market
    with pytest.raises(ConfigurationError, match="does not match"):
        train_round(state, make_policy("accuracy_only", k=3, c=10, train_holdout=2), tiny_model)


def test_divergence_names_policy_and_round(tiny_market, tiny_model, make_policy):
    state, _ = tiny_market
    exploded = state.with_users(state.prefs * 1e308)
    with pytest.raises(RoundDivergenceError, match="'blowup' diverged in round 1"):
        train_round(exploded, make_policy("accuracy_only", name="blowup", **SMALL), tiny_model)


# ==================== PART 3: MMR and evaluation ====================

def test_mmr_with_full_relevance_weight_is_score_order(rng):
    scores = rng.normal(size=9)
    features = rng.normal(size=(9, 4))
    np.testing.assert_array_equal(mmr_rerank(scores, features, k=4, beta=1.0).perm, exact_rank(scores).perm)


def test_mmr_skips_a_duplicate():
    scores = np.array([1.0, 0.99, 0.5])
    features = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    assert mmr_rerank(scores, features, k=2, beta=0.5).perm.tolist() == [0, 2, 1]


def test_mmr_single_pick_is_top_score():
    scores = np.array([0.2, 0.7, 0.1])
    assert mmr_rerank(scores, np.eye(3), k=1, beta=0.0).perm[0] == 1


@pytest.mark.parametrize("k, beta", [(0, 0.5), (4, 0.5), (2, 1.5)])
def test_mmr_rejects_bad_arguments(k, beta):
    with pytest.raises(ConfigurationError):
        mmr_rerank(np.array([0.3, 0.2, 0.1]), np.eye(3), k=k, beta=beta)


def test_ranking_metrics_counts_categories():
    relevance = np.array([[0.9, 0.5, 0.1], [0.2, 0.8, 0.4]])
    perms = [np.array([0, 1, 2]), np.array([1, 2, 0])]
    categories = np.array([[1, 5, 3], [2, 2, 4]])
    ndcg, gini, freq = ranking_metrics(relevance, perms, categories, k=2)
    assert ndcg == pytest.approx(1.0)
    assert freq == (0.5, 0.5, 0.0, 0.5, 0.5)
    assert 0.0 <= gini <= 1.0


# ==================== PART 4: run_dynamics ====================

def test_single_round(tiny_market, tiny_model, make_policy):
    state, _ = tiny_market
    records = run_dynamics(state, make_policy("non_agent", lambda_=2.0, **SMALL), tiny_model, rounds=1)
    assert [record.round for record in records] == [1]
    assert sum(records[0].category_freq) == pytest.approx(3.0)


def test_rounds_must_be_positive(tiny_market, tiny_model, make_policy):
    state, _ = tiny_market
    with pytest.raises(ConfigurationError):
        run_dynamics(state, make_policy("accuracy_only", **SMALL), tiny_model, rounds=0)


def test_runs_are_reproducible(tiny_market, tiny_model, make_policy):
    state, _ = tiny_market
    policy = make_policy("agent_based", lambda_=2.0, **SMALL)
    assert run_dynamics(state, policy, tiny_model) == run_dynamics(state, policy, tiny_model)


def test_each_round_starts_from_the_creators_response(tiny_market, tiny_model, make_policy):
    state, _ = tiny_market
    outcomes = []
    records = run_dynamics(
        state, make_policy("accuracy_only", **SMALL), tiny_model, rounds=2,
        on_round=lambda record, outcome: outcomes.append(outcome),
    )
    assert len(records) == len(outcomes) == 2

    replay = train_round(state.advance(outcomes[0].items, outcomes[0].users), make_policy("accuracy_only", **SMALL), tiny_model)
    np.testing.assert_array_equal(replay.users, outcomes[1].users)


def test_rounds_are_scored_on_the_responded_items(tiny_market, tiny_model, make_policy):
    state, _ = tiny_market
    policy = make_policy("agent_based", lambda_=2.0, **SMALL)
    outcomes = []
    (record,) = run_dynamics(state, policy, tiny_model, rounds=1, on_round=lambda r, outcome: outcomes.append(outcome))
    categories = category_array(state.candidates, state.n)
    responded = evaluate_state(state.advance(outcomes[0].items, outcomes[0].users), tiny_model, policy, categories)
    assert record.mean_ndcg_at_k == pytest.approx(responded[0], abs=1e-12)
    assert record.mean_gini_at_k == pytest.approx(responded[1], abs=1e-12)
    np.testing.assert_allclose(record.category_freq, responded[2], atol=1e-12)


def test_non_retraining_users_never_change(tiny_market, tiny_model, make_policy):
    state, _ = tiny_market
    seen = []
    run_dynamics(
        state, make_policy("non_retraining", **SMALL), tiny_model, rounds=3,
        on_round=lambda record, outcome: seen.append(outcome.users),
    )
    for users in seen:
        np.testing.assert_array_equal(users, state.users)


def test_mmr_policy_runs(tiny_market, tiny_model, make_policy):
    state, _ = tiny_market
    records = run_dynamics(state, make_policy("mmr", mmr_beta=0.3, **SMALL), tiny_model, rounds=1)
    assert 0.0 <= records[0].mean_ndcg_at_k <= 1.0


# ==================== PART 5: desk-scale trends ====================

@pytest.fixture(scope="module")
def synthetic_run():
    config = load_config(SYNTHETIC_CONFIG)
    state, log, _ = prepare_market(config)
    model, _ = prepare_simulator(config, state, log)
    baseline = cmd_baseline_metrics(state, model, config.hyper.k, config.popularity_boundaries)
    wanted = {"accuracy_only", "agent_based_l10", "non_agent_l10"}
    records = {
        policy.name: run_dynamics(state, policy, model, boundaries=config.popularity_boundaries)
        for policy in config.build_policies()
        if policy.name in wanted
    }
    return baseline, records


@pytest.mark.slow
def test_accuracy_only_ndcg_does_not_fall(synthetic_run):
    _, records = synthetic_run
    accuracy = records["accuracy_only"]
    assert accuracy[-1].round == 6
    assert accuracy[-1].mean_ndcg_at_k >= accuracy[0].mean_ndcg_at_k


@pytest.mark.slow
def test_agent_based_is_fairer_than_accuracy_only(synthetic_run):
    _, records = synthetic_run
    assert records["agent_based_l10"][-1].mean_gini_at_k >= records["accuracy_only"][-1].mean_gini_at_k + 0.02


@pytest.mark.slow
def test_agent_based_is_at_least_as_fair_as_non_agent(synthetic_run):
    _, records = synthetic_run
    assert records["agent_based_l10"][-1].mean_gini_at_k >= records["non_agent_l10"][-1].mean_gini_at_k


@pytest.mark.slow
def test_agent_based_shifts_exposure_away_from_the_head(synthetic_run):
    baseline, records = synthetic_run
    assert records["agent_based_l10"][-1].category_freq[4] < baseline.category_freq[4]


@pytest.mark.slow
def test_accuracy_only_concentrates_on_the_head_category(synthetic_run):
    baseline, records = synthetic_run
    report = build_report(records["accuracy_only"], baseline, compare_rounds=[1, 6])
    shifts = {shift.round: shift.category_freq for shift in report.shifts}
    assert set(shifts) == {0, 1, 6}
    assert shifts[6][4] >= shifts[1][4]
