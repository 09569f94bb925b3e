"""
Tests for perfrank.agent.

This tests:
- PART 1: Audience vectors and creator utility
- PART 2: Closed-form best response against the numerical oracle
- PART 3: apply_agent over a whole market, and the differentiable form
"""

import time

import numpy as np
import pytest
import torch

from perfrank.agent.schemas import AudienceVector
from perfrank.agent.services import (
    anticipate,
    apply_agent,
    audience_vector,
    best_response,
    item_utility,
    oracle_best_response,
    response_objective,
)
from perfrank.core.schemas import CandidateList, ItemFeatures, MarketState, UserRep
from perfrank.simulator.synthetic import generate_synthetic_market


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def random_unit(rng, d):
    return unit(rng.normal(size=d))


# ==================== PART 1: audience and utility ====================

def test_audience_vector_single_user():
    users = [UserRep(id=0, u=[3.0, 4.0])]
    candidates = [CandidateList(user_id=0, items=(7,))]
    audience = audience_vector(7, users, candidates)
    np.testing.assert_allclose(audience.w_hat, [0.6, 0.8])
    assert audience.audience_size == 1


def test_audience_vector_zero_mean_skips_item():
    users = np.array([[1.0, 2.0], [-1.0, -2.0]])
    candidates = np.array([[0], [0]])
    assert audience_vector(0, users, candidates) is None


def test_audience_vector_empty_audience():
    assert audience_vector(3, np.array([[1.0, 0.0]]), np.array([[0]])) is None


def test_audience_vector_identical_users():
    u = unit([1.0, -2.0, 2.0])
    audience = audience_vector(1, np.stack([u, u, u]), np.array([[1], [1], [1]]))
    np.testing.assert_allclose(audience.w_hat, u)


def test_item_utility_examples():
    w_hat = AudienceVector(item_id=0, w_hat=[0.6, 0.8], audience_size=1)
    assert item_utility(ItemFeatures(id=0, x=[0.6, 0.8]), w_hat) == pytest.approx(1.0)
    assert item_utility(ItemFeatures(id=0, x=[-0.8, 0.6]), w_hat) == pytest.approx(0.0, abs=1e-15)
    assert item_utility(ItemFeatures(id=0, x=[1.0, 0.0]), w_hat) == pytest.approx(0.6)


# ==================== PART 2: best response ====================

def test_best_response_without_cost_is_audience(rng):
    x = ItemFeatures(id=0, x=random_unit(rng, 5))
    w_hat = AudienceVector(item_id=0, w_hat=random_unit(rng, 5), audience_size=2)
    np.testing.assert_allclose(best_response(x, w_hat, alpha=0.0).x, w_hat.w_hat, atol=1e-12)


def test_best_response_aligned_item_stays(rng):
    v = random_unit(rng, 4)
    x = ItemFeatures(id=0, x=v)
    for alpha in (0.0, 0.5, 3.0):
        np.testing.assert_allclose(best_response(x, AudienceVector(item_id=0, w_hat=v, audience_size=1), alpha).x, v, atol=1e-12)


def test_best_response_large_alpha_barely_moves():
    x = ItemFeatures(id=0, x=[1.0, 0.0, 0.0])
    w_hat = AudienceVector(item_id=0, w_hat=[0.0, 1.0, 0.0], audience_size=1)
    assert np.linalg.norm(best_response(x, w_hat, alpha=1e6).x - x.x) < 1e-5


def test_best_response_degenerate_keeps_item():
    x = ItemFeatures(id=0, x=[0.0, 1.0])
    w_hat = AudienceVector(item_id=0, w_hat=[0.0, -1.0], audience_size=1)
    assert best_response(x, w_hat, alpha=0.5) is x


def test_oracle_without_cost_converges_to_audience(rng):
    x = ItemFeatures(id=0, x=random_unit(rng, 6))
    w_hat = AudienceVector(item_id=0, w_hat=random_unit(rng, 6), audience_size=1)
    np.testing.assert_allclose(oracle_best_response(x, w_hat, alpha=0.0).x, w_hat.w_hat, atol=1e-6)


def test_oracle_matches_angle_grid_in_two_dimensions(rng):
    angles = np.linspace(0.0, 2.0 * np.pi, 2_000_001)
    circle = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    for alpha in (0.5, 2.0):
        x = ItemFeatures(id=0, x=random_unit(rng, 2))
        w_hat = AudienceVector(item_id=0, w_hat=random_unit(rng, 2), audience_size=1)
        grid_best = circle[np.argmax(response_objective(circle, x.x, w_hat.w_hat, alpha))]
        assert np.linalg.norm(oracle_best_response(x, w_hat, alpha).x - grid_best) < 1e-5


def test_oracle_improves_on_original_item(rng):
    x = ItemFeatures(id=0, x=random_unit(rng, 8))
    w_hat = AudienceVector(item_id=0, w_hat=random_unit(rng, 8), audience_size=1)
    found = oracle_best_response(x, w_hat, alpha=1.0).x
    assert response_objective(found, x.x, w_hat.w_hat, 1.0) >= response_objective(x.x, x.x, w_hat.w_hat, 1.0)


def test_closed_form_matches_oracle_and_dominates_random_points():
    rng = np.random.default_rng(2024)
    started = time.perf_counter()
    for instance in range(200):
        d = int(rng.choice([4, 16, 43]))
        alpha = float(rng.choice([0.5, 1.0, 3.0, 5.0]))
        x = ItemFeatures(id=instance, x=random_unit(rng, d))
        w_hat = AudienceVector(item_id=instance, w_hat=random_unit(rng, d), audience_size=1)

        closed = best_response(x, w_hat, alpha).x
        oracle = oracle_best_response(x, w_hat, alpha, seed=instance).x
        assert np.linalg.norm(closed - oracle) < 1e-5, (instance, d, alpha)

        others = rng.normal(size=(1000, d))
        others /= np.linalg.norm(others, axis=1, keepdims=True)
        best = response_objective(closed, x.x, w_hat.w_hat, alpha)
        assert np.all(response_objective(others, x.x, w_hat.w_hat, alpha) <= best + 1e-12)
    assert time.perf_counter() - started < 30.0


# ==================== PART 3: apply_agent ====================

def _market(items, users, candidates):
    return MarketState(items=items, users=users, candidates=candidates, prefs=items[candidates[:, 0]])


def test_apply_agent_users_equal_to_items_leaves_items():
    items = np.eye(3)
    state = _market(items, items.copy(), np.array([[0], [1], [2]]))
    response = apply_agent(state, alpha=1.0)
    np.testing.assert_allclose(response.items, items, atol=1e-12)


def test_apply_agent_without_cost_moves_items_to_audience(tiny_market):
    state, _ = tiny_market
    response = apply_agent(state, alpha=0.0)
    for j in np.unique(state.candidates):
        audience = audience_vector(int(j), state.users, state.candidates)
        np.testing.assert_allclose(response.items[j], audience.w_hat, atol=1e-12)


def test_apply_agent_skips_items_without_audience(tiny_market):
    state, _ = tiny_market
    response = apply_agent(state, alpha=1.0)
    outside = np.setdiff1d(np.arange(state.n), state.candidates)
    np.testing.assert_array_equal(response.items[outside], state.items[outside])
    assert response.skipped == outside.size
    assert response.moved == state.n - outside.size


def test_apply_agent_improves_objective_and_keeps_unit_norm(tiny_market):
    state, _ = tiny_market
    alpha = 1.5
    response = apply_agent(state, alpha)
    np.testing.assert_allclose(np.linalg.norm(response.items, axis=1), 1.0, atol=1e-9)
    for j in np.unique(state.candidates):
        w_hat = audience_vector(int(j), state.users, state.candidates).w_hat
        before = response_objective(state.items[j], state.items[j], w_hat, alpha)
        after = response_objective(response.items[j], state.items[j], w_hat, alpha)
        assert after >= before - 1e-12


def test_apply_agent_counts_zero_mean_audience():
    items = np.eye(2)
    users = np.array([[1.0, 0.5], [-1.0, -0.5]])
    state = _market(items, users, np.array([[0], [0]]))
    response = apply_agent(state, alpha=1.0)
    assert response.warnings == 1
    np.testing.assert_array_equal(response.items, items)


def test_displacement_shrinks_with_alpha():
    state, _ = generate_synthetic_market(m=60, n=200, d=16, c=20, popularity_skew=1.2, seed=0)
    aggressive = apply_agent(state, alpha=1.0).mean_displacement
    cautious = apply_agent(state, alpha=5.0).mean_displacement
    assert cautious < aggressive


def test_anticipate_matches_closed_form(rng):
    x = np.stack([random_unit(rng, 5) for _ in range(4)])
    w = rng.normal(size=(4, 5)) * 3.0
    anticipated = anticipate(torch.tensor(x), torch.tensor(w), alpha=2.0).numpy()
    for j in range(4):
        expected = best_response(
            ItemFeatures(id=j, x=x[j]), AudienceVector(item_id=j, w_hat=unit(w[j]), audience_size=1), 2.0
        ).x
        np.testing.assert_allclose(anticipated[j], expected, atol=1e-12)
