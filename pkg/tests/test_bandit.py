"""Bandit core tests: the update chain oracle, probability laws, growth
rules, the reduction to the fixed-arm variant, and state serialization.

The worked numeric chain (eta = 0.5, arms a/b, then a newcomer c) was
derived by hand and double-checked with exact rational arithmetic; its
values are frozen below.
"""

from __future__ import annotations

import json
import math
from fractions import Fraction

import numpy as np
import pytest

from exp3ss.bandit import (
    BanditConfig,
    Exp3Fixed,
    Exp3SS,
    ScoreThreshold,
    StepOutcome,
    TopK,
    run_exp3_fixed,
    theoretical_eta,
    validate_rule,
)
from exp3ss.errors import ConfigurationError, SimulationError


def make_bandit(eta: float = 0.5, seed: int = 0, renormalize: bool = False) -> Exp3SS:
    return Exp3SS(BanditConfig(eta=eta, rng_seed=seed, renormalize=renormalize))


def test_config_rejects_eta_outside_open_interval() -> None:
    for eta in (0.0, 1.0, -0.1, 1.5):
        with pytest.raises(ConfigurationError):
            BanditConfig(eta=eta)


def test_config_validates_selection_rule() -> None:
    with pytest.raises(ConfigurationError):
        BanditConfig(selection_rule=TopK(0))
    with pytest.raises(ConfigurationError):
        BanditConfig(selection_rule=ScoreThreshold(1.5))
    validate_rule(TopK(3))
    validate_rule(ScoreThreshold(0.0))


def test_theoretical_eta_reference_values() -> None:
    assert theoretical_eta(100, 25) == pytest.approx(0.02, abs=1e-15)
    assert theoretical_eta(500, 50) == pytest.approx(1.0 / math.sqrt(25000), abs=1e-15)


def test_theoretical_eta_clamps_below_one() -> None:
    assert theoretical_eta(1, 1) < 1.0


def test_theoretical_eta_rejects_bad_inputs() -> None:
    with pytest.raises(ConfigurationError):
        theoretical_eta(0, 5)
    with pytest.raises(ConfigurationError):
        theoretical_eta(5, 0)


def test_fresh_bandit_is_empty() -> None:
    bandit = make_bandit()
    assert bandit.round == 0
    assert bandit.arms == []


def test_first_round_weights_are_uniform_eta_over_complement() -> None:
    # eta = 0.5, two arms: w = 0.5 / (0.5 * 2) = 0.5 each.
    bandit = make_bandit(eta=0.5)
    bandit.ingest_candidates(["a", "b"])
    assert bandit.weights == {"a": 0.5, "b": 0.5}
    assert bandit.round == 1


def test_first_round_empty_proposals_is_an_error() -> None:
    bandit = make_bandit()
    with pytest.raises(SimulationError):
        bandit.ingest_candidates([])


def test_later_round_accepts_empty_proposals() -> None:
    bandit = make_bandit(eta=0.5)
    bandit.ingest_candidates(["a", "b"])
    bandit.update("a", 0.0)
    bandit.ingest_candidates([])
    assert bandit.arms == ["a", "b"]
    assert bandit.round == 2


def test_proposals_normalized_and_deduplicated() -> None:
    bandit = make_bandit(eta=0.5)
    bandit.ingest_candidates(["Life Insurance!", "life   insurance", "car loans", ""])
    assert bandit.arms == ["life insurance", "car loans"]


def test_update_chain_oracle() -> None:
    # Round 1: w = {a: 0.5, b: 0.5}; play a at p = 0.5 with reward 1:
    # pseudo-reward 2, carried w_a = 0.5 * e.
    bandit = make_bandit(eta=0.5)
    bandit.ingest_candidates(["a", "b"])
    probs = bandit.compute_probabilities()
    assert probs["a"] == pytest.approx(0.5, abs=1e-15)
    outcome = bandit.update("a", 1.0)
    assert outcome == StepOutcome(chosen="a", probability=0.5, reward=1.0, pseudo_reward=2.0)
    assert bandit.carried_weights["a"] == pytest.approx(1.3591409142295225, abs=1e-12)
    assert bandit.carried_weights["b"] == 0.5


def test_newcomer_weight_is_eta_ratio_times_carried_mass() -> None:
    # Continuing the chain: proposals {c} alone; carried mass 0.5e + 0.5,
    # one newcomer: w_c = (0.5/0.5) * 1.8591409142295225 / 1.
    bandit = make_bandit(eta=0.5)
    bandit.ingest_candidates(["a", "b"])
    bandit.update("a", 1.0)
    new_arms = bandit.ingest_candidates(["c"])
    assert new_arms == ["c"]
    weights = bandit.weights
    assert weights["a"] == pytest.approx(1.3591409142295225, abs=1e-12)
    assert weights["b"] == 0.5
    assert weights["c"] == pytest.approx(1.8591409142295225, abs=1e-12)


def test_newcomer_mass_split_evenly_among_several() -> None:
    bandit = make_bandit(eta=0.5)
    bandit.ingest_candidates(["a", "b"])
    bandit.update("a", 1.0)
    bandit.ingest_candidates(["c", "d"])
    weights = bandit.weights
    assert weights["c"] == weights["d"]
    assert weights["c"] == pytest.approx(1.8591409142295225 / 2, abs=1e-12)


def test_carried_arms_keep_their_weights_exactly() -> None:
    bandit = make_bandit(eta=0.3)
    bandit.ingest_candidates(["a", "b", "c"])
    bandit.update("b", 1.0)
    carried = bandit.carried_weights
    bandit.ingest_candidates(["a", "c"])  # no newcomers
    assert bandit.weights == carried


def test_probability_oracle_three_arms() -> None:
    # Frozen from the chain above: p = (1-eta) w/W + eta/3 with eta = 0.5.
    bandit = make_bandit(eta=0.5)
    bandit.ingest_candidates(["a", "b"])
    bandit.update("a", 1.0)
    bandit.ingest_candidates(["c"])
    probs = bandit.compute_probabilities()
    assert probs["a"] == pytest.approx(0.3494313113241679, abs=1e-12)
    assert probs["b"] == pytest.approx(0.23390202200916543, abs=1e-12)
    assert probs["c"] == pytest.approx(0.41666666666666663, abs=1e-12)
    # Cross-check with exact rational arithmetic on the float weights.
    weights = bandit.weights
    total = Fraction(weights["a"]) + Fraction(weights["b"]) + Fraction(weights["c"])
    exact = Fraction(1, 2) * Fraction(weights["a"]) / total + Fraction(1, 6)
    assert probs["a"] == pytest.approx(float(exact), abs=1e-15)


def test_probabilities_uniform_for_symmetric_weights() -> None:
    bandit = make_bandit(eta=0.2)
    bandit.ingest_candidates(["a", "b", "c", "d"])
    probs = bandit.compute_probabilities()
    assert all(p == pytest.approx(0.25, abs=1e-15) for p in probs.values())


def test_single_arm_has_probability_one() -> None:
    bandit = make_bandit(eta=0.3)
    bandit.ingest_candidates(["only"])
    assert bandit.compute_probabilities()["only"] == pytest.approx(1.0, abs=1e-15)
    assert bandit.select_arm() == "only"


def test_probabilities_respect_exploration_floor_and_ceiling() -> None:
    bandit = make_bandit(eta=0.1)
    bandit.ingest_candidates(["a", "b", "c"])
    bandit.update("a", 1.0)
    bandit.ingest_candidates([])
    probs = bandit.compute_probabilities()
    n = 3
    for p in probs.values():
        assert p >= 0.1 / n - 1e-15
        assert p <= 0.9 + 0.1 / n + 1e-15
    assert sum(probs.values()) == pytest.approx(1.0, abs=1e-12)


def test_probabilities_invariant_under_weight_rescaling() -> None:
    bandit = make_bandit(eta=0.2)
    bandit.ingest_candidates(["a", "b", "c"])
    bandit.update("b", 1.0)
    bandit.ingest_candidates(["d"])
    before = bandit.probability_vector()
    bandit._weights = bandit._weights * 37.5
    bandit._probabilities = None
    after = bandit.probability_vector()
    assert np.allclose(before, after, atol=1e-12, rtol=0.0)


def test_select_arm_is_deterministic_for_a_seed() -> None:
    draws = []
    for _ in range(2):
        bandit = make_bandit(eta=0.2, seed=123)
        bandit.ingest_candidates(["a", "b", "c"])
        draws.append([bandit.select_arm() for _ in range(20)])
    assert draws[0] == draws[1]


def test_select_arm_frequency_matches_probabilities() -> None:
    # Two arms with p = {0.9, 0.1}: over 100k draws the empirical frequency
    # of the favored arm must land within three binomial sigmas of 0.9.
    eta = 0.2
    bandit = make_bandit(eta=eta, seed=7)
    bandit.ingest_candidates(["hot", "cold"])
    # Drive the weights so p(hot) = 0.9: (1-eta) wh/(wh+wc) + eta/2 = 0.9
    # => wh/(wh+wc) = 1.0, unreachable; instead pick weights directly.
    share = (0.9 - eta / 2) / (1 - eta)
    bandit._weights = np.array([share, 1.0 - share])
    bandit._probabilities = None
    probs = bandit.compute_probabilities()
    assert probs["hot"] == pytest.approx(0.9, abs=1e-12)
    n = 100_000
    hits = sum(1 for _ in range(n) if bandit.select_arm() == "hot")
    sigma = math.sqrt(0.9 * 0.1 / n)
    assert abs(hits / n - 0.9) <= 3 * sigma


def test_update_requires_known_arm() -> None:
    bandit = make_bandit()
    bandit.ingest_candidates(["a"])
    with pytest.raises(ValueError):
        bandit.update("missing", 1.0)


def test_update_without_ingest_is_an_error() -> None:
    bandit = make_bandit()
    bandit.ingest_candidates(["a"])
    bandit.update("a", 0.0)
    with pytest.raises(SimulationError):
        bandit.update("a", 0.0)


def test_double_ingest_is_an_error() -> None:
    bandit = make_bandit()
    bandit.ingest_candidates(["a"])
    with pytest.raises(SimulationError):
        bandit.ingest_candidates(["b"])


def test_zero_reward_leaves_weights_unchanged() -> None:
    bandit = make_bandit(eta=0.4)
    bandit.ingest_candidates(["a", "b"])
    before = bandit.weights
    outcome = bandit.update("a", 0.0)
    assert outcome.pseudo_reward == 0.0
    assert bandit.carried_weights == before


def test_rewards_are_clipped_at_the_update_boundary() -> None:
    bandit = make_bandit(eta=0.5)
    bandit.ingest_candidates(["a", "b"])
    outcome = bandit.update("a", 2.5)
    assert outcome.reward == 1.0
    assert outcome.pseudo_reward == 2.0

    bandit2 = make_bandit(eta=0.5)
    bandit2.ingest_candidates(["a", "b"])
    assert bandit2.update("a", -1.0).reward == 0.0


def test_pseudo_reward_is_reward_over_probability_exactly() -> None:
    bandit = make_bandit(eta=0.25, seed=5)
    bandit.ingest_candidates(["a", "b", "c"])
    probs = bandit.compute_probabilities()
    outcome = bandit.update("c", 1.0)
    assert outcome.pseudo_reward == 1.0 / probs["c"]


def test_update_exponent_never_exceeds_candidate_count() -> None:
    # eta * r / p <= eta / (eta/n) = n for any arm.
    rng = np.random.default_rng(3)
    bandit = Exp3SS(BanditConfig(eta=0.3, rng_seed=1, renormalize=True))
    bandit.ingest_candidates([f"q{i}" for i in range(6)])
    for t in range(200):
        if t > 0:
            bandit.ingest_candidates([f"q{6 + t}"] if t % 7 == 0 else [])
        arm = bandit.select_arm()
        outcome = bandit.update(arm, float(rng.integers(0, 2)))
        n = len(bandit.arms)
        assert bandit.config.eta * outcome.pseudo_reward <= n + 1e-9
        assert all(np.isfinite(w) and w > 0 for w in bandit._carried)


def test_renormalized_weights_sum_to_one_after_update() -> None:
    bandit = Exp3SS(BanditConfig(eta=0.2, renormalize=True))
    bandit.ingest_candidates(["a", "b", "c"])
    bandit.update("a", 1.0)
    assert sum(bandit.carried_weights.values()) == pytest.approx(1.0, abs=1e-12)


def test_renormalization_does_not_change_probabilities() -> None:
    # Same proposals, same arms, same rewards with renormalization on and
    # off: every round's probability vector agrees.
    def drive(renormalize: bool) -> list[np.ndarray]:
        bandit = Exp3SS(BanditConfig(eta=0.15, rng_seed=9, renormalize=renormalize))
        rng = np.random.default_rng(11)
        vectors = []
        for t in range(100):
            proposals = [f"q{int(rng.integers(0, 12))}"] if t > 0 else ["q0", "q1", "q2"]
            bandit.ingest_candidates(proposals)
            vectors.append(bandit.probability_vector())
            arm = bandit.select_arm()
            bandit.update(arm, float(rng.integers(0, 2)))
        return vectors

    on = drive(True)
    off = drive(False)
    for vec_on, vec_off in zip(on, off):
        assert np.allclose(vec_on, vec_off, atol=1e-9, rtol=0.0)


def test_probability_simplex_fuzz() -> None:
    # Randomized ingest/select/update cycles: probabilities stay a simplex
    # with the eta/n exploration floor, candidates never shrink.
    rng = np.random.default_rng(17)
    for session in range(20):
        eta = float(rng.uniform(0.02, 0.6))
        bandit = Exp3SS(BanditConfig(eta=eta, rng_seed=session, renormalize=True))
        previous_arms: list[str] = []
        for t in range(50):
            fresh = [f"s{session}q{int(rng.integers(0, 40))}" for _ in range(3)]
            if t == 0:
                bandit.ingest_candidates(fresh + ["base0", "base1"])
            else:
                bandit.ingest_candidates(fresh if rng.random() < 0.7 else [])
            assert bandit.arms[: len(previous_arms)] == previous_arms
            previous_arms = list(bandit.arms)
            probs = bandit.probability_vector()
            n = len(bandit.arms)
            assert abs(probs.sum() - 1.0) <= 1e-9
            assert (probs >= eta / n - 1e-12).all()
            bandit.update(bandit.select_arm(), float(rng.random()))


def test_reduces_to_fixed_arm_variant_when_no_arms_arrive() -> None:
    arms = [f"q{i}" for i in range(8)]
    rewards = np.random.default_rng(23).integers(0, 2, size=(60, 8)).astype(float)

    grower = Exp3SS(BanditConfig(eta=0.12, rng_seed=77, renormalize=True))
    fixed = Exp3Fixed(arms, 0.12, rng_seed=77, renormalize=True)
    for t in range(60):
        grower.ingest_candidates(arms)
        assert np.allclose(
            grower.probability_vector(), fixed.probability_vector(), atol=1e-12, rtol=0.0
        )
        arm_grower = grower.select_arm()
        arm_fixed = fixed.select_arm()
        assert arm_grower == arm_fixed
        reward = rewards[t][arms.index(arm_grower)]
        grower.update(arm_grower, reward)
        fixed.update(arm_fixed, reward)


def test_pseudo_reward_estimator_is_unbiased_at_a_frozen_state() -> None:
    bandit = make_bandit(eta=0.3, seed=101)
    bandit.ingest_candidates(["a", "b", "c", "d"])
    bandit.update("a", 1.0)
    bandit.ingest_candidates([])
    probs = bandit.compute_probabilities()
    per_arm_reward = {"a": 1.0, "b": 0.5, "c": 0.0, "d": 0.8}
    n = 20_000
    sums = {arm: 0.0 for arm in probs}
    for _ in range(n):
        arm = bandit.select_arm()
        sums[arm] += per_arm_reward[arm] / probs[arm]
    for arm, p in probs.items():
        rho = per_arm_reward[arm]
        mean = sums[arm] / n
        sigma = (rho / p) * math.sqrt(p * (1 - p) / n)
        assert abs(mean - rho) <= 3 * sigma + 1e-12


def test_fixed_bandit_single_arm_always_plays_it() -> None:
    bandit = Exp3Fixed(["only"], 0.2, rng_seed=1)
    assert [bandit.select_arm() for _ in range(5)] == ["only"] * 5
    assert bandit.compute_probabilities()["only"] == pytest.approx(1.0, abs=1e-15)


def test_fixed_bandit_rejects_empty_arms_and_bad_eta() -> None:
    with pytest.raises(SimulationError):
        Exp3Fixed([], 0.2)
    with pytest.raises(ConfigurationError):
        Exp3Fixed(["a"], 1.0)


def test_run_fixed_concentrates_on_the_rewarding_arm() -> None:
    # One arm always pays 1, the rest pay 0. The payer's play frequency
    # climbs out of the uniform start and settles at the exploration
    # ceiling (1 - eta) + eta/4 = 0.94, averaged across 20 seeds.
    arms = ["good", "bad1", "bad2", "bad3"]
    horizon = 1200
    windows = 4
    width = horizon // windows
    frequencies = np.zeros(windows)
    for seed in range(20):
        trace = run_exp3_fixed(
            arms,
            0.08,
            lambda t, arm: 1.0 if arm == "good" else 0.0,
            horizon,
            rng_seed=seed,
        )
        plays = np.array([1.0 if c == "good" else 0.0 for c in trace.chosen])
        frequencies += [plays[i * width : (i + 1) * width].mean() for i in range(windows)]
    frequencies /= 20
    assert frequencies[0] < frequencies[1]
    assert all(frequencies[i] > 0.9 for i in range(1, windows))
    assert abs(frequencies[-1] - 0.94) < 0.02


def test_run_fixed_traces_are_bit_identical_for_a_seed() -> None:
    def one() -> list[str]:
        trace = run_exp3_fixed(
            ["a", "b", "c"],
            0.2,
            lambda t, arm: 1.0 if arm == "b" else 0.0,
            40,
            rng_seed=99,
        )
        return trace.chosen

    assert one() == one()


def test_run_fixed_validates_horizon() -> None:
    with pytest.raises(ConfigurationError):
        run_exp3_fixed(["a"], 0.2, lambda t, a: 0.0, 0)


def test_state_round_trips_through_json_and_continues_identically() -> None:
    rng = np.random.default_rng(31)
    bandit = Exp3SS(BanditConfig(eta=0.2, rng_seed=55, renormalize=True))
    for t in range(10):
        bandit.ingest_candidates([f"q{int(rng.integers(0, 9))}"] if t else ["q0", "q1"])
        bandit.update(bandit.select_arm(), float(rng.integers(0, 2)))

    snapshot = json.loads(json.dumps(bandit.to_state_dict()))
    resumed = Exp3SS.from_state_dict(snapshot)
    assert resumed.arms == bandit.arms
    assert resumed.carried_weights == bandit.carried_weights

    for t in range(10):
        proposals = [f"q{int(rng.integers(0, 9))}"]
        bandit.ingest_candidates(list(proposals))
        resumed.ingest_candidates(list(proposals))
        assert np.array_equal(bandit.probability_vector(), resumed.probability_vector())
        arm_a, arm_b = bandit.select_arm(), resumed.select_arm()
        assert arm_a == arm_b
        reward = float(rng.integers(0, 2))
        bandit.update(arm_a, reward)
        resumed.update(arm_b, reward)
    assert bandit.carried_weights == resumed.carried_weights


def test_state_weights_serialize_with_17_significant_digits() -> None:
    bandit = make_bandit(eta=0.3)
    bandit.ingest_candidates(["a", "b", "c"])
    bandit.update("a", 1.0)
    state = bandit.to_state_dict()
    for encoded, live in zip(state["weights"], bandit._weights):
        assert float(encoded) == live
    for encoded, live in zip(state["carried_weights"], bandit._carried):
        assert float(encoded) == live


def test_state_rejects_unknown_format_version() -> None:
    bandit = make_bandit()
    bandit.ingest_candidates(["a"])
    state = bandit.to_state_dict()
    state["format_version"] = 999
    with pytest.raises(ConfigurationError):
        Exp3SS.from_state_dict(state)
