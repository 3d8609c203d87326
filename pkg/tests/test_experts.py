"""Expert tests: context handling, selection rules, the adjacency and
n-gram generators against hand-computed oracles, the candidate union, and
artifact persistence.

Oracle values below were derived by hand from the scoring formulas before
being frozen (Jaccard-weighted smoothed transition ratios for adjacency;
exp(mean log-probability) beam scores for the n-gram model).
"""

from __future__ import annotations

import json

import pytest

from exp3ss.bandit import ScoreThreshold, TopK
from exp3ss.data import QueryLog, Session
from exp3ss.errors import ConfigurationError, DataError, ExpertError
from exp3ss.experts import (
    AdjacencyExpert,
    ExpertRecommendation,
    NgramExpert,
    QueryContext,
    ScriptedExpert,
    apply_rule,
    expert_fingerprint,
    load_expert,
    save_expert,
    train_adjacency_expert,
    train_ngram_expert,
    union_candidates,
)


def make_log(sessions: list[list[str]]) -> QueryLog:
    return QueryLog(
        sessions=[
            Session(session_id=f"s{i}", queries=list(queries))
            for i, queries in enumerate(sessions)
        ]
    )


# --- contexts and rules ---


def test_context_normalizes_and_exposes_current() -> None:
    context = QueryContext(["Life  Insurance!", "CAR loans"])
    assert context.executed == ("life insurance", "car loans")
    assert context.current == "car loans"
    assert len(context) == 2


def test_context_rejects_empty() -> None:
    with pytest.raises(ConfigurationError):
        QueryContext([])
    with pytest.raises(ConfigurationError):
        QueryContext(["fine", "   "])


def test_context_extended_is_a_new_object() -> None:
    context = QueryContext(["one"])
    longer = context.extended("two")
    assert longer.executed == ("one", "two")
    assert context.executed == ("one",)
    assert longer != context


def test_apply_rule_topk_truncates_after_stable_sort() -> None:
    recs = [
        ExpertRecommendation("low", 0.1),
        ExpertRecommendation("first-tie", 0.5),
        ExpertRecommendation("second-tie", 0.5),
        ExpertRecommendation("high", 0.9),
    ]
    picked = apply_rule(recs, TopK(3))
    assert [r.query for r in picked] == ["high", "first-tie", "second-tie"]


def test_apply_rule_threshold_is_inclusive() -> None:
    recs = [ExpertRecommendation("at", 0.5), ExpertRecommendation("below", 0.49)]
    picked = apply_rule(recs, ScoreThreshold(0.5))
    assert [r.query for r in picked] == ["at"]


def test_scripted_expert_replays_and_normalizes() -> None:
    expert = ScriptedExpert([("Life Insurance", 0.9), ("car loans", 0.4), ("", 0.2)])
    recs = expert.recommend(QueryContext(["anything"]), TopK(5))
    assert recs == [
        ExpertRecommendation("life insurance", 0.9),
        ExpertRecommendation("car loans", 0.4),
    ]


def test_scripted_expert_accepts_a_callable() -> None:
    expert = ScriptedExpert(lambda ctx: [(ctx.current + " more", 1.0)])
    recs = expert.recommend(QueryContext(["base"]), TopK(1))
    assert recs == [ExpertRecommendation("base more", 1.0)]


def test_recommend_rejects_scores_outside_unit_interval() -> None:
    for bad in (1.5, -0.1):
        expert = ScriptedExpert([("q", bad)])
        with pytest.raises(ConfigurationError):
            expert.recommend(QueryContext(["x"]), TopK(1))


def test_recommend_dedups_keeping_the_best_score() -> None:
    expert = ScriptedExpert([("q one", 0.3), ("Q  ONE", 0.8), ("other", 0.5)])
    recs = expert.recommend(QueryContext(["x"]), TopK(5))
    assert recs == [
        ExpertRecommendation("q one", 0.8),
        ExpertRecommendation("other", 0.5),
    ]


# --- adjacency expert ---


def test_adjacency_requires_fit_before_use() -> None:
    expert = AdjacencyExpert()
    with pytest.raises(ExpertError):
        expert.candidates(QueryContext(["a"]))


def test_adjacency_rejects_bad_parameters() -> None:
    with pytest.raises(ConfigurationError):
        AdjacencyExpert(alpha=-0.5)
    with pytest.raises(ConfigurationError):
        AdjacencyExpert(n_sim=0)


def test_adjacency_unsmoothed_count_ratios() -> None:
    # a -> b twice, a -> c once; exact match on "a": raw ratios 2/3 and
    # 1/3, renormalized by the peak to 1.0 and 0.5.
    log = make_log([["a", "b"], ["a", "b"], ["a", "c"]])
    expert = AdjacencyExpert(alpha=0.0).fit(log)
    recs = expert.recommend(QueryContext(["a"]), TopK(5))
    assert recs[0] == ExpertRecommendation("b", 1.0)
    assert recs[1].query == "c"
    assert recs[1].score == pytest.approx(0.5, abs=1e-12)


def test_adjacency_add_alpha_smoothing() -> None:
    # Same counts with alpha = 1: (2+1)/5 and (1+1)/5, peak-normalized to
    # 1.0 and 2/3.
    log = make_log([["a", "b"], ["a", "b"], ["a", "c"]])
    expert = AdjacencyExpert(alpha=1.0).fit(log)
    recs = expert.recommend(QueryContext(["a"]), TopK(5))
    assert recs[0] == ExpertRecommendation("b", 1.0)
    assert recs[1].score == pytest.approx(2.0 / 3.0, abs=1e-12)


def test_adjacency_weights_matches_by_jaccard() -> None:
    # Current "a b" matches source "a b" at J=1 and "a c" at J=1/3, so the
    # latter's successor scores a third of the former's.
    log = make_log([["a b", "x x"], ["a c", "y y"]])
    expert = AdjacencyExpert(alpha=0.0).fit(log)
    recs = expert.recommend(QueryContext(["a b"]), TopK(5))
    assert recs[0] == ExpertRecommendation("x x", 1.0)
    assert recs[1].query == "y y"
    assert recs[1].score == pytest.approx(1.0 / 3.0, abs=1e-12)


def test_adjacency_top_score_is_always_one() -> None:
    log = make_log([["q one", "q two", "q three"], ["q one", "q four"]])
    expert = AdjacencyExpert().fit(log)
    recs = expert.recommend(QueryContext(["q one"]), TopK(10))
    assert recs and recs[0].score == 1.0


def test_adjacency_no_token_overlap_yields_nothing() -> None:
    log = make_log([["a", "b"]])
    expert = AdjacencyExpert().fit(log)
    assert expert.recommend(QueryContext(["zzz"]), TopK(5)) == []


def test_adjacency_limits_matched_sources_to_n_sim() -> None:
    # Ten sources share the token "hub"; with n_sim = 1 only the most
    # similar source (the exact match) contributes successors.
    sessions = [[f"hub extra{i}", f"succ{i}"] for i in range(10)]
    sessions.append(["hub", "exact match next"])
    log = make_log(sessions)
    expert = AdjacencyExpert(alpha=0.0, n_sim=1).fit(log)
    recs = expert.recommend(QueryContext(["hub"]), TopK(20))
    assert [r.query for r in recs] == ["exact match next"]


def test_adjacency_brute_force_recount() -> None:
    # Independent recount of the scoring formula on a small log.
    sessions = [
        ["red shoes", "red boots", "rain boots"],
        ["red shoes", "blue shoes"],
        ["rain coat", "rain boots"],
    ]
    log = make_log(sessions)
    alpha, n_sim = 0.1, 5
    expert = AdjacencyExpert(alpha=alpha, n_sim=n_sim).fit(log)
    current = "red shoes"
    recs = {r.query: r.score for r in expert.recommend(QueryContext([current]), TopK(50))}

    transitions: dict[str, dict[str, int]] = {}
    for queries in sessions:
        for prev, nxt in zip(queries, queries[1:]):
            transitions.setdefault(prev, {}).setdefault(nxt, 0)
            transitions[prev][nxt] += 1
    cur_tokens = set(current.split())
    sims = []
    for order, source in enumerate(transitions):
        src_tokens = set(source.split())
        jac = len(cur_tokens & src_tokens) / len(cur_tokens | src_tokens)
        if jac > 0:
            sims.append((-jac, order, source))
    expected: dict[str, float] = {}
    for _, _, source in sorted(sims)[:n_sim]:
        successors = transitions[source]
        denom = sum(successors.values()) + alpha * len(successors)
        for cand, count in successors.items():
            val = (len(cur_tokens & set(source.split())) / len(cur_tokens | set(source.split()))) * (count + alpha) / denom
            expected[cand] = max(expected.get(cand, 0.0), val)
    peak = max(expected.values())
    expected = {q: v / peak for q, v in expected.items()}

    assert recs.keys() == expected.keys()
    for query, score in expected.items():
        assert recs[query] == pytest.approx(score, abs=1e-12)


def test_adjacency_is_pure_and_memoized() -> None:
    log = make_log([["a", "b"], ["a", "c"]])
    expert = AdjacencyExpert().fit(log)
    context = QueryContext(["other", "a"])
    first = expert.recommend(context, TopK(5))
    second = expert.recommend(QueryContext(["a"]), TopK(5))
    assert first == second


# --- n-gram expert ---


def test_ngram_requires_fit_before_use() -> None:
    with pytest.raises(ExpertError):
        NgramExpert().candidates(QueryContext(["a"]))


def test_ngram_rejects_bad_parameters() -> None:
    with pytest.raises(ConfigurationError):
        NgramExpert(order=4)
    with pytest.raises(ConfigurationError):
        NgramExpert(beam_width=0)
    with pytest.raises(ConfigurationError):
        NgramExpert(max_len=0)


def test_ngram_deterministic_corpus_scores_one() -> None:
    # Every transition in the training stream is forced, so the single
    # finished beam has log-probability 0 and score exactly 1.
    log = make_log([["alpha beta", "alpha beta"]])
    expert = NgramExpert(order=2).fit(log)
    recs = expert.recommend(QueryContext(["alpha beta"]), TopK(3))
    assert recs == [ExpertRecommendation("alpha beta", 1.0)]


def test_ngram_equal_beams_share_their_score() -> None:
    # After "x" the model continues with "a", then splits evenly to "b" or
    # "c", then closes: score exp(ln(1/2)/3) = 2^(-1/3) for both beams.
    log = make_log([["x", "a b"], ["x", "a c"]])
    expert = NgramExpert(order=2, beam_width=3).fit(log)
    recs = expert.recommend(QueryContext(["x"]), TopK(3))
    assert [r.query for r in recs] == ["a b", "a c"]
    for rec in recs:
        assert rec.score == pytest.approx(2.0 ** (-1.0 / 3.0), abs=1e-12)


def test_ngram_beam_width_one_keeps_the_lexicographic_tie_winner() -> None:
    log = make_log([["x", "a b"], ["x", "a c"]])
    expert = NgramExpert(order=2, beam_width=1).fit(log)
    recs = expert.recommend(QueryContext(["x"]), TopK(3))
    assert [r.query for r in recs] == ["a b"]


def test_ngram_trigram_falls_back_to_query_starts() -> None:
    # "z z" was never seen, so generation restarts from the corpus start
    # distribution; the "a ..." beams close through observed trigrams at
    # score 2^(-2/3) while the bare "x" beam dead-ends at 0.5.
    log = make_log([["x", "a b"], ["x", "a c"]])
    expert = NgramExpert(order=3, beam_width=3).fit(log)
    recs = expert.recommend(QueryContext(["z z"]), TopK(3))
    assert [r.query for r in recs] == ["a b", "a c", "x"]
    assert recs[0].score == pytest.approx(2.0 ** (-2.0 / 3.0), abs=1e-12)
    assert recs[1].score == pytest.approx(2.0 ** (-2.0 / 3.0), abs=1e-12)
    assert recs[2].score == pytest.approx(0.5, abs=1e-12)


def test_ngram_scores_lie_in_unit_interval() -> None:
    log = make_log(
        [
            ["red shoes", "red boots", "rain boots"],
            ["red shoes", "blue shoes", "blue coat"],
            ["rain coat", "rain boots", "red shoes"],
        ]
    )
    for order in (2, 3):
        expert = NgramExpert(order=order, beam_width=4).fit(log)
        for seed_query in ("red shoes", "rain boots", "unseen thing"):
            for rec in expert.recommend(QueryContext([seed_query]), TopK(10)):
                assert 0.0 < rec.score <= 1.0


def test_ngram_respects_max_len() -> None:
    # A cycle with no boundary reachable from "loop": emission stops at
    # max_len tokens.
    log = make_log([["loop loop loop loop loop loop loop loop"]])
    expert = NgramExpert(order=2, beam_width=2, max_len=3).fit(log)
    recs = expert.recommend(QueryContext(["loop"]), TopK(5))
    for rec in recs:
        assert len(rec.query.split()) <= 3


def test_ngram_is_deterministic_across_fits() -> None:
    log = make_log(
        [
            ["red shoes", "red boots", "rain boots"],
            ["red shoes", "blue shoes"],
        ]
    )
    first = NgramExpert(order=2).fit(log).recommend(QueryContext(["red shoes"]), TopK(5))
    second = NgramExpert(order=2).fit(log).recommend(QueryContext(["red shoes"]), TopK(5))
    assert first == second


# --- union ---


def test_union_requires_experts() -> None:
    with pytest.raises(ConfigurationError):
        union_candidates([], QueryContext(["x"]), TopK(3))


def test_union_dedups_keeping_the_maximum_score() -> None:
    first = ScriptedExpert([("shared", 0.4), ("alpha", 0.9)], name="one")
    second = ScriptedExpert([("shared", 0.7), ("beta", 0.2)], name="two")
    pooled = union_candidates([first, second], QueryContext(["x"]), TopK(5))
    assert pooled == [
        ExpertRecommendation("alpha", 0.9),
        ExpertRecommendation("shared", 0.7),
        ExpertRecommendation("beta", 0.2),
    ]


def test_union_breaks_ties_by_first_appearance() -> None:
    first = ScriptedExpert([("later", 0.5)], name="one")
    second = ScriptedExpert([("earlier", 0.5)], name="two")
    pooled = union_candidates([first, second], QueryContext(["x"]), TopK(5))
    assert [r.query for r in pooled] == ["later", "earlier"]


def test_union_size_is_bounded_by_k_times_experts() -> None:
    experts = [
        ScriptedExpert([(f"e{i}q{j}", 1.0 - j / 10) for j in range(8)], name=f"e{i}")
        for i in range(3)
    ]
    for k in (1, 2, 3, 5):
        pooled = union_candidates(experts, QueryContext(["x"]), TopK(k))
        assert len(pooled) <= k * len(experts)


def test_union_with_threshold_rule() -> None:
    first = ScriptedExpert([("keep", 0.8), ("drop", 0.3)], name="one")
    second = ScriptedExpert([("also", 0.5)], name="two")
    pooled = union_candidates([first, second], QueryContext(["x"]), ScoreThreshold(0.5))
    assert [r.query for r in pooled] == ["keep", "also"]


# --- persistence ---


def test_expert_artifacts_round_trip(tmp_path) -> None:
    log = make_log(
        [
            ["red shoes", "red boots", "rain boots"],
            ["red shoes", "blue shoes"],
            ["rain coat", "rain boots"],
        ]
    )
    contexts = [QueryContext([q]) for q in ("red shoes", "rain boots", "blue shoes")]
    for train, name in (
        (lambda: train_adjacency_expert(log, alpha=0.2, n_sim=3), "adjacency"),
        (lambda: train_ngram_expert(log, order=2, beam_width=4), "ngram"),
    ):
        expert = train()
        path = str(tmp_path / f"{name}.json")
        saved_fp = save_expert(expert, path)
        assert saved_fp == expert_fingerprint(expert)
        loaded = load_expert(path)
        assert expert_fingerprint(loaded) == saved_fp
        for context in contexts:
            assert loaded.recommend(context, TopK(5)) == expert.recommend(context, TopK(5))


def test_fingerprint_is_stable_across_retrains() -> None:
    log = make_log([["a b", "c d"], ["a b", "e f"]])
    one = expert_fingerprint(train_adjacency_expert(log))
    two = expert_fingerprint(train_adjacency_expert(log))
    assert one == two
    assert expert_fingerprint(ScriptedExpert([("x", 1.0)])) is None


def test_fingerprint_changes_with_training_data() -> None:
    log_a = make_log([["a b", "c d"]])
    log_b = make_log([["a b", "c e"]])
    assert expert_fingerprint(train_ngram_expert(log_a)) != expert_fingerprint(
        train_ngram_expert(log_b)
    )


def test_tampered_artifact_is_rejected(tmp_path) -> None:
    log = make_log([["a", "b"], ["a", "c"]])
    path = str(tmp_path / "adjacency.json")
    save_expert(train_adjacency_expert(log), path)
    with open(path, "r", encoding="utf-8") as handle:
        artifact = json.load(handle)
    artifact["payload"]["transitions"]["a"]["b"] = 99
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(artifact, handle)
    with pytest.raises(DataError):
        load_expert(path)


def test_unreadable_or_wrong_version_artifacts_are_rejected(tmp_path) -> None:
    garbled = tmp_path / "garbled.json"
    garbled.write_text("{not json", encoding="utf-8")
    with pytest.raises(DataError):
        load_expert(str(garbled))

    log = make_log([["a", "b"]])
    path = str(tmp_path / "versioned.json")
    save_expert(train_adjacency_expert(log), path)
    with open(path, "r", encoding="utf-8") as handle:
        artifact = json.load(handle)
    artifact["format_version"] = 99
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(artifact, handle)
    with pytest.raises(DataError):
        load_expert(str(path))


def test_untrained_experts_cannot_be_serialized() -> None:
    with pytest.raises(ConfigurationError):
        AdjacencyExpert().to_payload()
    with pytest.raises(ConfigurationError):
        NgramExpert().to_payload()
