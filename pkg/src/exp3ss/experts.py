"""Pluggable next-query generators and their per-round union.

Every expert maps a query context to scored recommendations with scores in
[0, 1].  A selection rule (top-k or a score threshold) truncates each
expert's list before the union; the union dedups by normalized query text,
keeps the highest score for a duplicate, and orders by descending score with
ties broken by first appearance across the expert list.

Experts are pure functions of their trained model and the context, so the
local experts memoize per context key; repeated calls are cheap and always
identical.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import queue
import subprocess
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

from .bandit import ScoreThreshold, SelectionRule, TopK, validate_rule
from .data import QueryLog
from .errors import ConfigurationError, DataError, ExpertError
from .metrics import normalize_query, split_words, tokenize

logger = logging.getLogger(__name__)

ARTIFACT_FORMAT_VERSION = 1

QUERY_BOUNDARY = "</q>"


@dataclass(frozen=True)
class ExpertRecommendation:
    """A candidate next query with the proposing expert's confidence."""

    query: str
    score: float


class QueryContext:
    """The queries a user has executed so far, oldest first.

    Queries are normalized on construction; the context is immutable, and
    ``extended`` returns a new context with one query appended.
    """

    __slots__ = ("executed",)

    def __init__(self, executed: Iterable[str]):
        normalized = tuple(normalize_query(q) for q in executed)
        if not normalized:
            raise ConfigurationError("context must contain at least one query")
        if any(not q for q in normalized):
            raise ConfigurationError("context queries must be non-empty after normalization")
        self.executed = normalized

    @property
    def current(self) -> str:
        return self.executed[-1]

    def extended(self, query: str) -> "QueryContext":
        return QueryContext(self.executed + (query,))

    def __len__(self) -> int:
        return len(self.executed)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, QueryContext) and self.executed == other.executed

    def __repr__(self) -> str:
        return f"QueryContext({list(self.executed)!r})"


def apply_rule(
    recommendations: Sequence[ExpertRecommendation], rule: SelectionRule
) -> list[ExpertRecommendation]:
    """Order recommendations by descending score and truncate by the rule.

    The sort is stable, so equal scores keep their generation order.
    """
    validate_rule(rule)
    ordered = sorted(recommendations, key=lambda r: -r.score)
    if isinstance(rule, TopK):
        return ordered[: rule.k]
    return [r for r in ordered if r.score >= rule.epsilon]


class Expert:
    """Base class: subclasses produce raw scored candidates, the base
    dedups them and applies the selection rule."""

    name: str = "expert"

    def candidates(self, context: QueryContext) -> list[ExpertRecommendation]:
        raise NotImplementedError

    def recommend(
        self, context: QueryContext, rule: SelectionRule
    ) -> list[ExpertRecommendation]:
        if not isinstance(context, QueryContext):
            raise ConfigurationError("recommend expects a QueryContext")
        deduped: dict[str, ExpertRecommendation] = {}
        for rec in self.candidates(context):
            if not 0.0 <= rec.score <= 1.0:
                raise ConfigurationError(
                    f"expert {self.name!r} produced score {rec.score} outside [0, 1]"
                )
            existing = deduped.get(rec.query)
            if existing is None or rec.score > existing.score:
                deduped[rec.query] = rec
        return apply_rule(list(deduped.values()), rule)


class ScriptedExpert(Expert):
    """Fixture expert: replays a fixed list or a callable's output.

    ``script`` is either a sequence of (query, score) pairs emitted every
    round, or a callable from context to such a sequence.
    """

    def __init__(
        self,
        script: Sequence[tuple[str, float]]
        | Callable[[QueryContext], Sequence[tuple[str, float]]],
        name: str = "scripted",
    ):
        self.name = name
        self._script = script

    def candidates(self, context: QueryContext) -> list[ExpertRecommendation]:
        items = self._script(context) if callable(self._script) else self._script
        out = []
        for query, score in items:
            norm = normalize_query(query)
            if norm:
                out.append(ExpertRecommendation(norm, float(score)))
        return out


class AdjacencyExpert(Expert):
    """Recommends observed successors of training queries similar to the
    current one.

    Training counts transitions between consecutive queries within sessions
    and indexes queries by token.  At query time the ``n_sim`` training
    queries most token-Jaccard-similar to the current query are found; each
    successor q' of a matched query q scores

        jaccard(current, q) * (count(q -> q') + alpha) / sum_q''(count(q -> q'') + alpha)

    where the smoothing sum runs over q's observed successors; a candidate
    keeps its best score over matches, and scores are divided by the maximum
    so the top recommendation always scores 1.
    """

    def __init__(self, alpha: float = 0.1, n_sim: int = 5, name: str = "adjacency"):
        if alpha < 0.0:
            raise ConfigurationError(f"alpha must be >= 0, got {alpha}")
        if n_sim < 1:
            raise ConfigurationError(f"n_sim must be >= 1, got {n_sim}")
        self.name = name
        self.alpha = float(alpha)
        self.n_sim = int(n_sim)
        self._transitions: dict[str, dict[str, int]] | None = None
        self._token_index: dict[str, list[str]] = {}
        self._query_tokens: dict[str, frozenset[str]] = {}
        self._source_order: dict[str, int] = {}
        self._cache: dict[str, tuple[ExpertRecommendation, ...]] = {}

    def fit(self, log: QueryLog) -> "AdjacencyExpert":
        transitions: dict[str, dict[str, int]] = {}
        for session in log.sessions:
            queries = [q for q in (normalize_query(q) for q in session.queries) if q]
            for prev, nxt in zip(queries, queries[1:]):
                transitions.setdefault(prev, {})
                transitions[prev][nxt] = transitions[prev].get(nxt, 0) + 1
        if not transitions:
            raise DataError("adjacency training needs at least one session with two queries")
        self._transitions = transitions
        self._token_index = {}
        self._query_tokens = {}
        self._source_order = {}
        for order, source in enumerate(transitions):
            self._source_order[source] = order
            tokens = frozenset(split_words(source))
            self._query_tokens[source] = tokens
            for token in tokens:
                self._token_index.setdefault(token, []).append(source)
        self._cache = {}
        return self

    @property
    def trained(self) -> bool:
        return self._transitions is not None

    def candidates(self, context: QueryContext) -> list[ExpertRecommendation]:
        if self._transitions is None:
            raise ExpertError("AdjacencyExpert used before fit()")
        current = context.current
        cached = self._cache.get(current)
        if cached is not None:
            return list(cached)
        recommendations = self._score(current)
        self._cache[current] = tuple(recommendations)
        return list(recommendations)

    def _score(self, current: str) -> list[ExpertRecommendation]:
        assert self._transitions is not None
        current_tokens = tokenize(current)
        if not current_tokens:
            return []
        matched: dict[str, float] = {}
        for token in current_tokens:
            for source in self._token_index.get(token, ()):
                if source in matched:
                    continue
                source_tokens = self._query_tokens[source]
                union = len(current_tokens | source_tokens)
                jaccard = len(current_tokens & source_tokens) / union
                if jaccard > 0.0:
                    matched[source] = jaccard
        if not matched:
            return []
        top = sorted(
            matched.items(), key=lambda item: (-item[1], self._source_order[item[0]])
        )[: self.n_sim]
        scores: dict[str, float] = {}
        for source, jaccard in top:
            successors = self._transitions[source]
            denominator = sum(successors.values()) + self.alpha * len(successors)
            for candidate, count in successors.items():
                value = jaccard * (count + self.alpha) / denominator
                if value > scores.get(candidate, 0.0):
                    scores[candidate] = value
        peak = max(scores.values())
        return [
            ExpertRecommendation(candidate, value / peak)
            for candidate, value in scores.items()
        ]

    def to_payload(self) -> dict:
        if self._transitions is None:
            raise ConfigurationError("cannot serialize an untrained AdjacencyExpert")
        return {
            "params": {"alpha": self.alpha, "n_sim": self.n_sim},
            "transitions": self._transitions,
        }

    @classmethod
    def from_payload(cls, payload: dict, name: str = "adjacency") -> "AdjacencyExpert":
        params = payload["params"]
        expert = cls(alpha=float(params["alpha"]), n_sim=int(params["n_sim"]), name=name)
        transitions = {
            prev: {nxt: int(c) for nxt, c in successors.items()}
            for prev, successors in payload["transitions"].items()
        }
        if not transitions:
            raise DataError("adjacency artifact holds no transitions")
        expert._transitions = transitions
        for order, source in enumerate(transitions):
            expert._source_order[source] = order
            tokens = frozenset(split_words(source))
            expert._query_tokens[source] = tokens
            for token in tokens:
                expert._token_index.setdefault(token, []).append(source)
        return expert


class NgramExpert(Expert):
    """Generates next queries from a token-level n-gram model of the log.

    Each session is serialized as its queries' tokens with a boundary marker
    after every query, and n-gram counts (order 2 or 3) are taken over that
    stream, so the marker carries cross-query transitions.  Generation runs
    a beam search of width ``beam_width`` from the context's trailing n-1
    serialized tokens until the boundary marker or ``max_len`` tokens; a
    finished beam scores exp(mean per-token log-probability), which lies in
    (0, 1].  When the trailing state has no observed continuation the search
    falls back to the corpus-wide query-start distribution.
    """

    def __init__(
        self,
        order: int = 2,
        beam_width: int = 3,
        max_len: int = 12,
        name: str = "ngram",
    ):
        if order not in (2, 3):
            raise ConfigurationError(f"order must be 2 or 3, got {order}")
        if beam_width < 1:
            raise ConfigurationError(f"beam_width must be >= 1, got {beam_width}")
        if max_len < 1:
            raise ConfigurationError(f"max_len must be >= 1, got {max_len}")
        self.name = name
        self.order = int(order)
        self.beam_width = int(beam_width)
        self.max_len = int(max_len)
        self._counts: dict[tuple[str, ...], dict[str, int]] | None = None
        self._start_counts: dict[str, int] = {}
        self._n_queries = 0
        self._cache: dict[tuple[str, ...], tuple[ExpertRecommendation, ...]] = {}

    def fit(self, log: QueryLog) -> "NgramExpert":
        counts: dict[tuple[str, ...], dict[str, int]] = {}
        start_counts: dict[str, int] = {}
        n_queries = 0
        for session in log.sessions:
            stream: list[str] = []
            for query in session.queries:
                tokens = split_words(query)
                if not tokens:
                    continue
                start_counts[tokens[0]] = start_counts.get(tokens[0], 0) + 1
                n_queries += 1
                stream.extend(tokens)
                stream.append(QUERY_BOUNDARY)
            history = self.order - 1
            for i in range(len(stream) - history):
                state = tuple(stream[i : i + history])
                successor = stream[i + history]
                counts.setdefault(state, {})
                counts[state][successor] = counts[state].get(successor, 0) + 1
        if n_queries == 0:
            raise DataError("n-gram training needs at least one non-empty query")
        self._counts = counts
        self._start_counts = start_counts
        self._n_queries = n_queries
        self._cache = {}
        return self

    @property
    def trained(self) -> bool:
        return self._counts is not None

    def _trailing_state(self, context: QueryContext) -> tuple[str, ...]:
        # The serialized context ends with the current query's tokens plus a
        # boundary marker, so the trailing state is derivable from the
        # current query alone.
        tail = split_words(context.current) + [QUERY_BOUNDARY]
        return tuple(tail[-(self.order - 1) :])

    def candidates(self, context: QueryContext) -> list[ExpertRecommendation]:
        if self._counts is None:
            raise ExpertError("NgramExpert used before fit()")
        state = self._trailing_state(context)
        cached = self._cache.get(state)
        if cached is not None:
            return list(cached)
        recommendations = self._generate(state)
        self._cache[state] = tuple(recommendations)
        return list(recommendations)

    def _initial_beams(
        self, state: tuple[str, ...]
    ) -> list[tuple[float, tuple[str, ...], tuple[str, ...], int, bool]]:
        # A beam is (log_prob, emitted_tokens, state, n_scored, finished).
        assert self._counts is not None
        if self._counts.get(state):
            return [(0.0, (), state, 0, False)]
        starts = sorted(
            self._start_counts.items(), key=lambda item: (-item[1], item[0])
        )[: self.beam_width]
        beams = []
        for token, count in starts:
            log_prob = math.log(count / self._n_queries)
            beams.append((log_prob, (token,), state[1:] + (token,), 1, False))
        return beams

    def _generate(self, state: tuple[str, ...]) -> list[ExpertRecommendation]:
        assert self._counts is not None
        beams = self._initial_beams(state)
        for _ in range(self.max_len + 1):
            if all(beam[4] for beam in beams):
                break
            expanded: list[tuple[float, tuple[str, ...], tuple[str, ...], int, bool]] = []
            for log_prob, emitted, beam_state, n_scored, finished in beams:
                if finished:
                    expanded.append((log_prob, emitted, beam_state, n_scored, True))
                    continue
                successors = self._counts.get(beam_state)
                if not successors:
                    # Dead end: treat the beam as complete with what it has.
                    expanded.append((log_prob, emitted, beam_state, n_scored, True))
                    continue
                total = sum(successors.values())
                for token, count in successors.items():
                    step = math.log(count / total)
                    if token == QUERY_BOUNDARY:
                        expanded.append(
                            (log_prob + step, emitted, beam_state, n_scored + 1, True)
                        )
                    elif len(emitted) >= self.max_len:
                        expanded.append((log_prob, emitted, beam_state, n_scored, True))
                    else:
                        expanded.append(
                            (
                                log_prob + step,
                                emitted + (token,),
                                beam_state[1:] + (token,),
                                n_scored + 1,
                                False,
                            )
                        )
            expanded.sort(key=lambda beam: (-beam[0], beam[1]))
            beams = expanded[: self.beam_width]
        results: dict[str, float] = {}
        for log_prob, emitted, _, n_scored, finished in beams:
            if not finished or not emitted:
                continue
            score = math.exp(log_prob / n_scored)
            query = " ".join(emitted)
            if score > results.get(query, 0.0):
                results[query] = score
        return [ExpertRecommendation(query, score) for query, score in results.items()]

    def to_payload(self) -> dict:
        if self._counts is None:
            raise ConfigurationError("cannot serialize an untrained NgramExpert")
        return {
            "params": {
                "order": self.order,
                "beam_width": self.beam_width,
                "max_len": self.max_len,
            },
            "counts": {
                " ".join(state): successors for state, successors in self._counts.items()
            },
            "start_counts": self._start_counts,
            "n_queries": self._n_queries,
        }

    @classmethod
    def from_payload(cls, payload: dict, name: str = "ngram") -> "NgramExpert":
        params = payload["params"]
        expert = cls(
            order=int(params["order"]),
            beam_width=int(params["beam_width"]),
            max_len=int(params["max_len"]),
            name=name,
        )
        expert._counts = {
            tuple(state.split(" ")): {t: int(c) for t, c in successors.items()}
            for state, successors in payload["counts"].items()
        }
        expert._start_counts = {t: int(c) for t, c in payload["start_counts"].items()}
        expert._n_queries = int(payload["n_queries"])
        if expert._n_queries <= 0:
            raise DataError("n-gram artifact has no training queries")
        return expert


def train_adjacency_expert(
    log: QueryLog, alpha: float = 0.1, n_sim: int = 5
) -> AdjacencyExpert:
    return AdjacencyExpert(alpha=alpha, n_sim=n_sim).fit(log)


def train_ngram_expert(
    log: QueryLog, order: int = 2, beam_width: int = 3, max_len: int = 12
) -> NgramExpert:
    return NgramExpert(order=order, beam_width=beam_width, max_len=max_len).fit(log)


class ExternalExpert(Expert):
    """Client for an out-of-process generator speaking JSON lines on stdio.

    The child is spawned lazily, must announce readiness with a
    ``{"ready": true}`` line, and then answers one request per line:

        {"context": [...], "top_k": k, "threshold": e, "request_id": id}

    Responses echo the id and carry either ``candidates`` (descending score)
    or ``error``.  A timeout, a malformed response, or a reported error makes
    this expert contribute nothing for the round; the failure is logged and
    never propagates.
    """

    def __init__(
        self,
        command: Sequence[str],
        *,
        name: str = "external",
        timeout: float = 30.0,
        generation_cap: int = 10,
    ):
        if not command:
            raise ConfigurationError("external expert needs a non-empty command")
        if timeout <= 0:
            raise ConfigurationError(f"timeout must be positive, got {timeout}")
        if generation_cap < 1:
            raise ConfigurationError(f"generation_cap must be >= 1, got {generation_cap}")
        self.name = name
        self.command = list(command)
        self.timeout = float(timeout)
        self.generation_cap = int(generation_cap)
        self._process: subprocess.Popen | None = None
        self._lines: queue.Queue[str | None] = queue.Queue()
        self._counter = 0
        self._rule: SelectionRule = TopK(self.generation_cap)

    def _start(self) -> None:
        self._lines = queue.Queue()
        process = subprocess.Popen(
            self.command,
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            stderr=subprocess.DEVNULL,
            text=True,
            bufsize=1,
        )
        self._process = process

        def pump() -> None:
            assert process.stdout is not None
            for line in process.stdout:
                self._lines.put(line)
            self._lines.put(None)

        threading.Thread(target=pump, daemon=True).start()
        ready = self._read_line()
        try:
            if json.loads(ready).get("ready") is not True:
                raise ExpertError(f"bridge {self.command[0]} sent a bad readiness line")
        except (json.JSONDecodeError, AttributeError):
            raise ExpertError(f"bridge {self.command[0]} sent a bad readiness line")

    def _read_line(self) -> str:
        try:
            line = self._lines.get(timeout=self.timeout)
        except queue.Empty:
            raise TimeoutError(f"no response within {self.timeout}s")
        if line is None:
            raise ExpertError("bridge closed its output stream")
        return line

    def _shutdown(self) -> None:
        process = self._process
        self._process = None
        if process is None:
            return
        try:
            if process.stdin is not None:
                process.stdin.close()
            process.terminate()
            process.wait(timeout=5)
        except (OSError, subprocess.TimeoutExpired):
            process.kill()

    def close(self) -> None:
        self._shutdown()

    def __enter__(self) -> "ExternalExpert":
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()

    def recommend(
        self, context: QueryContext, rule: SelectionRule
    ) -> list[ExpertRecommendation]:
        validate_rule(rule)
        self._rule = rule
        return super().recommend(context, rule)

    def candidates(self, context: QueryContext) -> list[ExpertRecommendation]:
        rule = self._rule
        if isinstance(rule, TopK):
            top_k, threshold = rule.k, 0.0
        else:
            top_k, threshold = self.generation_cap, rule.epsilon
        self._counter += 1
        request_id = f"req-{self._counter}"
        request = {
            "context": list(context.executed),
            "top_k": top_k,
            "threshold": threshold,
            "request_id": request_id,
        }
        try:
            if self._process is None or self._process.poll() is not None:
                self._start()
            assert self._process is not None and self._process.stdin is not None
            self._process.stdin.write(json.dumps(request) + "\n")
            self._process.stdin.flush()
            response = json.loads(self._read_line())
        except (ExpertError, TimeoutError, OSError, json.JSONDecodeError) as exc:
            logger.warning("external expert %r contributed nothing: %s", self.name, exc)
            self._shutdown()
            return []
        return self._parse_response(response, request_id)

    def _parse_response(
        self, response: object, request_id: str
    ) -> list[ExpertRecommendation]:
        if not isinstance(response, dict) or response.get("request_id") != request_id:
            logger.warning(
                "external expert %r returned a mismatched response; skipping round",
                self.name,
            )
            return []
        error = response.get("error")
        if error is not None:
            logger.warning("external expert %r reported %s; skipping round", self.name, error)
            return []
        raw = response.get("candidates")
        if not isinstance(raw, list):
            logger.warning("external expert %r sent no candidate list; skipping round", self.name)
            return []
        out = []
        for item in raw:
            if (
                not isinstance(item, dict)
                or not isinstance(item.get("query"), str)
                or not isinstance(item.get("score"), (int, float))
                or not 0.0 <= float(item["score"]) <= 1.0
            ):
                logger.warning(
                    "external expert %r sent a malformed candidate; skipping round",
                    self.name,
                )
                return []
            norm = normalize_query(item["query"])
            if norm:
                out.append(ExpertRecommendation(norm, float(item["score"])))
        return out


def union_candidates(
    experts: Sequence[Expert], context: QueryContext, rule: SelectionRule
) -> list[ExpertRecommendation]:
    """Per-round candidate pool: the deduplicated union of every expert's
    rule-truncated recommendations.

    A duplicate query keeps its maximum score; ordering is by descending
    score, ties by first appearance scanning experts in order.
    """
    if not experts:
        raise ConfigurationError("at least one expert is required")
    validate_rule(rule)
    best: dict[str, float] = {}
    arrival: dict[str, int] = {}
    for expert in experts:
        for rec in expert.recommend(context, rule):
            if rec.query not in arrival:
                arrival[rec.query] = len(arrival)
                best[rec.query] = rec.score
            elif rec.score > best[rec.query]:
                best[rec.query] = rec.score
    pooled = [ExpertRecommendation(q, s) for q, s in best.items()]
    pooled.sort(key=lambda r: (-r.score, arrival[r.query]))
    return pooled


_ARTIFACT_KINDS = {"adjacency": AdjacencyExpert, "ngram": NgramExpert}


def _fingerprint(kind: str, payload: dict) -> str:
    canonical = json.dumps(
        {"kind": kind, "payload": payload}, sort_keys=True, separators=(",", ":")
    )
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def save_expert(expert: Expert, path: str) -> str:
    """Persist a trained expert as a versioned JSON artifact; returns its
    content fingerprint."""
    for kind, cls in _ARTIFACT_KINDS.items():
        if isinstance(expert, cls):
            payload = expert.to_payload()
            fingerprint = _fingerprint(kind, payload)
            artifact = {
                "format_version": ARTIFACT_FORMAT_VERSION,
                "kind": kind,
                "payload": payload,
                "fingerprint": fingerprint,
            }
            with open(path, "w", encoding="utf-8") as handle:
                json.dump(artifact, handle, ensure_ascii=False, separators=(",", ":"))
                handle.write("\n")
            return fingerprint
    raise ConfigurationError(f"cannot persist expert of type {type(expert).__name__}")


def load_expert(path: str, name: str | None = None) -> Expert:
    """Load an expert artifact, verifying its fingerprint."""
    with open(path, "r", encoding="utf-8") as handle:
        try:
            artifact = json.load(handle)
        except json.JSONDecodeError as exc:
            raise DataError(f"invalid expert artifact {path}: {exc.msg}")
    version = artifact.get("format_version")
    if version != ARTIFACT_FORMAT_VERSION:
        raise DataError(f"unsupported artifact format version {version!r}")
    kind = artifact.get("kind")
    cls = _ARTIFACT_KINDS.get(kind)
    if cls is None:
        raise DataError(f"unknown expert kind {kind!r}")
    payload = artifact.get("payload")
    if not isinstance(payload, dict):
        raise DataError("artifact payload is missing")
    if artifact.get("fingerprint") != _fingerprint(kind, payload):
        raise DataError(f"artifact fingerprint mismatch in {path}")
    return cls.from_payload(payload, name=name or kind)


def expert_fingerprint(expert: Expert) -> str | None:
    """Content fingerprint of a persistable trained expert, else None."""
    for kind, cls in _ARTIFACT_KINDS.items():
        if isinstance(expert, cls):
            return _fingerprint(kind, expert.to_payload())
    return None
