"""Session logs: loading, preprocessing, synthetic generation, splitting.

The canonical on-disk format is JSON Lines, one session per line:

    {"session_id": "<id>", "queries": ["first query", "second query", ...]}

A TSV importer accepts ``session_id<TAB>position<TAB>query`` rows under a
header, with positions dense from 0 within each session.  Preprocessing
normalizes query text, drops queries that normalize to nothing, collapses
consecutive duplicates, and drops sessions left with fewer than two queries;
it is idempotent, and every step can be switched off.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .errors import ConfigurationError, DataError
from .metrics import normalize_query

logger = logging.getLogger(__name__)


@dataclass
class Session:
    session_id: str
    queries: list[str]


@dataclass
class QueryLog:
    sessions: list[Session] = field(default_factory=list)

    @property
    def n_sessions(self) -> int:
        return len(self.sessions)

    @property
    def n_queries(self) -> int:
        return sum(len(s.queries) for s in self.sessions)

    def session_by_id(self, session_id: str) -> Session | None:
        for session in self.sessions:
            if session.session_id == session_id:
                return session
        return None

    def session_ids(self) -> list[str]:
        return [s.session_id for s in self.sessions]


@dataclass
class PreprocessStats:
    sessions_in: int = 0
    sessions_kept: int = 0
    sessions_dropped: int = 0
    queries_in: int = 0
    queries_kept: int = 0
    empty_queries_dropped: int = 0
    duplicates_collapsed: int = 0

    def describe(self) -> dict:
        return dict(self.__dict__)


def preprocess(
    log: QueryLog,
    *,
    normalize: bool = True,
    drop_empty: bool = True,
    collapse_repeats: bool = True,
    min_queries: int = 2,
) -> tuple[QueryLog, PreprocessStats]:
    """Clean a raw log; returns the cleaned log and per-step drop counts."""
    stats = PreprocessStats(sessions_in=log.n_sessions, queries_in=log.n_queries)
    kept: list[Session] = []
    for session in log.sessions:
        queries: list[str] = []
        for raw in session.queries:
            query = normalize_query(raw) if normalize else raw
            if drop_empty and not query.strip():
                stats.empty_queries_dropped += 1
                continue
            if collapse_repeats and queries and queries[-1] == query:
                stats.duplicates_collapsed += 1
                continue
            queries.append(query)
        if len(queries) < min_queries:
            stats.sessions_dropped += 1
            continue
        kept.append(Session(session.session_id, queries))
        stats.queries_kept += len(queries)
    stats.sessions_kept = len(kept)
    return QueryLog(kept), stats


def _read_jsonl(path: str) -> QueryLog:
    sessions: list[Session] = []
    seen_ids: set[str] = set()
    with open(path, "r", encoding="utf-8") as handle:
        for lineno, raw in enumerate(handle, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"invalid JSON: {exc.msg}", line=lineno)
            if not isinstance(record, dict):
                raise DataError("expected a JSON object per line", line=lineno)
            session_id = record.get("session_id")
            queries = record.get("queries")
            if not isinstance(session_id, str) or not session_id:
                raise DataError("missing or invalid 'session_id'", line=lineno)
            if not isinstance(queries, list) or not all(
                isinstance(q, str) for q in queries
            ):
                raise DataError("'queries' must be a list of strings", line=lineno)
            if session_id in seen_ids:
                raise DataError(f"duplicate session_id {session_id!r}", line=lineno)
            seen_ids.add(session_id)
            sessions.append(Session(session_id, list(queries)))
    return QueryLog(sessions)


def _read_tsv(path: str) -> QueryLog:
    order: list[str] = []
    rows: dict[str, list[tuple[int, str, int]]] = {}
    with open(path, "r", encoding="utf-8") as handle:
        try:
            header = next(handle)
        except StopIteration:
            raise DataError("empty TSV file", line=1)
        columns = header.rstrip("\n").split("\t")
        if [c.strip() for c in columns] != ["session_id", "position", "query"]:
            raise DataError(
                "expected header 'session_id\\tposition\\tquery'", line=1
            )
        for lineno, raw in enumerate(handle, start=2):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(f"expected 3 tab-separated fields, got {len(parts)}", line=lineno)
            session_id, position_text, query = parts
            if not session_id:
                raise DataError("empty session_id", line=lineno)
            try:
                position = int(position_text)
            except ValueError:
                raise DataError(f"position {position_text!r} is not an integer", line=lineno)
            if position < 0:
                raise DataError(f"position must be >= 0, got {position}", line=lineno)
            if session_id not in rows:
                rows[session_id] = []
                order.append(session_id)
            rows[session_id].append((position, query, lineno))
    sessions: list[Session] = []
    for session_id in order:
        entries = sorted(rows[session_id], key=lambda e: e[0])
        for expected, (position, _, lineno) in enumerate(entries):
            if position != expected:
                raise DataError(
                    f"session {session_id!r} positions are not dense from 0 "
                    f"(found {position}, expected {expected})",
                    line=lineno,
                )
        sessions.append(Session(session_id, [query for _, query, _ in entries]))
    return QueryLog(sessions)


def read_log(path: str, format: str = "jsonl") -> QueryLog:
    """Parse a log file without preprocessing it."""
    if format == "jsonl":
        return _read_jsonl(path)
    if format == "tsv":
        return _read_tsv(path)
    raise ConfigurationError(f"unknown log format {format!r}; expected 'jsonl' or 'tsv'")


def load_log(
    path: str,
    format: str = "jsonl",
    *,
    normalize: bool = True,
    drop_empty: bool = True,
    collapse_repeats: bool = True,
    min_queries: int = 2,
) -> QueryLog:
    """Read and preprocess a log; raises ``DataError`` if nothing usable remains."""
    raw = read_log(path, format=format)
    cleaned, stats = preprocess(
        raw,
        normalize=normalize,
        drop_empty=drop_empty,
        collapse_repeats=collapse_repeats,
        min_queries=min_queries,
    )
    logger.info(
        "loaded %s: kept %d/%d sessions, %d/%d queries (%d empty dropped, %d repeats collapsed)",
        path,
        stats.sessions_kept,
        stats.sessions_in,
        stats.queries_kept,
        stats.queries_in,
        stats.empty_queries_dropped,
        stats.duplicates_collapsed,
    )
    if not cleaned.sessions:
        raise DataError(f"no usable sessions in {path}")
    return cleaned


def write_log(log: QueryLog, path: str) -> None:
    """Write a log in the canonical JSONL form."""
    with open(path, "w", encoding="utf-8") as handle:
        for session in log.sessions:
            record = {"session_id": session.session_id, "queries": session.queries}
            handle.write(json.dumps(record, ensure_ascii=False, separators=(",", ":")))
            handle.write("\n")


@dataclass(frozen=True)
class SyntheticConfig:
    """Knobs for the synthetic session generator.

    Sessions walk a ring of topics.  Each topic owns a small keyword pool;
    queries are 3-7 keywords from the current pool, and a per-topic anchor
    pair persists across consecutive queries so adjacent queries keep
    overlapping words.  With ``drift_probability`` a session hops to a
    neighboring topic and re-draws its anchors.
    """

    n_topics: int = 20
    keywords_per_topic: int = 8
    n_sessions: int = 100
    session_length_range: tuple[int, int] = (4, 10)
    drift_probability: float = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_topics < 1:
            raise ConfigurationError("n_topics must be >= 1")
        if self.keywords_per_topic < 3:
            raise ConfigurationError("keywords_per_topic must be >= 3")
        if self.n_sessions < 1:
            raise ConfigurationError("n_sessions must be >= 1")
        low, high = self.session_length_range
        if low < 2 or high < low:
            raise ConfigurationError(
                f"session_length_range must satisfy 2 <= low <= high, got {self.session_length_range}"
            )
        if not 0.0 <= self.drift_probability <= 1.0:
            raise ConfigurationError("drift_probability must lie in [0, 1]")

    def describe(self) -> dict:
        return {
            "n_topics": self.n_topics,
            "keywords_per_topic": self.keywords_per_topic,
            "n_sessions": self.n_sessions,
            "session_length_range": list(self.session_length_range),
            "drift_probability": self.drift_probability,
            "seed": self.seed,
        }


def _make_query(
    rng: np.random.Generator,
    pool: list[str],
    anchors: list[str],
) -> str:
    n_keywords = int(rng.integers(3, 8))
    extra_count = max(0, n_keywords - len(anchors))
    others = [kw for kw in pool if kw not in anchors]
    extra_count = min(extra_count, len(others))
    picked = list(rng.choice(len(others), size=extra_count, replace=False))
    words = list(anchors) + [others[i] for i in picked]
    rng.shuffle(words)
    return " ".join(words)


def generate_synthetic_log(config: SyntheticConfig) -> QueryLog:
    """Deterministically generate a topic-drift session log."""
    rng = np.random.Generator(np.random.PCG64(config.seed))
    pools = [
        [f"t{t:02d}w{k:02d}" for k in range(config.keywords_per_topic)]
        for t in range(config.n_topics)
    ]
    low, high = config.session_length_range
    anchor_count = min(2, config.keywords_per_topic - 1)
    sessions: list[Session] = []
    for s in range(config.n_sessions):
        topic = int(rng.integers(config.n_topics))
        length = int(rng.integers(low, high + 1))
        anchors = _draw_anchors(rng, pools[topic], anchor_count)
        queries: list[str] = []
        for q in range(length):
            if q > 0 and rng.random() < config.drift_probability:
                step = 1 if rng.random() < 0.5 else -1
                topic = (topic + step) % config.n_topics
                anchors = _draw_anchors(rng, pools[topic], anchor_count)
            query = _make_query(rng, pools[topic], anchors)
            attempts = 0
            while queries and query == queries[-1] and attempts < 16:
                query = _make_query(rng, pools[topic], anchors)
                attempts += 1
            queries.append(query)
        sessions.append(Session(f"s{s:05d}", queries))
    return QueryLog(sessions)


def _draw_anchors(rng: np.random.Generator, pool: list[str], count: int) -> list[str]:
    picked = rng.choice(len(pool), size=count, replace=False)
    return [pool[i] for i in picked]


def split_log(log: QueryLog, eval_fraction: float, seed: int) -> tuple[QueryLog, QueryLog]:
    """Split sessions into disjoint train and eval logs, deterministically.

    The eval side receives floor(n * eval_fraction) sessions, at least one;
    both sides must end up non-empty.
    """
    if not 0.0 < eval_fraction < 1.0:
        raise ConfigurationError(
            f"eval_fraction must lie strictly in (0, 1), got {eval_fraction}"
        )
    n = log.n_sessions
    if n < 2:
        raise DataError(f"cannot split a log with {n} session(s)")
    n_eval = max(1, int(n * eval_fraction))
    if n_eval >= n:
        raise DataError(
            f"eval_fraction {eval_fraction} leaves no training sessions for n={n}"
        )
    rng = np.random.Generator(np.random.PCG64(seed))
    permutation = rng.permutation(n)
    eval_indices = set(int(i) for i in permutation[:n_eval])
    train_sessions = [s for i, s in enumerate(log.sessions) if i not in eval_indices]
    eval_sessions = [s for i, s in enumerate(log.sessions) if i in eval_indices]
    return QueryLog(train_sessions), QueryLog(eval_sessions)
