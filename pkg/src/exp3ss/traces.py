"""Per-round run records and their cross-session aggregation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigurationError


@dataclass
class RegretTrace:
    """One policy's round-by-round record over a single session replay.

    Regret is measured against the all-ones reward sequence: after t rounds
    the cumulative regret is R(t) = t - G(t) where G(t) is the reward sum,
    so the derived views below are exact recomputations from ``rewards``.
    """

    rewards: list[float] = field(default_factory=list)
    chosen: list[str] = field(default_factory=list)
    candidate_sizes: list[int] = field(default_factory=list)
    context_cosine: list[float] = field(default_factory=list)
    context_distance: list[float] = field(default_factory=list)
    targets: list[str] = field(default_factory=list)
    arm_pool: list[str] = field(default_factory=list)

    @property
    def rounds(self) -> int:
        return len(self.rewards)

    @property
    def total_reward(self) -> float:
        """G(T), the reward accumulated over the whole trace."""
        return float(sum(self.rewards))

    @property
    def total_regret(self) -> float:
        """R(T) = T - G(T)."""
        return self.rounds - self.total_reward

    def cumulative_reward(self) -> list[float]:
        total = 0.0
        out = []
        for r in self.rewards:
            total += r
            out.append(total)
        return out

    def cumulative_regret(self) -> list[float]:
        return [t - g for t, g in enumerate(self.cumulative_reward(), start=1)]

    def per_round_regret(self) -> list[float]:
        """Time-averaged regret R(t)/t at each round t."""
        return [reg / t for t, reg in enumerate(self.cumulative_regret(), start=1)]

    def instantaneous_regret(self) -> list[float]:
        return [1.0 - r for r in self.rewards]


@dataclass
class PolicyAggregate:
    """Round-wise statistics of one policy across paired sessions.

    Arrays are indexed by round - 1 and have one entry per round.  Standard
    errors use the sample standard deviation (ddof=1) and are 0 for a single
    trace.
    """

    rounds: int
    n_traces: int
    mean_per_round_regret: np.ndarray
    se_per_round_regret: np.ndarray
    mean_cumulative_regret: np.ndarray
    mean_instantaneous_regret: np.ndarray
    mean_candidate_size: np.ndarray
    min_candidate_size: np.ndarray
    max_candidate_size: np.ndarray
    mean_context_cosine: np.ndarray
    mean_context_distance: np.ndarray


def _stack(traces: Sequence[RegretTrace], rows) -> np.ndarray:
    return np.array([rows(trace) for trace in traces], dtype=float)


def aggregate_traces(traces: Sequence[RegretTrace]) -> PolicyAggregate:
    if not traces:
        raise ConfigurationError("cannot aggregate zero traces")
    rounds = traces[0].rounds
    for trace in traces:
        if trace.rounds != rounds:
            raise ConfigurationError(
                f"traces disagree on round count: {trace.rounds} vs {rounds}"
            )
    per_round = _stack(traces, lambda t: t.per_round_regret())
    cumulative = _stack(traces, lambda t: t.cumulative_regret())
    instantaneous = _stack(traces, lambda t: t.instantaneous_regret())
    sizes = _stack(traces, lambda t: t.candidate_sizes)
    cosines = _stack(traces, lambda t: t.context_cosine)
    distances = _stack(traces, lambda t: t.context_distance)
    n = len(traces)
    if n > 1:
        se = per_round.std(axis=0, ddof=1) / np.sqrt(n)
    else:
        se = np.zeros(rounds)
    return PolicyAggregate(
        rounds=rounds,
        n_traces=n,
        mean_per_round_regret=per_round.mean(axis=0),
        se_per_round_regret=se,
        mean_cumulative_regret=cumulative.mean(axis=0),
        mean_instantaneous_regret=instantaneous.mean(axis=0),
        mean_candidate_size=sizes.mean(axis=0),
        min_candidate_size=sizes.min(axis=0),
        max_candidate_size=sizes.max(axis=0),
        mean_context_cosine=cosines.mean(axis=0),
        mean_context_distance=distances.mean(axis=0),
    )


def candidate_growth_stats(
    traces: Sequence[RegretTrace],
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-round (mean, min, max) of the candidate-set size across traces."""
    if not traces:
        raise ConfigurationError("cannot aggregate zero traces")
    sizes = _stack(traces, lambda t: t.candidate_sizes)
    return sizes.mean(axis=0), sizes.min(axis=0), sizes.max(axis=0)
