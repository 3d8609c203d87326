"""Exponential-weights bandits over query candidates.

``Exp3SS`` runs adversarial exponential weighting over a candidate set that
grows as experts propose new queries.  Each round proceeds strictly in the
order ingest -> probabilities -> select -> update:

* round 1 initializes every candidate at w = eta / ((1 - eta) * |C|);
* later rounds carry each surviving candidate's post-update weight forward
  unchanged, and split w_new = (eta / (1 - eta)) * sum(carried) evenly over
  the candidates first seen this round;
* p_i = (1 - eta) * w_i / sum(w) + eta / |C| mixes in uniform exploration;
* the played arm's weight is scaled by exp(eta * r / p), the importance-
  weighted update, while unplayed arms keep theirs.

Probabilities depend only on weight ratios and the new-arm rule is linear in
the carried weights, so rescaling all weights by a positive constant changes
nothing observable.  By default the carried weights are renormalized to sum
to 1 after every update to keep them bounded; ``renormalize=False`` keeps
the raw recursion for side-by-side comparison.

``Exp3Fixed`` is the classic fixed-arm-set variant with uniform initial
weights and the same probability and update formulas; ``Exp3SS`` reduces to
it exactly when no candidate ever arrives after round 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, SimulationError
from .metrics import normalize_query
from .traces import RegretTrace

MAX_ETA = 1.0 - 1e-6
STATE_FORMAT_VERSION = 1


@dataclass(frozen=True)
class TopK:
    """Keep each expert's k highest-scored recommendations."""

    k: int


@dataclass(frozen=True)
class ScoreThreshold:
    """Keep each expert's recommendations scoring at least epsilon."""

    epsilon: float


SelectionRule = TopK | ScoreThreshold


def validate_rule(rule: SelectionRule) -> None:
    if isinstance(rule, TopK):
        if rule.k < 1:
            raise ConfigurationError(f"TopK needs k >= 1, got {rule.k}")
    elif isinstance(rule, ScoreThreshold):
        if not 0.0 <= rule.epsilon <= 1.0:
            raise ConfigurationError(
                f"ScoreThreshold needs epsilon in [0, 1], got {rule.epsilon}"
            )
    else:
        raise ConfigurationError(f"unknown selection rule {rule!r}")


def rule_to_dict(rule: SelectionRule) -> dict:
    if isinstance(rule, TopK):
        return {"type": "top_k", "k": rule.k}
    return {"type": "score_threshold", "epsilon": rule.epsilon}


def rule_from_dict(data: dict) -> SelectionRule:
    kind = data.get("type")
    if kind == "top_k":
        return TopK(int(data["k"]))
    if kind == "score_threshold":
        return ScoreThreshold(float(data["epsilon"]))
    raise ConfigurationError(f"unknown selection rule type {kind!r}")


@dataclass(frozen=True)
class BanditConfig:
    eta: float = 0.1
    selection_rule: SelectionRule = field(default_factory=lambda: TopK(3))
    rng_seed: int = 0
    renormalize: bool = True

    def __post_init__(self) -> None:
        if not 0.0 < self.eta < 1.0:
            raise ConfigurationError(f"eta must lie strictly in (0, 1), got {self.eta}")
        validate_rule(self.selection_rule)


@dataclass(frozen=True)
class StepOutcome:
    """What one round did: the played arm, its probability at play time, the
    observed (clipped) reward, and the importance-weighted pseudo-reward
    reward / probability.  Unplayed arms implicitly received pseudo-reward 0.
    """

    chosen: str
    probability: float
    reward: float
    pseudo_reward: float


def theoretical_eta(horizon: int, candidate_cap: int) -> float:
    """Learning rate 1 / sqrt(T * |C_T|) for horizon T and a bound on the
    final candidate-set size, clamped into (0, 1)."""
    if horizon < 1:
        raise ConfigurationError(f"horizon must be >= 1, got {horizon}")
    if candidate_cap < 1:
        raise ConfigurationError(f"candidate cap must be >= 1, got {candidate_cap}")
    return min(MAX_ETA, 1.0 / math.sqrt(horizon * candidate_cap))


def _format_weight(value: float) -> str:
    # 17 significant digits round-trip any IEEE double exactly.
    return format(value, ".17g")


def _mixed_probabilities(weights: np.ndarray, eta: float) -> np.ndarray:
    return (1.0 - eta) * weights / weights.sum() + eta / len(weights)


def _sample_index(rng: np.random.Generator, probabilities: np.ndarray) -> int:
    # Inverse-CDF draw from a single uniform: the smallest index whose
    # cumulative probability exceeds u.  One generator call per selection.
    u = rng.random()
    cumulative = np.cumsum(probabilities)
    index = int(np.searchsorted(cumulative, u, side="right"))
    return min(index, len(probabilities) - 1)


def _clean_proposals(proposals: Iterable[str]) -> list[str]:
    seen: set[str] = set()
    cleaned: list[str] = []
    for text in proposals:
        norm = normalize_query(text)
        if norm and norm not in seen:
            seen.add(norm)
            cleaned.append(norm)
    return cleaned


class Exp3SS:
    """Exponential-weights bandit over a growing candidate set.

    Candidates are identified by normalized query text; their order of first
    arrival fixes the index layout of the weight and probability vectors.
    Selection draws exactly one uniform variate from a seeded PCG64 stream,
    so runs are reproducible bit-for-bit given the same seed and inputs.
    """

    def __init__(self, config: BanditConfig):
        self.config = config
        self.round = 0
        self.arms: list[str] = []
        self._positions: dict[str, int] = {}
        self._weights = np.zeros(0)
        self._carried = np.zeros(0)
        self._probabilities: np.ndarray | None = None
        self._rng = np.random.Generator(np.random.PCG64(config.rng_seed))
        self._awaiting_update = False

    @property
    def eta(self) -> float:
        return self.config.eta

    @property
    def weights(self) -> dict[str, float]:
        return {arm: float(w) for arm, w in zip(self.arms, self._weights)}

    @property
    def carried_weights(self) -> dict[str, float]:
        return {arm: float(w) for arm, w in zip(self.arms, self._carried)}

    def ingest_candidates(self, proposals: Iterable[str]) -> list[str]:
        """Start a round: merge this round's proposals into the candidate set.

        Returns the normalized texts of the candidates that are new this
        round.  Round 1 must receive at least one usable proposal; later
        rounds accept an empty batch (the set simply carries over).
        """
        if self._awaiting_update:
            raise SimulationError(
                "ingest_candidates called twice in one round; update must run first"
            )
        eta = self.config.eta
        new_arms = [t for t in _clean_proposals(proposals) if t not in self._positions]
        self.round += 1
        if self.round == 1:
            if not new_arms:
                raise SimulationError("no candidates were proposed on the first round")
            self._install(new_arms)
            n = len(self.arms)
            self._weights = np.full(n, eta / ((1.0 - eta) * n))
        else:
            carried_total = float(self._carried.sum())
            if new_arms:
                self._install(new_arms)
                share = (eta / (1.0 - eta)) * carried_total / len(new_arms)
                self._weights = np.concatenate(
                    [self._carried, np.full(len(new_arms), share)]
                )
            else:
                self._weights = self._carried.copy()
        self._probabilities = None
        self._awaiting_update = True
        return new_arms

    def _install(self, new_arms: Sequence[str]) -> None:
        for arm in new_arms:
            self._positions[arm] = len(self.arms)
            self.arms.append(arm)

    def _refresh_probabilities(self) -> np.ndarray:
        if self.round == 0:
            raise SimulationError("no candidates ingested yet")
        if self._probabilities is None:
            self._probabilities = _mixed_probabilities(self._weights, self.config.eta)
        return self._probabilities

    def compute_probabilities(self) -> dict[str, float]:
        probs = self._refresh_probabilities()
        return {arm: float(p) for arm, p in zip(self.arms, probs)}

    def probability_vector(self) -> np.ndarray:
        """Probabilities aligned with ``self.arms``; a fresh copy."""
        return self._refresh_probabilities().copy()

    def select_arm(self) -> str:
        probs = self._refresh_probabilities()
        return self.arms[_sample_index(self._rng, probs)]

    def update(self, chosen: str, reward: float) -> StepOutcome:
        """Finish the round: apply the exponential update for ``chosen``.

        The reward is clipped into [0, 1] here, at the learning boundary.
        """
        if not self._awaiting_update:
            raise SimulationError("update called without a matching ingest_candidates")
        position = self._positions.get(normalize_query(chosen))
        if position is None:
            raise ValueError(f"chosen arm {chosen!r} is not in the candidate set")
        probs = self._refresh_probabilities()
        clipped = min(max(float(reward), 0.0), 1.0)
        probability = float(probs[position])
        pseudo_reward = clipped / probability
        carried = self._weights.copy()
        carried[position] *= math.exp(self.config.eta * pseudo_reward)
        if not np.isfinite(carried[position]):
            raise SimulationError(
                "weight update overflowed; rerun with renormalization enabled"
            )
        if self.config.renormalize:
            carried /= carried.sum()
        self._carried = carried
        self._awaiting_update = False
        self._probabilities = None
        return StepOutcome(
            chosen=self.arms[position],
            probability=probability,
            reward=clipped,
            pseudo_reward=pseudo_reward,
        )

    def to_state_dict(self) -> dict:
        """JSON-ready snapshot; weights as decimal strings that round-trip
        doubles exactly."""
        return {
            "format_version": STATE_FORMAT_VERSION,
            "round": self.round,
            "arms": list(self.arms),
            "weights": [_format_weight(w) for w in self._weights],
            "carried_weights": [_format_weight(w) for w in self._carried],
            "awaiting_update": self._awaiting_update,
            "config": {
                "eta": self.config.eta,
                "selection_rule": rule_to_dict(self.config.selection_rule),
                "rng_seed": self.config.rng_seed,
                "renormalize": self.config.renormalize,
            },
            "rng_state": self._rng.bit_generator.state,
        }

    @classmethod
    def from_state_dict(cls, state: dict) -> "Exp3SS":
        version = state.get("format_version")
        if version != STATE_FORMAT_VERSION:
            raise ConfigurationError(f"unsupported state format version {version!r}")
        config = BanditConfig(
            eta=float(state["config"]["eta"]),
            selection_rule=rule_from_dict(state["config"]["selection_rule"]),
            rng_seed=int(state["config"]["rng_seed"]),
            renormalize=bool(state["config"]["renormalize"]),
        )
        bandit = cls(config)
        bandit.round = int(state["round"])
        bandit.arms = list(state["arms"])
        bandit._positions = {arm: i for i, arm in enumerate(bandit.arms)}
        bandit._weights = np.array([float(w) for w in state["weights"]])
        bandit._carried = np.array([float(w) for w in state["carried_weights"]])
        bandit._awaiting_update = bool(state["awaiting_update"])
        bandit._rng.bit_generator.state = state["rng_state"]
        return bandit


class Exp3Fixed:
    """Classic exponential-weights bandit over a fixed arm set.

    Uniform initial weights, then the same mixed probabilities and
    importance-weighted exponential updates as ``Exp3SS``.
    """

    def __init__(
        self,
        arms: Iterable[str],
        eta: float,
        *,
        rng_seed: int = 0,
        renormalize: bool = True,
    ):
        if not 0.0 < eta < 1.0:
            raise ConfigurationError(f"eta must lie strictly in (0, 1), got {eta}")
        self.arms = _clean_proposals(arms)
        if not self.arms:
            raise SimulationError("fixed arm set is empty")
        self.eta = float(eta)
        self.renormalize = renormalize
        self._positions = {arm: i for i, arm in enumerate(self.arms)}
        self._weights = np.ones(len(self.arms))
        self._probabilities: np.ndarray | None = None
        self._rng = np.random.Generator(np.random.PCG64(rng_seed))

    def _refresh_probabilities(self) -> np.ndarray:
        if self._probabilities is None:
            self._probabilities = _mixed_probabilities(self._weights, self.eta)
        return self._probabilities

    def compute_probabilities(self) -> dict[str, float]:
        probs = self._refresh_probabilities()
        return {arm: float(p) for arm, p in zip(self.arms, probs)}

    def probability_vector(self) -> np.ndarray:
        return self._refresh_probabilities().copy()

    def select_arm(self) -> str:
        probs = self._refresh_probabilities()
        return self.arms[_sample_index(self._rng, probs)]

    def update(self, chosen: str, reward: float) -> StepOutcome:
        position = self._positions.get(normalize_query(chosen))
        if position is None:
            raise ValueError(f"chosen arm {chosen!r} is not in the arm set")
        probs = self._refresh_probabilities()
        clipped = min(max(float(reward), 0.0), 1.0)
        probability = float(probs[position])
        pseudo_reward = clipped / probability
        self._weights = self._weights.copy()
        self._weights[position] *= math.exp(self.eta * pseudo_reward)
        if not np.isfinite(self._weights[position]):
            raise SimulationError(
                "weight update overflowed; rerun with renormalization enabled"
            )
        if self.renormalize:
            self._weights /= self._weights.sum()
        self._probabilities = None
        return StepOutcome(
            chosen=self.arms[position],
            probability=probability,
            reward=clipped,
            pseudo_reward=pseudo_reward,
        )


def run_exp3_fixed(
    arms: Iterable[str],
    eta: float,
    reward_fn: Callable[[int, str], float],
    horizon: int,
    *,
    rng_seed: int = 0,
    renormalize: bool = True,
) -> RegretTrace:
    """Run ``Exp3Fixed`` for ``horizon`` rounds against a reward callback.

    ``reward_fn(t, arm)`` supplies the reward for the arm played at round t
    (1-based).  The returned trace has a constant candidate size and no
    context-similarity columns.
    """
    if horizon < 1:
        raise ConfigurationError(f"horizon must be >= 1, got {horizon}")
    bandit = Exp3Fixed(arms, eta, rng_seed=rng_seed, renormalize=renormalize)
    trace = RegretTrace(arm_pool=list(bandit.arms))
    for t in range(1, horizon + 1):
        arm = bandit.select_arm()
        outcome = bandit.update(arm, reward_fn(t, arm))
        trace.rewards.append(outcome.reward)
        trace.chosen.append(outcome.chosen)
        trace.candidate_sizes.append(len(bandit.arms))
    return trace
