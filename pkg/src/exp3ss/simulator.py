"""Session replay against a logged user, policies, and paired experiments.

Each round the active policy recommends one query, the reward is the binary
word overlap against the session's current target query, and the simulated
user advances: under ``advance-on-click`` a rewarded recommendation enters
the context as if clicked, otherwise the true target enters as if typed;
under ``always-advance`` the true target always enters.  Either way the
context grows by exactly one query per round, and once the session's last
query is reached it stays the target for all remaining rounds.

Experiments are paired: every policy replays the same sampled sessions with
the same per-session seeds, so cross-policy differences are not sampling
noise.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Sequence, Union

import numpy as np

from .bandit import BanditConfig, Exp3Fixed, Exp3SS, SelectionRule, TopK
from .data import QueryLog
from .errors import ConfigurationError, DataError, SimulationError
from .experts import Expert, QueryContext, union_candidates
from .metrics import HashEmbedder, RewardRule, normalize_query
from .traces import (
    PolicyAggregate,
    RegretTrace,
    aggregate_traces,
    candidate_growth_stats,
)

__all__ = [
    "UserModel",
    "UserState",
    "step_user",
    "Exp3SSPolicy",
    "Exp3FixedPolicy",
    "ExpertTop1Policy",
    "Policy",
    "policy_name",
    "SimulationConfig",
    "run_session",
    "run_experiment",
    "ExperimentResult",
    "hindsight_best",
    "candidate_growth_stats",
    "session_seed",
]

logger = logging.getLogger(__name__)

_SAMPLE_STREAM = 0x5E5510


class UserModel(str, Enum):
    ADVANCE_ON_CLICK = "advance-on-click"
    ALWAYS_ADVANCE = "always-advance"


@dataclass(frozen=True)
class UserState:
    """A simulated user mid-session: the logged queries, the index of the
    query currently being predicted, and the context built so far."""

    session: tuple[str, ...]
    target_index: int
    context: QueryContext

    @property
    def target(self) -> str:
        return self.session[self.target_index]


def step_user(
    user: UserState,
    recommended: str,
    model: UserModel,
    reward_rule: RewardRule = RewardRule(),
) -> tuple[int, UserState]:
    """Score one recommendation and advance the user by one round.

    Returns the binary reward and the new state.  The target advances until
    it reaches the session's final query and then holds there.
    """
    target = user.target
    reward = reward_rule.score(recommended, target)
    if model is UserModel.ADVANCE_ON_CLICK and reward == 1:
        observed = normalize_query(recommended)
    else:
        observed = target
    next_index = min(user.target_index + 1, len(user.session) - 1)
    return reward, UserState(
        session=user.session,
        target_index=next_index,
        context=user.context.extended(observed),
    )


@dataclass(frozen=True)
class Exp3SSPolicy:
    config: BanditConfig = field(default_factory=BanditConfig)


@dataclass(frozen=True)
class Exp3FixedPolicy:
    """Fixed arm set built once from the experts' first-round union."""

    eta: float = 0.1
    arm_cap: int = 50

    def __post_init__(self) -> None:
        if not 0.0 < self.eta < 1.0:
            raise ConfigurationError(f"eta must lie strictly in (0, 1), got {self.eta}")
        if self.arm_cap < 1:
            raise ConfigurationError(f"arm_cap must be >= 1, got {self.arm_cap}")


@dataclass(frozen=True)
class ExpertTop1Policy:
    """Always play the named expert's highest-scored candidate; no learning."""

    expert_index: int

    def __post_init__(self) -> None:
        if self.expert_index < 0:
            raise ConfigurationError(f"expert_index must be >= 0, got {self.expert_index}")


Policy = Union[Exp3SSPolicy, Exp3FixedPolicy, ExpertTop1Policy]


def policy_name(policy: Policy) -> str:
    if isinstance(policy, Exp3SSPolicy):
        return "exp3ss"
    if isinstance(policy, Exp3FixedPolicy):
        return "exp3-fixed"
    if isinstance(policy, ExpertTop1Policy):
        return f"expert-top1:{policy.expert_index}"
    raise ConfigurationError(f"unknown policy {policy!r}")


@dataclass(frozen=True)
class SimulationConfig:
    rounds: int = 500
    n_sessions: int = 10
    user_model: UserModel = UserModel.ADVANCE_ON_CLICK
    seed: int = 0
    policy: Policy | None = None

    def __post_init__(self) -> None:
        if self.rounds < 1:
            raise ConfigurationError(f"rounds must be >= 1, got {self.rounds}")
        if self.n_sessions < 1:
            raise ConfigurationError(f"n_sessions must be >= 1, got {self.n_sessions}")
        if not isinstance(self.user_model, UserModel):
            raise ConfigurationError(f"unknown user model {self.user_model!r}")


def session_seed(base_seed: int, ordinal: int) -> int:
    """Derive the per-session seed shared by every policy in a paired run."""
    entropy = (int(base_seed) & 0xFFFFFFFFFFFFFFFF, int(ordinal))
    return int(np.random.SeedSequence(entropy).generate_state(1, np.uint64)[0])


class _ContextEmbeddings:
    """Incrementally embedded context for fast per-round similarity means."""

    def __init__(self, embedder):
        self._embedder = embedder
        self._vectors: list[np.ndarray] = []
        self._norms: list[float] = []

    def add(self, query: str) -> None:
        emb = self._embedder.embed(query)
        self._vectors.append(emb.vector)
        self._norms.append(emb.norm)

    def similarity(self, predicted: str) -> tuple[float, float]:
        emb = self._embedder.embed(predicted)
        matrix = np.array(self._vectors)
        norms = np.array(self._norms)
        dots = matrix @ emb.vector
        denominator = norms * emb.norm
        cosines = np.divide(
            dots, denominator, out=np.zeros_like(dots), where=denominator > 0.0
        )
        distances = np.linalg.norm(matrix - emb.vector, axis=1)
        return float(cosines.mean()), float(distances.mean())


def _prepare_session(log: QueryLog, session_id: str) -> list[str]:
    session = log.session_by_id(session_id)
    if session is None:
        raise SimulationError(f"session {session_id!r} not found in the log")
    queries = [q for q in (normalize_query(q) for q in session.queries) if q]
    if len(queries) < 2:
        raise SimulationError(
            f"session {session_id!r} has fewer than two usable queries"
        )
    return queries


def run_session(
    log: QueryLog,
    session_id: str,
    policy: Policy,
    experts: Sequence[Expert],
    config: SimulationConfig,
    *,
    reward_rule: RewardRule = RewardRule(),
    embedder=None,
    seed: int | None = None,
) -> RegretTrace:
    """Replay one session under one policy for ``config.rounds`` rounds.

    ``seed`` overrides the bandit's random stream (paired experiments pass a
    per-session seed so policies face identical draws); it defaults to
    ``config.seed``.
    """
    queries = _prepare_session(log, session_id)
    if embedder is None:
        embedder = HashEmbedder()
    bandit_seed = config.seed if seed is None else seed
    user = UserState(
        session=tuple(queries),
        target_index=1,
        context=QueryContext((queries[0],)),
    )
    context_embeddings = _ContextEmbeddings(embedder)
    context_embeddings.add(queries[0])
    trace = RegretTrace()

    if isinstance(policy, Exp3SSPolicy):
        runner = _Exp3SSRunner(policy, experts, bandit_seed)
    elif isinstance(policy, Exp3FixedPolicy):
        runner = _Exp3FixedRunner(policy, experts, bandit_seed)
    elif isinstance(policy, ExpertTop1Policy):
        runner = _ExpertTop1Runner(policy, experts)
    else:
        raise ConfigurationError(f"unknown policy {policy!r}")

    for _ in range(config.rounds):
        chosen, candidate_size = runner.choose(user.context)
        cosine, distance = context_embeddings.similarity(chosen)
        target = user.target
        reward, user = step_user(user, chosen, config.user_model, reward_rule)
        runner.learn(chosen, reward)
        context_embeddings.add(user.context.executed[-1])
        trace.rewards.append(float(reward))
        trace.chosen.append(chosen)
        trace.candidate_sizes.append(candidate_size)
        trace.context_cosine.append(cosine)
        trace.context_distance.append(distance)
        trace.targets.append(target)
    trace.arm_pool = runner.arm_pool()
    return trace


class _Exp3SSRunner:
    def __init__(self, policy: Exp3SSPolicy, experts: Sequence[Expert], seed: int):
        self.bandit = Exp3SS(replace(policy.config, rng_seed=seed))
        self.rule: SelectionRule = policy.config.selection_rule
        self.experts = experts

    def choose(self, context: QueryContext) -> tuple[str, int]:
        pooled = union_candidates(self.experts, context, self.rule)
        self.bandit.ingest_candidates(rec.query for rec in pooled)
        return self.bandit.select_arm(), len(self.bandit.arms)

    def learn(self, chosen: str, reward: float) -> None:
        self.bandit.update(chosen, reward)

    def arm_pool(self) -> list[str]:
        return list(self.bandit.arms)


class _Exp3FixedRunner:
    def __init__(self, policy: Exp3FixedPolicy, experts: Sequence[Expert], seed: int):
        self.policy = policy
        self.experts = experts
        self.seed = seed
        self.bandit: Exp3Fixed | None = None

    def choose(self, context: QueryContext) -> tuple[str, int]:
        if self.bandit is None:
            pooled = union_candidates(self.experts, context, TopK(self.policy.arm_cap))
            arms = [rec.query for rec in pooled[: self.policy.arm_cap]]
            if not arms:
                raise SimulationError("no candidates were proposed on the first round")
            self.bandit = Exp3Fixed(arms, self.policy.eta, rng_seed=self.seed)
        return self.bandit.select_arm(), len(self.bandit.arms)

    def learn(self, chosen: str, reward: float) -> None:
        assert self.bandit is not None
        self.bandit.update(chosen, reward)

    def arm_pool(self) -> list[str]:
        return list(self.bandit.arms) if self.bandit is not None else []


class _ExpertTop1Runner:
    def __init__(self, policy: ExpertTop1Policy, experts: Sequence[Expert]):
        if policy.expert_index >= len(experts):
            raise ConfigurationError(
                f"expert_index {policy.expert_index} out of range for {len(experts)} experts"
            )
        self.expert = experts[policy.expert_index]
        self.played: set[str] = set()

    def choose(self, context: QueryContext) -> tuple[str, int]:
        top = self.expert.recommend(context, TopK(1))
        if not top:
            # Nothing to play: an empty recommendation scores reward 0.
            return "", 0
        self.played.add(top[0].query)
        return top[0].query, 1

    def learn(self, chosen: str, reward: float) -> None:
        pass

    def arm_pool(self) -> list[str]:
        return sorted(self.played)


@dataclass
class ExperimentResult:
    session_ids: list[str]
    aggregates: dict[str, PolicyAggregate]
    traces: dict[str, list[RegretTrace]]
    config: SimulationConfig

    def policy_names(self) -> list[str]:
        return list(self.aggregates.keys())


def run_experiment(
    log: QueryLog,
    policies: Sequence[Policy],
    experts: Sequence[Expert],
    config: SimulationConfig,
    *,
    reward_rule: RewardRule = RewardRule(),
    embedder=None,
) -> ExperimentResult:
    """Replay ``config.n_sessions`` sampled sessions under every policy.

    Sessions are drawn without replacement by ``config.seed``; each ordinal
    gets a fixed per-session seed shared across policies (paired design).
    """
    if not policies:
        raise ConfigurationError("at least one policy is required")
    names = [policy_name(p) for p in policies]
    if len(set(names)) != len(names):
        raise ConfigurationError(f"duplicate policy names in {names}")
    usable = [s.session_id for s in log.sessions if len(s.queries) >= 2]
    if len(usable) < config.n_sessions:
        raise DataError(
            f"need {config.n_sessions} sessions with >= 2 queries, found {len(usable)}"
        )
    sampler = np.random.Generator(
        np.random.PCG64(
            np.random.SeedSequence(
                (int(config.seed) & 0xFFFFFFFFFFFFFFFF, _SAMPLE_STREAM)
            )
        )
    )
    picked = sampler.choice(len(usable), size=config.n_sessions, replace=False)
    session_ids = [usable[int(i)] for i in picked]
    if embedder is None:
        embedder = HashEmbedder()
    traces: dict[str, list[RegretTrace]] = {}
    for name, policy in zip(names, policies):
        logger.info("running policy %s over %d sessions", name, len(session_ids))
        traces[name] = [
            run_session(
                log,
                session_id,
                policy,
                experts,
                config,
                reward_rule=reward_rule,
                embedder=embedder,
                seed=session_seed(config.seed, ordinal),
            )
            for ordinal, session_id in enumerate(session_ids)
        ]
    aggregates = {name: aggregate_traces(traces[name]) for name in names}
    return ExperimentResult(
        session_ids=session_ids, aggregates=aggregates, traces=traces, config=config
    )


def hindsight_best(trace: RegretTrace, reward_rule: RewardRule = RewardRule()) -> float:
    """Best fixed-arm reward in hindsight: replay every arm in the trace's
    final candidate pool against the recorded targets and take the maximum
    total.  Brute force; exact."""
    if not trace.targets:
        raise ConfigurationError("trace has no recorded targets to replay")
    best = 0.0
    for arm in trace.arm_pool:
        total = float(sum(reward_rule.score(arm, target) for target in trace.targets))
        if total > best:
            best = total
    return best
