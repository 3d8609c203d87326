"""Adversarial bandit over expert-generated query candidates.

The package recommends the next query in a search session by running
exponential-weights bandit learning over a candidate set that pluggable
expert generators grow round by round, and ships a replay harness that
scores policies on logged sessions with a binary word-overlap reward.
"""

__version__ = "0.1.0"

from .bandit import (
    BanditConfig,
    Exp3Fixed,
    Exp3SS,
    ScoreThreshold,
    SelectionRule,
    StepOutcome,
    TopK,
    run_exp3_fixed,
    theoretical_eta,
)
from .data import (
    QueryLog,
    Session,
    SyntheticConfig,
    generate_synthetic_log,
    load_log,
    read_log,
    split_log,
    write_log,
)
from .errors import ConfigurationError, DataError, ExpertError, SimulationError
from .experts import (
    AdjacencyExpert,
    Expert,
    ExpertRecommendation,
    ExternalExpert,
    NgramExpert,
    QueryContext,
    ScriptedExpert,
    load_expert,
    save_expert,
    train_adjacency_expert,
    train_ngram_expert,
    union_candidates,
)
from .metrics import (
    HashEmbedder,
    PretrainedEmbedder,
    QueryEmbedding,
    RewardRule,
    context_similarity,
    cosine_similarity,
    euclidean_distance,
    normalize_query,
    overlap_ratio,
    overlap_reward,
    split_words,
    tokenize,
)
from .simulator import (
    ExperimentResult,
    Exp3FixedPolicy,
    Exp3SSPolicy,
    ExpertTop1Policy,
    Policy,
    SimulationConfig,
    UserModel,
    UserState,
    hindsight_best,
    run_experiment,
    run_session,
    step_user,
)
from .traces import PolicyAggregate, RegretTrace, aggregate_traces, candidate_growth_stats
