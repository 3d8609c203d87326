"""Command-line interface: prepare logs, train experts, run experiments.

Subcommands:

* ``generate``      write a synthetic session log
* ``prepare``       validate and canonicalize a raw log (JSONL or TSV)
* ``train-experts`` fit experts on a log and persist fingerprinted artifacts
* ``simulate``      run policies over held-out sessions, emit regret.csv
* ``sweep-k``       repeat a simulation across per-expert top-k values

Exit statuses: 0 on success, 2 for usage or configuration problems (including
malformed input handed to ``prepare``), 3 for data or environment failures
during a run.  ``EXP3SS_LOG_LEVEL`` controls diagnostics on stderr.

``simulate`` writes ``regret.csv`` (one row per round and policy) plus a
``meta.json`` sidecar echoing the effective experiment spec; identical specs
produce byte-identical CSV files.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import shlex
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from . import __version__
from .bandit import ScoreThreshold, SelectionRule, TopK, theoretical_eta, BanditConfig
from .data import (
    QueryLog,
    SyntheticConfig,
    generate_synthetic_log,
    load_log,
    preprocess,
    read_log,
    split_log,
    write_log,
)
from .errors import ConfigurationError, DataError, SimulationError
from .experts import (
    AdjacencyExpert,
    Expert,
    ExternalExpert,
    NgramExpert,
    expert_fingerprint,
    load_expert,
    save_expert,
)
from .metrics import HashEmbedder, PretrainedEmbedder, RewardRule
from .simulator import (
    ExperimentResult,
    Exp3FixedPolicy,
    Exp3SSPolicy,
    ExpertTop1Policy,
    Policy,
    SimulationConfig,
    UserModel,
    run_experiment,
)

logger = logging.getLogger(__name__)

REGRET_CSV_HEADER = (
    "round,policy,mean_per_round_regret,se_per_round_regret,"
    "mean_cumulative_regret,mean_instantaneous_regret,mean_candidate_size,"
    "min_candidate_size,max_candidate_size,mean_context_cosine,"
    "mean_context_distance"
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_RUNTIME = 3


@dataclass
class ExperimentSpec:
    """Everything a simulation run needs, merged from a JSON spec file and
    command-line overrides and echoed verbatim into meta.json."""

    log: str | None = None
    experts: list[str] = field(default_factory=lambda: ["adjacency", "ngram"])
    policies: list[str] = field(default_factory=lambda: ["exp3ss"])
    rounds: int = 500
    sessions: int = 10
    k: int = 3
    eta: float = 0.1
    eta_theoretical: bool = False
    candidate_cap: int | None = None
    epsilon: float | None = None
    user_model: str = UserModel.ADVANCE_ON_CLICK.value
    seed: int = 0
    eval_fraction: float = 0.2
    out: str = "out"
    reward_coefficient: str = "dice"
    reward_strict: bool = True
    reward_multiset: bool = False
    embed_dim: int = 128
    embed_seed: int = 42
    vectors: str | None = None

    @classmethod
    def from_file(cls, path: str) -> "ExperimentSpec":
        try:
            with open(path, "r", encoding="utf-8") as handle:
                raw = json.load(handle)
        except FileNotFoundError:
            raise ConfigurationError(f"spec file not found: {path}")
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"invalid spec file {path}: {exc.msg}")
        if not isinstance(raw, dict):
            raise ConfigurationError(f"spec file {path} must hold a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigurationError(f"unknown spec keys: {sorted(unknown)}")
        return cls(**raw)

    def merged(self, args: argparse.Namespace) -> "ExperimentSpec":
        """Apply explicitly provided CLI flags over this spec."""
        updates: dict = {}
        mapping = {
            "log": "log",
            "experts": "experts",
            "policy": "policies",
            "rounds": "rounds",
            "sessions": "sessions",
            "k": "k",
            "eta": "eta",
            "eta_theoretical": "eta_theoretical",
            "candidate_cap": "candidate_cap",
            "epsilon": "epsilon",
            "user_model": "user_model",
            "seed": "seed",
            "eval_fraction": "eval_fraction",
            "out": "out",
            "embed_dim": "embed_dim",
            "embed_seed": "embed_seed",
            "vectors": "vectors",
        }
        for arg_name, spec_name in mapping.items():
            value = getattr(args, arg_name, None)
            if value is not None and value != []:
                updates[spec_name] = value
        return dataclasses.replace(self, **updates)

    def validate(self) -> None:
        if not self.log:
            raise ConfigurationError("a session log is required (--log or the spec file)")
        if self.rounds < 1:
            raise ConfigurationError(f"rounds must be >= 1, got {self.rounds}")
        if self.sessions < 1:
            raise ConfigurationError(f"sessions must be >= 1, got {self.sessions}")
        if self.k < 1:
            raise ConfigurationError(f"k must be >= 1, got {self.k}")
        if not 0.0 < self.eta < 1.0:
            raise ConfigurationError(f"eta must lie strictly in (0, 1), got {self.eta}")
        if self.epsilon is not None and not 0.0 <= self.epsilon <= 1.0:
            raise ConfigurationError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if self.candidate_cap is not None and self.candidate_cap < 1:
            raise ConfigurationError("candidate_cap must be >= 1")
        if not 0.0 < self.eval_fraction < 1.0:
            raise ConfigurationError(
                f"eval_fraction must lie strictly in (0, 1), got {self.eval_fraction}"
            )
        try:
            UserModel(self.user_model)
        except ValueError:
            choices = [m.value for m in UserModel]
            raise ConfigurationError(
                f"unknown user model {self.user_model!r}; expected one of {choices}"
            )
        if not self.experts:
            raise ConfigurationError("at least one expert is required")
        if not self.policies:
            raise ConfigurationError("at least one policy is required")
        for text in self.policies:
            parse_policy_text(text)  # raises on malformed descriptors
        RewardRule(
            coefficient=self.reward_coefficient,
            strict=self.reward_strict,
            multiset=self.reward_multiset,
        )

    def selection_rule(self) -> SelectionRule:
        if self.epsilon is not None:
            return ScoreThreshold(self.epsilon)
        return TopK(self.k)

    def effective_eta(self, n_experts: int) -> float:
        if not self.eta_theoretical:
            return self.eta
        cap = self.candidate_cap
        if cap is None:
            cap = self.k * n_experts * self.rounds
        return theoretical_eta(self.rounds, cap)

    def reward_rule(self) -> RewardRule:
        return RewardRule(
            coefficient=self.reward_coefficient,
            strict=self.reward_strict,
            multiset=self.reward_multiset,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def parse_policy_text(text: str) -> tuple[str, int | None]:
    """Split a policy descriptor into its kind and optional expert index."""
    if text == "exp3ss":
        return "exp3ss", None
    if text == "exp3-fixed":
        return "exp3-fixed", None
    if text.startswith("expert-top1:"):
        suffix = text.split(":", 1)[1]
        try:
            index = int(suffix)
        except ValueError:
            raise ConfigurationError(f"bad expert index in policy {text!r}")
        if index < 0:
            raise ConfigurationError(f"expert index must be >= 0 in policy {text!r}")
        return "expert-top1", index
    raise ConfigurationError(
        f"unknown policy {text!r}; expected exp3ss, exp3-fixed, or expert-top1:<i>"
    )


def build_policy(text: str, spec: ExperimentSpec, eta: float) -> Policy:
    kind, index = parse_policy_text(text)
    if kind == "exp3ss":
        return Exp3SSPolicy(
            BanditConfig(eta=eta, selection_rule=spec.selection_rule(), rng_seed=spec.seed)
        )
    if kind == "exp3-fixed":
        return Exp3FixedPolicy(eta=eta, arm_cap=50)
    assert index is not None
    return ExpertTop1Policy(expert_index=index)


def build_experts(
    specs: Sequence[str], train_log: QueryLog | None
) -> tuple[list[Expert], list[dict]]:
    """Materialize experts from descriptor strings.

    Descriptors: ``adjacency[:key=value,...]``, ``ngram[:key=value,...]``,
    ``bridge:<command line>``, or a path to a saved artifact.  Trainable
    kinds are fitted on ``train_log``.
    """
    experts: list[Expert] = []
    meta: list[dict] = []
    for position, text in enumerate(specs):
        kind, _, rest = text.partition(":")
        if kind == "adjacency":
            params = _parse_params(rest, {"alpha": float, "n_sim": int})
            expert: Expert = AdjacencyExpert(name=f"adjacency-{position}", **params)
            _fit(expert, train_log, text)
        elif kind == "ngram":
            params = _parse_params(rest, {"order": int, "beam_width": int, "max_len": int})
            expert = NgramExpert(name=f"ngram-{position}", **params)
            _fit(expert, train_log, text)
        elif kind == "bridge":
            command = shlex.split(rest)
            expert = ExternalExpert(command, name=f"bridge-{position}")
        elif text.endswith(".json") and Path(text).exists():
            expert = load_expert(text, name=f"artifact-{position}")
        else:
            raise ConfigurationError(
                f"unknown expert {text!r}; expected adjacency, ngram, "
                f"bridge:<command>, or an artifact path"
            )
        experts.append(expert)
        meta.append({"spec": text, "name": expert.name, "fingerprint": expert_fingerprint(expert)})
    return experts, meta


def _fit(expert: Expert, train_log: QueryLog | None, text: str) -> None:
    if train_log is None:
        raise ConfigurationError(f"expert {text!r} needs a training log")
    expert.fit(train_log)  # type: ignore[attr-defined]


def _parse_params(rest: str, schema: dict[str, type]) -> dict:
    params: dict = {}
    if not rest:
        return params
    for piece in rest.split(","):
        key, _, value = piece.partition("=")
        key = key.strip()
        if key not in schema:
            raise ConfigurationError(
                f"unknown expert parameter {key!r}; expected one of {sorted(schema)}"
            )
        try:
            params[key] = schema[key](value)
        except ValueError:
            raise ConfigurationError(f"bad value {value!r} for expert parameter {key!r}")
    return params


def _format_value(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_regret_csv(result: ExperimentResult, path: Path) -> None:
    lines = [REGRET_CSV_HEADER]
    for name in result.policy_names():
        agg = result.aggregates[name]
        for i in range(agg.rounds):
            row = [
                str(i + 1),
                name,
                repr(float(agg.mean_per_round_regret[i])),
                repr(float(agg.se_per_round_regret[i])),
                repr(float(agg.mean_cumulative_regret[i])),
                repr(float(agg.mean_instantaneous_regret[i])),
                repr(float(agg.mean_candidate_size[i])),
                str(int(agg.min_candidate_size[i])),
                str(int(agg.max_candidate_size[i])),
                repr(float(agg.mean_context_cosine[i])),
                repr(float(agg.mean_context_distance[i])),
            ]
            lines.append(",".join(row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _make_embedder(spec: ExperimentSpec):
    if spec.vectors:
        return PretrainedEmbedder.from_file(spec.vectors)
    return HashEmbedder(dim=spec.embed_dim, seed=spec.embed_seed)


def _run_simulation(spec: ExperimentSpec) -> tuple[ExperimentResult, dict]:
    """Shared core of simulate and sweep-k: split, train, run."""
    log = load_log(spec.log)
    train, eval_log = split_log(log, spec.eval_fraction, spec.seed)
    experts, expert_meta = build_experts(spec.experts, train)
    eta = spec.effective_eta(len(experts))
    policies = [build_policy(text, spec, eta) for text in spec.policies]
    config = SimulationConfig(
        rounds=spec.rounds,
        n_sessions=spec.sessions,
        user_model=UserModel(spec.user_model),
        seed=spec.seed,
    )
    embedder = _make_embedder(spec)
    result = run_experiment(
        eval_log,
        policies,
        experts,
        config,
        reward_rule=spec.reward_rule(),
        embedder=embedder,
    )
    for expert in experts:
        if isinstance(expert, ExternalExpert):
            expert.close()
    meta = {
        "spec": spec.to_dict(),
        "effective": {
            "eta": eta,
            "selection_rule": _rule_meta(spec.selection_rule()),
            "reward": spec.reward_rule().describe(),
            "embedding": embedder.describe(),
            "user_model": spec.user_model,
            "train_sessions": train.n_sessions,
            "eval_sessions": eval_log.n_sessions,
            "sampled_session_ids": result.session_ids,
            "experts": expert_meta,
            "policies": result.policy_names(),
        },
        "version": __version__,
    }
    return result, meta


def _rule_meta(rule: SelectionRule) -> dict:
    if isinstance(rule, TopK):
        return {"type": "top_k", "k": rule.k}
    return {"type": "score_threshold", "epsilon": rule.epsilon}


def _write_meta(meta: dict, path: Path) -> None:
    path.write_text(
        json.dumps(meta, indent=2, ensure_ascii=False, sort_keys=True) + "\n",
        encoding="utf-8",
    )


def cmd_generate(args: argparse.Namespace) -> int:
    config = SyntheticConfig(
        n_topics=args.topics,
        keywords_per_topic=args.keywords,
        n_sessions=args.sessions,
        session_length_range=(args.min_length, args.max_length),
        drift_probability=args.drift,
        seed=args.seed,
    )
    log = generate_synthetic_log(config)
    write_log(log, args.out)
    print(f"wrote {log.n_sessions} sessions ({log.n_queries} queries) to {args.out}")
    return EXIT_OK


def cmd_prepare(args: argparse.Namespace) -> int:
    raw = read_log(args.input, format=args.format)
    cleaned, stats = preprocess(raw)
    if not cleaned.sessions:
        raise DataError(f"no usable sessions in {args.input}")
    write_log(cleaned, args.out)
    print(
        f"sessions: {stats.sessions_kept}/{stats.sessions_in} kept "
        f"({stats.sessions_dropped} dropped)"
    )
    print(f"queries: {stats.queries_kept}/{stats.queries_in} kept")
    print(f"empty queries dropped: {stats.empty_queries_dropped}")
    print(f"consecutive duplicates collapsed: {stats.duplicates_collapsed}")
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_train_experts(args: argparse.Namespace) -> int:
    log = load_log(args.log)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    experts, _ = build_experts(args.experts, log)
    for expert in experts:
        path = out_dir / f"{expert.name}.json"
        fingerprint = save_expert(expert, str(path))
        print(f"{path} fingerprint={fingerprint}")
    return EXIT_OK


def cmd_simulate(args: argparse.Namespace) -> int:
    spec = ExperimentSpec.from_file(args.spec) if args.spec else ExperimentSpec()
    spec = spec.merged(args)
    spec.validate()
    out_dir = Path(spec.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    result, meta = _run_simulation(spec)
    csv_path = out_dir / "regret.csv"
    write_regret_csv(result, csv_path)
    _write_meta(meta, out_dir / "meta.json")
    for name in result.policy_names():
        agg = result.aggregates[name]
        final = float(agg.mean_cumulative_regret[-1])
        print(f"{name}: mean cumulative regret at T={agg.rounds} is {final:.3f}")
    print(f"wrote {csv_path}")
    return EXIT_OK


def cmd_sweep_k(args: argparse.Namespace) -> int:
    spec = ExperimentSpec.from_file(args.spec) if args.spec else ExperimentSpec()
    spec = spec.merged(args)
    k_values = args.k_values
    if not k_values:
        raise ConfigurationError("sweep-k needs at least one k value")
    if any(k < 1 for k in k_values):
        raise ConfigurationError(f"k values must be >= 1, got {k_values}")
    out_dir = Path(spec.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = ["k," + REGRET_CSV_HEADER]
    sweep_meta: dict = {"k_values": list(k_values), "runs": {}}
    for k in k_values:
        variant = dataclasses.replace(spec, k=k, epsilon=None)
        variant.validate()
        result, meta = _run_simulation(variant)
        sweep_meta["runs"][str(k)] = meta
        for name in result.policy_names():
            agg = result.aggregates[name]
            for i in range(agg.rounds):
                row = [
                    str(k),
                    str(i + 1),
                    name,
                    repr(float(agg.mean_per_round_regret[i])),
                    repr(float(agg.se_per_round_regret[i])),
                    repr(float(agg.mean_cumulative_regret[i])),
                    repr(float(agg.mean_instantaneous_regret[i])),
                    repr(float(agg.mean_candidate_size[i])),
                    str(int(agg.min_candidate_size[i])),
                    str(int(agg.max_candidate_size[i])),
                    repr(float(agg.mean_context_cosine[i])),
                    repr(float(agg.mean_context_distance[i])),
                ]
                lines.append(",".join(row))
        print(f"k={k} done")
    csv_path = out_dir / "sweep.csv"
    csv_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    _write_meta(sweep_meta, out_dir / "meta.json")
    print(f"wrote {csv_path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="exp3ss",
        description="Adversarial bandit over expert-generated query candidates.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_generate = sub.add_parser("generate", help="write a synthetic session log")
    p_generate.add_argument("--sessions", type=int, default=100)
    p_generate.add_argument("--topics", type=int, default=20)
    p_generate.add_argument("--keywords", type=int, default=8)
    p_generate.add_argument("--min-length", type=int, default=4)
    p_generate.add_argument("--max-length", type=int, default=10)
    p_generate.add_argument("--drift", type=float, default=0.1)
    p_generate.add_argument("--seed", type=int, default=0)
    p_generate.add_argument("--out", required=True)
    p_generate.set_defaults(handler=cmd_generate)

    p_prepare = sub.add_parser("prepare", help="validate and canonicalize a raw log")
    p_prepare.add_argument("input")
    p_prepare.add_argument("--format", choices=["jsonl", "tsv"], default="jsonl")
    p_prepare.add_argument("--out", required=True)
    p_prepare.set_defaults(handler=cmd_prepare)

    p_train = sub.add_parser("train-experts", help="fit experts and persist artifacts")
    p_train.add_argument("--log", required=True)
    p_train.add_argument(
        "--experts",
        action="append",
        default=None,
        help="expert descriptor, repeatable (adjacency, ngram, with :key=value params)",
    )
    p_train.add_argument("--out", required=True)
    p_train.set_defaults(handler=cmd_train_experts)

    for name in ("simulate", "sweep-k"):
        p = sub.add_parser(
            name,
            help="run policies over held-out sessions"
            if name == "simulate"
            else "repeat a simulation across top-k values",
        )
        p.add_argument("--spec", default=None, help="JSON experiment spec file")
        p.add_argument("--log", default=None)
        p.add_argument("--experts", action="append", default=None)
        p.add_argument(
            "--policy",
            action="append",
            default=None,
            help="repeatable: exp3ss, exp3-fixed, expert-top1:<i>",
        )
        p.add_argument("--rounds", type=int, default=None)
        p.add_argument("--sessions", type=int, default=None)
        p.add_argument("--k", type=int, default=None)
        p.add_argument("--eta", type=float, default=None)
        p.add_argument("--eta-theoretical", action="store_true", default=None)
        p.add_argument("--candidate-cap", type=int, default=None)
        p.add_argument("--epsilon", type=float, default=None)
        p.add_argument(
            "--user-model",
            choices=[m.value for m in UserModel],
            default=None,
        )
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--eval-fraction", type=float, default=None)
        p.add_argument("--embed-dim", type=int, default=None)
        p.add_argument("--embed-seed", type=int, default=None)
        p.add_argument("--vectors", default=None)
        p.add_argument("--out", default=None)
        if name == "simulate":
            p.set_defaults(handler=cmd_simulate)
        else:
            p.add_argument(
                "--k-values",
                type=int,
                nargs="+",
                default=[1, 2, 3, 5],
                help="top-k values to sweep",
            )
            p.set_defaults(handler=cmd_sweep_k)

    return parser


def _configure_logging() -> None:
    level_name = os.environ.get("EXP3SS_LOG_LEVEL", "WARNING").upper()
    level = getattr(logging, level_name, None)
    if not isinstance(level, int):
        level = logging.WARNING
    logging.basicConfig(
        level=level,
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )


def main(argv: Sequence[str] | None = None) -> int:
    _configure_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors, matching the contract.
        return int(exc.code or 0)
    command = args.command
    try:
        return args.handler(args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        # Bad input handed directly to prepare is a usage problem; data
        # trouble encountered mid-run is a runtime failure.
        return EXIT_USAGE if command == "prepare" else EXIT_RUNTIME
    except (SimulationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
