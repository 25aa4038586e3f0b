"""
Experiment orchestration: configuration, parallel replications, result
tables, slope fits and the regret chart.
"""

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
from tqdm import tqdm

from .agent import AgentKind, AgentModel
from .bandit import (
    BlockLog,
    LinUcbConfig,
    classical_linucb,
    doubling_pipeline,
    pess_opt_linucb,
    true_polytope,
)
from .constants import LabConstants
from .env import Environment, TraceLog
from .estimator import EstimationBudget, angle_set_distance, estimate_all
from .exceptions import ConfigError, EstimationFailure
from .geometry import Isometry, make_isometry
from .model import (
    ProblemInstance,
    instance_from_angles,
    load_instance,
    mechanism_hash,
    random_instance,
    reference_instance,
    separated_angles,
)

logger = logging.getLogger(__name__)

ALGORITHMS: tuple[str, ...] = ("known_T", "doubling", "classical_baseline", "estimation_only")
INSTANCE_SOURCES: tuple[str, ...] = ("reference", "random", "separated", "file")

SUMMARY_FILE = "summary.csv"
CURVES_FILE = "curves.csv"
REPORT_FILE = "report.json"
CHART_FILE = "regret.svg"
TRACE_FILE = "trace.jsonl"
BLOCKS_FILE = "blocks.csv"
ROUNDS_FILE = "rounds.csv"

BLOCK_COLUMNS: list[str] = ["horizon", "replication"] + [f.name for f in fields(BlockLog)]
ROUND_COLUMNS: list[str] = ["horizon", "replication", "t", "regret", "mechanism_hash", "phase_tag"]


@dataclass
class ExperimentConfig:
    """
    Everything that determines an experiment's outputs.

    For ``estimation_only`` each entry of ``horizons`` is the accuracy
    parameter n of one estimation run instead of a horizon.
    """

    instance: str = "reference"
    instance_file: str | None = None
    n_types: int = 2
    n_actions: int = 3
    n_agent_actions: int = 2
    n_outcomes: int = 2
    instance_seed: int = LabConstants.REFERENCE_SEED
    agent: str = "slack_adversarial"
    slack_scale: float = 1.0
    algorithm: str = "known_T"
    horizons: list[int] = field(default_factory=lambda: list(LabConstants.DEFAULT_HORIZONS))
    replications: int = LabConstants.DEFAULT_REPLICATIONS
    base_seed: int = LabConstants.DEFAULT_BASE_SEED
    t_sec: int | None = None
    eps_target: float | None = None
    margin: float = LabConstants.DEFAULT_MARGIN
    radius: float | None = None
    lam: float = LabConstants.DEFAULT_LAMBDA
    delta: float = LabConstants.DEFAULT_DELTA
    fail_prob: float = LabConstants.DEFAULT_FAIL_PROB
    f_min_hint: float = LabConstants.DEFAULT_BANDIT_F_MIN
    fallback: str = "abort"
    curve_points: int = 256
    workers: int = 1
    trace: bool = False
    round_log: bool = False
    oracles: bool = False
    output_dir: str = LabConstants.DEFAULT_OUTPUT_DIR

    def validate(self) -> None:
        """
        Raises:
            ConfigError: With every problem found, one per clause
        """
        problems = []
        if self.algorithm not in ALGORITHMS:
            problems.append(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.instance not in INSTANCE_SOURCES:
            problems.append(f"instance must be one of {INSTANCE_SOURCES}, got {self.instance!r}")
        if self.instance == "file" and not self.instance_file:
            problems.append("instance 'file' needs instance_file")
        if self.instance_file and not Path(self.instance_file).is_file():
            problems.append(f"instance_file {self.instance_file} does not exist")
        if self.n_types < 1 or self.n_actions < 2:
            problems.append(
                f"need n_types >= 1 and n_actions >= 2, got {self.n_types} and {self.n_actions}"
            )
        if self.instance == "separated" and self.n_actions < 3:
            problems.append("separated instances need n_actions >= 3")
        if self.algorithm == "estimation_only" and self.instance == "random" and self.n_actions < 3:
            problems.append("estimation_only needs n_actions >= 3, there are no reward angles below")
        if not self.horizons or any(int(t) < 2 for t in self.horizons):
            problems.append(f"horizons must be a non-empty list of integers >= 2, got {self.horizons}")
        if self.replications < 1:
            problems.append(f"replications must be positive, got {self.replications}")
        if self.workers < 1:
            problems.append(f"workers must be positive, got {self.workers}")
        if self.curve_points < 2:
            problems.append(f"curve_points must be at least 2, got {self.curve_points}")
        try:
            AgentKind.from_name(self.agent)
        except ConfigError as e:
            problems.append(str(e))
        try:
            self.linucb_config()
        except ConfigError as e:
            problems.append(str(e))
        if problems:
            logger.error(f"Invalid experiment config: {problems}")
            raise ConfigError("Invalid experiment config:\n  - " + "\n  - ".join(problems))

    def linucb_config(self) -> LinUcbConfig:
        return LinUcbConfig(
            lam=self.lam,
            delta=self.delta,
            margin=self.margin,
            radius=self.radius,
            fallback=self.fallback,
            fail_prob=self.fail_prob,
            f_min_hint=self.f_min_hint,
            t_sec=self.t_sec,
        )

    def agent_model(self) -> AgentModel:
        return AgentModel(kind=AgentKind.from_name(self.agent), slack_scale=self.slack_scale)

    def build_instance(self) -> tuple[ProblemInstance, Isometry | None]:
        """The configured instance and, for separated instances, the isometry that separates it."""
        match self.instance:
            case "reference":
                return reference_instance(), None
            case "file":
                return load_instance(self.instance_file), None
            case "random":
                inst = random_instance(
                    self.n_types,
                    self.n_actions,
                    self.n_agent_actions,
                    self.n_outcomes,
                    seed=self.instance_seed,
                )
                return inst, None
            case "separated":
                rng = np.random.default_rng(self.instance_seed)
                angles = separated_angles(self.n_types, self.n_actions, rng)
                iso = make_isometry(self.n_actions, self.instance_seed)
                return instance_from_angles(angles, iso, seed=self.instance_seed), iso
        raise ConfigError(f"Unknown instance source {self.instance!r}")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: dict[str, Any]) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(payload) - known)
        if unknown:
            raise ConfigError(f"Unknown config fields {unknown}; known fields are {sorted(known)}")
        return cls(**payload)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        try:
            payload = json.loads(path.read_text())
        except FileNotFoundError as e:
            raise ConfigError(f"Config file {path} does not exist") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"Config file {path} is not valid JSON: {e}") from e
        return cls.from_dict(payload)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        return path


def replication_seed(base_seed: int, horizon: int, replication: int) -> int:
    """Seed of one replication; the same (horizon, replication) pair is paired across algorithms."""
    sequence = np.random.SeedSequence(entropy=base_seed, spawn_key=(int(horizon), int(replication)))
    return int(sequence.generate_state(1, dtype=np.uint32)[0])


@dataclass(frozen=True)
class ReplicationTask:
    config: dict[str, Any]
    horizon: int
    replication: int
    seed: int


@dataclass
class ReplicationOutcome:
    summary: dict[str, Any]
    curve: pd.DataFrame
    blocks: pd.DataFrame
    rounds: pd.DataFrame | None = None
    trace: list[dict[str, Any]] = field(default_factory=list)


def _curve_points(horizon: int, points: int) -> np.ndarray:
    grid = np.unique(np.geomspace(1, horizon, num=min(points, horizon)).astype(int))
    return grid - 1


def _estimation_run(
    config: ExperimentConfig, env: Environment, n: int, seed: int
) -> dict[str, Any]:
    budget = EstimationBudget.from_accuracy(
        n,
        eps_target=config.eps_target or 1.0 / n,
        fail_prob=config.fail_prob,
        f_min_hint=config.f_min_hint,
        t_sec=config.t_sec,
    )
    rng = np.random.default_rng(seed)
    try:
        estimate = estimate_all(env, budget, rng)
    except EstimationFailure as e:
        return {"failed": True, "failure_stage": e.stage, "stage_one_rounds": env.t}
    error = angle_set_distance(env.oracle.true_angles, estimate.angles)
    return {
        "failed": False,
        "failure_stage": "",
        "stage_one_rounds": estimate.rounds_used,
        "angle_error": error,
        "eps_target": budget.eps_target,
    }


def run_replication(task: ReplicationTask) -> ReplicationOutcome:
    """One replication, from its seed alone."""
    config = ExperimentConfig.from_dict(task.config)
    inst, iso = config.build_instance()
    trace = TraceLog() if config.trace else None
    estimation_only = config.algorithm == "estimation_only"
    env = Environment.create(
        inst,
        config.agent_model(),
        task.seed,
        horizon=None if estimation_only else task.horizon,
        trace=trace,
        isometry=iso,
    )
    summary: dict[str, Any] = {
        "algorithm": config.algorithm,
        "horizon": task.horizon,
        "replication": task.replication,
        "seed": task.seed,
        "u_star": env.u_star,
        "failed": False,
        "failure_stage": "",
        "stage_one_rounds": 0,
        "stage_one_overrun": False,
        "n_blocks": 0,
        "angle_error": math.nan,
    }
    blocks: list[BlockLog] = []
    if estimation_only:
        summary.update(_estimation_run(config, env, task.horizon, task.seed))
    else:
        linucb = config.linucb_config()
        learner_rng = np.random.default_rng(np.random.SeedSequence(task.seed).spawn(3)[2])
        match config.algorithm:
            case "known_T":
                result = pess_opt_linucb(env, linucb, rng=learner_rng)
            case "doubling":
                result = doubling_pipeline(env, linucb, rng=learner_rng)
            case "classical_baseline":
                result = classical_linucb(env, true_polytope(env, config.margin), linucb)
        summary.update(
            failed=result.failed,
            failure_stage=result.failure_stage or "",
            stage_one_rounds=result.stage_one_rounds,
            stage_one_overrun=result.stage_one_overrun,
            n_blocks=len(result.blocks),
        )
        blocks = result.blocks
        if result.angles is not None and env.oracle.true_angles is not None:
            summary["angle_error"] = angle_set_distance(env.oracle.true_angles, result.angles)

    summary["rounds"] = env.t
    summary["regret"] = env.ledger.total
    summary["regret_per_round"] = env.ledger.total / max(env.t, 1)
    curve = pd.DataFrame(columns=["horizon", "replication", "t", "phase", "cumulative_regret"])
    if env.t > 0:
        cumulative = env.ledger.cumulative()
        ts = _curve_points(env.t, config.curve_points)
        phases = _phases_at(env, ts)
        curve = pd.DataFrame(
            {
                "horizon": task.horizon,
                "replication": task.replication,
                "t": ts,
                "phase": phases,
                "cumulative_regret": cumulative[ts],
            }
        )
    block_log = pd.DataFrame(
        [{"horizon": task.horizon, "replication": task.replication, **b.to_dict()} for b in blocks],
        columns=BLOCK_COLUMNS,
    )
    rounds = _round_log(env, task) if config.round_log or config.trace else None
    events = []
    if trace is not None:
        events = [{"horizon": task.horizon, "replication": task.replication, **e} for e in trace.events]
    return ReplicationOutcome(
        summary=summary, curve=curve, blocks=block_log, rounds=rounds, trace=events
    )


def _round_log(env: Environment, task: ReplicationTask) -> pd.DataFrame:
    """Every round: its regret, a digest of the mechanism played and the phase tag."""
    played = env.transcript.blocks
    sizes = [block.reports.size for block in played]
    return pd.DataFrame(
        {
            "horizon": np.full(env.t, task.horizon),
            "replication": np.full(env.t, task.replication),
            "t": np.arange(env.t),
            "regret": env.ledger.per_round(),
            "mechanism_hash": np.repeat([mechanism_hash(b.mechanism) for b in played], sizes),
            "phase_tag": np.repeat([b.phase.tag for b in played], sizes),
        },
        columns=ROUND_COLUMNS,
    )


def _phases_at(env: Environment, ts: np.ndarray) -> list[str]:
    starts = np.array([block.start for block in env.transcript.blocks])
    index = np.searchsorted(starts, ts, side="right") - 1
    return [env.transcript.blocks[k].phase.tag for k in index]


def _run_tasks(tasks: list[ReplicationTask], workers: int) -> list[ReplicationOutcome]:
    outcomes = []
    if workers == 1:
        for task in tqdm(tasks, desc="replications", unit="rep"):
            outcomes.append(run_replication(task))
    else:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            futures = [executor.submit(run_replication, task) for task in tasks]
            for future in tqdm(as_completed(futures), total=len(futures), desc="replications", unit="rep"):
                outcomes.append(future.result())
    return sorted(outcomes, key=lambda o: (o.summary["horizon"], o.summary["replication"]))


def slope_fit(x: np.ndarray, y: np.ndarray) -> float:
    """Least-squares slope of log y against log x over the positive points."""
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    keep = (x > 0) & (y > 0)
    if keep.sum() < 2:
        return math.nan
    return float(np.polyfit(np.log(x[keep]), np.log(y[keep]), 1)[0])


def aggregate(summary: pd.DataFrame) -> dict[str, Any]:
    """Per-horizon statistics and slope fits of a summary table."""
    grouped = summary.groupby("horizon", sort=True)
    table = grouped.agg(
        mean_regret=("regret", "mean"),
        std_regret=("regret", "std"),
        failure_rate=("failed", "mean"),
        overrun_rate=("stage_one_overrun", "mean"),
        mean_stage_one_rounds=("stage_one_rounds", "mean"),
        mean_angle_error=("angle_error", "mean"),
        replications=("replication", "count"),
    ).reset_index()
    horizons = table["horizon"].to_numpy(dtype=float)
    means = table["mean_regret"].to_numpy(dtype=float)
    normalized = means / (np.sqrt(horizons) * np.log(horizons) ** 3)
    report: dict[str, Any] = {
        "per_horizon": json.loads(table.to_json(orient="records")),
        "regret_slope": slope_fit(horizons, means),
        "regret_increasing": bool(np.all(np.diff(means) > 0)),
        "normalized_regret": normalized.tolist(),
        "normalized_regret_non_increasing": bool(np.all(np.diff(normalized[-3:]) <= 0)),
        "failure_rate": float(summary["failed"].mean()),
    }
    if (summary["algorithm"] == "estimation_only").all():
        eps = 1.0 / horizons
        report["rounds_slope"] = slope_fit(
            np.log(1.0 / eps), table["mean_stage_one_rounds"].to_numpy(dtype=float)
        )
    return report


def render_chart(curves: pd.DataFrame, summary: pd.DataFrame, path: Path) -> Path:
    """Mean cumulative regret per horizon, and mean final regret against T."""
    plt.rcParams["svg.hashsalt"] = "principal-lab"
    fig, (left, right) = plt.subplots(1, 2, figsize=(12, 5))
    for horizon, group in curves.groupby("horizon", sort=True):
        mean = group.groupby("t", sort=True)["cumulative_regret"].mean()
        left.plot(mean.index + 1, mean.to_numpy(), label=f"T={horizon}")
    left.set_xscale("log")
    left.set_xlabel("round t")
    left.set_ylabel("mean cumulative regret")
    left.legend(fontsize=8)
    finals = summary.groupby("horizon", sort=True)["regret"].mean()
    right.loglog(finals.index, finals.to_numpy().clip(min=1e-12), "o-", label="mean regret")
    slope = slope_fit(finals.index.to_numpy(), finals.to_numpy())
    right.set_title(f"log-log slope {slope:.3f}")
    right.set_xlabel("horizon T")
    right.set_ylabel("regret")
    right.legend(fontsize=8)
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def run(config: ExperimentConfig) -> dict[str, Any]:
    """
    Run every replication and write the result files.

    Files written under ``config.output_dir``: summary.csv, curves.csv,
    blocks.csv, report.json, regret.svg and config.json. With ``round_log``
    or tracing also rounds.csv, and with tracing trace.jsonl.

    Raises:
        ConfigError: If the config is invalid

    Returns:
        dict[str, Any]: The JSON report
    """
    config.validate()
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    config.save(out / "config.json")
    payload = config.to_dict()
    tasks = [
        ReplicationTask(
            config=payload,
            horizon=int(horizon),
            replication=rep,
            seed=replication_seed(config.base_seed, int(horizon), rep),
        )
        for horizon in config.horizons
        for rep in range(config.replications)
    ]
    logger.info(
        f"Running {len(tasks)} replications of {config.algorithm} on {config.workers} worker(s)"
    )
    outcomes = _run_tasks(tasks, config.workers)

    summary = pd.DataFrame([o.summary for o in outcomes])
    curves = pd.concat([o.curve for o in outcomes], ignore_index=True)
    summary.to_csv(out / SUMMARY_FILE, index=False, float_format="%.12g")
    curves.to_csv(out / CURVES_FILE, index=False, float_format="%.12g")
    block_logs = pd.concat([o.blocks for o in outcomes], ignore_index=True)
    block_logs.to_csv(out / BLOCKS_FILE, index=False, float_format="%.12g")
    if config.round_log or config.trace:
        rounds = pd.concat([o.rounds for o in outcomes], ignore_index=True)
        rounds.to_csv(out / ROUNDS_FILE, index=False, float_format="%.12g")
    if config.trace:
        with (out / TRACE_FILE).open("w", encoding="utf-8") as handle:
            for outcome in outcomes:
                for event in outcome.trace:
                    handle.write(json.dumps(event, default=float) + "\n")

    report = aggregate(summary)
    report["algorithm"] = config.algorithm
    if config.oracles:
        from .oracles import oracle_suite, regret_scaling

        suite = oracle_suite(config)
        if config.algorithm in ("known_T", "doubling"):
            suite.results.append(regret_scaling(report))
        report["oracles"] = suite.to_dict()
    (out / REPORT_FILE).write_text(json.dumps(report, indent=2, sort_keys=True, default=float))
    if not curves.empty:
        render_chart(curves, summary, out / CHART_FILE)
    logger.info(f"Results written to {out}")
    return report


def report(output_dir: str | Path) -> dict[str, Any]:
    """Rebuild report.json and regret.svg from the tables of a finished run."""
    out = Path(output_dir)
    try:
        summary = pd.read_csv(out / SUMMARY_FILE, converters={"failure_stage": str})
        curves = pd.read_csv(out / CURVES_FILE)
    except FileNotFoundError as e:
        logger.error(f"No result tables in {out}")
        raise ConfigError(f"{out} holds no {SUMMARY_FILE}/{CURVES_FILE}; run an experiment first") from e
    result = aggregate(summary)
    result["algorithm"] = str(summary["algorithm"].iloc[0]) if len(summary) else ""
    previous = out / REPORT_FILE
    if previous.is_file():
        oracles = json.loads(previous.read_text()).get("oracles")
        if oracles is not None:
            result["oracles"] = oracles
    previous.write_text(json.dumps(result, indent=2, sort_keys=True, default=float))
    if not curves.empty:
        render_chart(curves, summary, out / CHART_FILE)
    return result
