"""
Ridge regression, confidence ellipsoids and the optimistic planners.

Stage I estimates the reward angles and builds the pessimistic polytope;
Stage II runs delayed-block LinUCB over the polytope's vertices. Blocks
release only their head round, one block later.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np

from .constants import LabConstants
from .env import Environment, RegretLedger, Transcript, delay_guard
from .estimator import (
    EstimationBudget,
    alignment,
    angle_set_distance,
    estimate_all,
)
from .exceptions import ConfigError, EstimationFailure, LpInfeasibleError
from .lp import (
    PessimisticPolytope,
    enumerate_vertices,
    ic_polytope,
    pessimistic_polytope,
    single_simplex,
    solve_pess_opt,
)
from .model import Mechanism, RewardAngles, dummy_mechanism
from .state_machine import LearnerPhase

logger = logging.getLogger(__name__)

FALLBACKS: tuple[str, ...] = ("abort", "raise")


@dataclass(frozen=True, eq=False)
class ConfidenceEllipsoid:
    """
    Ridge estimate with its confidence set
    {beta : (beta - beta_hat)^T Omega (beta - beta_hat) <= radius^2}.
    """

    beta_hat: np.ndarray
    omega: np.ndarray
    radius: float
    lam: float
    delta: float
    n_samples: int = 0

    @property
    def n_vars(self) -> int:
        return int(self.beta_hat.size)

    @property
    def log_det(self) -> float:
        return float(np.linalg.slogdet(self.omega)[1])

    def contains(self, beta: np.ndarray) -> bool:
        diff = np.asarray(beta, dtype=float).ravel() - self.beta_hat
        return float(diff @ self.omega @ diff) <= self.radius**2 + LabConstants.FEASIBILITY_TOLERANCE

    def optimistic_value(self, mech: Mechanism) -> float:
        """max over the set of <beta, vec(Pi)>."""
        x = np.asarray(mech, dtype=float).ravel()
        width = math.sqrt(max(float(x @ np.linalg.solve(self.omega, x)), 0.0))
        return float(x @ self.beta_hat) + self.radius * width

    def to_dict(self) -> dict[str, Any]:
        return {
            "beta_hat": self.beta_hat.tolist(),
            "radius": self.radius,
            "lambda": self.lam,
            "delta": self.delta,
            "n_samples": self.n_samples,
            "log_det": self.log_det,
        }


def ridge_update(
    data: list[tuple[Mechanism, float]],
    n_vars: int,
    lam: float = LabConstants.DEFAULT_LAMBDA,
    delta: float = LabConstants.DEFAULT_DELTA,
    bound: float = LabConstants.DEFAULT_BOUND,
    dim: int = 1,
    noise_factor: float = LabConstants.NOISE_FACTOR,
) -> ConfidenceEllipsoid:
    """
    Ridge regression of realized rewards on vectorized mechanisms.

    Args:
        data (list[tuple[Mechanism, float]]): (mechanism, realized reward) samples
        n_vars (int): Length of vec(Pi)
        lam (float): Ridge parameter
        delta (float): Failure probability of the confidence set
        bound (float): Reward bound B
        dim (int): Dimension in the lam^(1/2) dim^(1/2) B term
        noise_factor (float): Noise scale in units of B

    Raises:
        ConfigError: If lam or delta is out of range

    Returns:
        ConfidenceEllipsoid: beta_hat = (sum x x^T + lam I)^-1 sum x u and its radius
    """
    if lam <= 0:
        raise ConfigError(f"Ridge parameter must be positive, got {lam}")
    if not 0.0 < delta < 1.0:
        raise ConfigError(f"delta must lie in (0, 1), got {delta}")
    omega = lam * np.eye(n_vars)
    target = np.zeros(n_vars)
    if data:
        X = np.array([np.asarray(mech, dtype=float).ravel() for mech, _ in data])
        y = np.array([reward for _, reward in data], dtype=float)
        omega += X.T @ X
        target = X.T @ y
    beta_hat = np.linalg.solve(omega, target)
    log_ratio = float(np.linalg.slogdet(omega)[1]) - n_vars * math.log(lam)
    radius = noise_factor * bound * math.sqrt(
        max(log_ratio - 2.0 * math.log(delta), 0.0)
    ) + math.sqrt(lam) * math.sqrt(dim) * bound
    return ConfidenceEllipsoid(
        beta_hat=beta_hat,
        omega=omega,
        radius=radius,
        lam=lam,
        delta=delta,
        n_samples=len(data),
    )


@dataclass(frozen=True)
class LinUcbConfig:
    """
    Planner settings.

    Attributes:
        lam (float): Ridge parameter
        delta (float): Confidence set failure probability
        margin (float): IC margin of the planning polytope
        radius (float | None): Pessimism radius; None uses the estimator's eps_target
        noise_factor (float): Noise scale of the ellipsoid radius in units of B
        ellipsoid_scale (float): Multiplier on the ellipsoid radius, 0 plans greedily
        full_dimension (bool): Use d|Theta| instead of d in the radius
        stage_one_cap (int | None): Round cap for Stage I; None uses ceil(ln n)^6
        strict_stage_one (bool): Treat a Stage I overrun as an estimation failure
        fallback (str): "abort" plays the uniform mechanism after a failure, "raise" re-raises
        fail_prob (float): Per-test failure probability of the estimator
        f_min_hint (float): Smallest type probability the estimator plans for
        t_sec (int | None): Override of the estimator's rounds per test
    """

    lam: float = LabConstants.DEFAULT_LAMBDA
    delta: float = LabConstants.DEFAULT_DELTA
    margin: float = LabConstants.DEFAULT_MARGIN
    radius: float | None = None
    noise_factor: float = LabConstants.NOISE_FACTOR
    ellipsoid_scale: float = 1.0
    full_dimension: bool = False
    stage_one_cap: int | None = None
    strict_stage_one: bool = False
    fallback: str = "abort"
    fail_prob: float = LabConstants.DEFAULT_FAIL_PROB
    f_min_hint: float = LabConstants.DEFAULT_BANDIT_F_MIN
    t_sec: int | None = None

    def __post_init__(self) -> None:
        problems = []
        if self.lam <= 0:
            problems.append(f"lam must be positive, got {self.lam}")
        if not 0.0 < self.delta < 1.0:
            problems.append(f"delta must lie in (0, 1), got {self.delta}")
        if self.margin < 0:
            problems.append(f"margin must be non-negative, got {self.margin}")
        if self.radius is not None and self.radius < 0:
            problems.append(f"radius must be non-negative, got {self.radius}")
        if self.ellipsoid_scale < 0:
            problems.append(f"ellipsoid_scale must be non-negative, got {self.ellipsoid_scale}")
        if self.fallback not in FALLBACKS:
            problems.append(f"fallback must be one of {FALLBACKS}, got {self.fallback!r}")
        if problems:
            raise ConfigError("Invalid LinUCB config: " + "; ".join(problems))

    def to_dict(self) -> dict[str, Any]:
        return dict(self.__dict__)


@dataclass(frozen=True)
class HorizonSplit:
    """
    Schedule for a known horizon.

    Attributes:
        n (int): Number of Stage II blocks
        log_n (int): ceil(ln n), at least one
        horizon (int): Rounds the split was computed for
    """

    n: int
    log_n: int
    horizon: int

    @property
    def delay(self) -> int:
        return self.log_n**2

    @property
    def block_rounds(self) -> int:
        return self.delay + 1

    @property
    def stage_one_cap(self) -> int:
        return self.log_n**6

    @property
    def episode_rounds(self) -> int:
        return (self.n + 2) * self.block_rounds + self.stage_one_cap


def split_for_n(n: int, horizon: int | None = None) -> HorizonSplit:
    split = HorizonSplit(n=n, log_n=max(1, math.ceil(math.log(n))), horizon=0)
    return replace(split, horizon=horizon or split.episode_rounds)


def horizon_split(horizon: int) -> HorizonSplit:
    """
    Largest n with (n + 2)(ceil(ln n)^2 + 1) + ceil(ln n)^6 <= T.

    Raises:
        ConfigError: If not even n = 1 fits
    """
    if split_for_n(1).episode_rounds > horizon:
        logger.error(f"Horizon {horizon} is too short for a single block")
        raise ConfigError(f"Horizon {horizon} is too short for the planner")
    lo, hi = 1, 2
    while split_for_n(hi).episode_rounds <= horizon:
        lo, hi = hi, 2 * hi
    fits = [n for n in range(lo, hi) if split_for_n(n).episode_rounds <= horizon]
    return split_for_n(max(fits), horizon)


@dataclass(frozen=True)
class BlockLog:
    k: int
    start: int
    beta_norm: float
    radius: float
    log_det: float
    vertex_id: int
    optimistic_value: float
    block_reward: float

    def to_dict(self) -> dict[str, Any]:
        return dict(self.__dict__)


@dataclass(frozen=True)
class EpisodeLog:
    k: int
    n: int
    start: int
    rounds: int
    failed: bool
    truncated: bool


@dataclass(eq=False)
class RunResult:
    """
    Outcome of one planner run on an environment.

    Attributes:
        transcript (Transcript): The environment transcript
        ledger (RegretLedger): The environment regret ledger
        blocks (list[BlockLog]): Stage II block logs
        episodes (list[EpisodeLog]): Episode logs of the doubling pipeline
        split (HorizonSplit | None): Schedule of the last known-horizon run
        angles (RewardAngles | None): Angles the polytope was built from
        stage_one_rounds (int): Rounds consumed by estimation
        stage_one_overrun (bool): Estimation took more than its cap
        failed (bool): Estimation or planning failed and the fallback played
        failure_stage (str | None): Stage tag of the failure
    """

    transcript: Transcript
    ledger: RegretLedger
    blocks: list[BlockLog] = field(default_factory=list)
    episodes: list[EpisodeLog] = field(default_factory=list)
    split: HorizonSplit | None = None
    angles: RewardAngles | None = None
    stage_one_rounds: int = 0
    stage_one_overrun: bool = False
    failed: bool = False
    failure_stage: str | None = None

    @property
    def regret(self) -> float:
        return self.ledger.total


def true_parameter(env: Environment, matching: np.ndarray | None = None) -> np.ndarray:
    """
    beta*_{s, x} = f(b(s)) U(b(s), x) for the label-to-type matching b.

    Ground truth, for oracles and tests.
    """
    profile = env.profile
    weights = env.instance.f[:, None] * profile.u
    if matching is None:
        matching = np.arange(env.n_types)
    return weights[np.asarray(matching, dtype=int)].ravel()


def true_polytope(env: Environment, margin: float = 0.0) -> PessimisticPolytope:
    """IC region of the true normalized rewards."""
    if env.n_types == 1:
        return single_simplex(env.n_actions)
    return ic_polytope(env.profile.v_bar, margin=margin)


def _radius_dim(env: Environment, config: LinUcbConfig) -> int:
    return env.n_actions * env.n_types if config.full_dimension else env.n_actions


def block_ellipsoid(
    env: Environment, data: list[tuple[Mechanism, float]], n_vars: int, config: LinUcbConfig
) -> ConfidenceEllipsoid:
    """The ridge ellipsoid a planning block acts on, radius scaled by ``config.ellipsoid_scale``."""
    ellipsoid = ridge_update(
        data,
        n_vars,
        lam=config.lam,
        delta=config.delta,
        bound=env.instance.B,
        dim=_radius_dim(env, config),
        noise_factor=config.noise_factor,
    )
    if config.ellipsoid_scale != 1.0:
        ellipsoid = replace(ellipsoid, radius=ellipsoid.radius * config.ellipsoid_scale)
    return ellipsoid


def _play(
    env: Environment,
    mech: Mechanism,
    rounds: int,
    phase: LearnerPhase,
    stop: int,
    delay: int | None = None,
    head_only: bool = False,
) -> int:
    """Deploy for at most ``rounds`` rounds without passing round ``stop``."""
    rounds = int(min(rounds, stop - env.t, env.remaining))
    if rounds > 0:
        env.deploy(mech, rounds, phase, delay=delay, head_only=head_only)
    return max(rounds, 0)


def run_planning_stage(
    env: Environment,
    poly: PessimisticPolytope,
    config: LinUcbConfig,
    n_blocks: int,
    delay: int,
    stop: int,
    vertices: list[Mechanism] | None = None,
) -> tuple[list[BlockLog], Mechanism]:
    """
    Delayed-block LinUCB over the polytope's vertices.

    Each block head fits the ellipsoid on the released block heads of this
    stage, plays the optimistic vertex for ``delay + 1`` rounds and releases
    the head ``delay`` rounds after it. Blocks that would pass ``stop`` are
    cut short.

    Raises:
        LpInfeasibleError: If the polytope is empty

    Returns:
        tuple[list[BlockLog], Mechanism]: Block logs and the last mechanism played
    """
    if vertices is None:
        vertices = enumerate_vertices(poly)
    if not vertices:
        logger.error("Planning polytope has no vertices")
        raise LpInfeasibleError("The planning polytope is empty")
    _play(env, dummy_mechanism(env.n_types, env.n_actions), delay, LearnerPhase.DUMMY, stop)
    stage_start = env.t
    logs: list[BlockLog] = []
    last = vertices[0]
    previous_log_det = -math.inf
    for k in range(1, n_blocks + 1):
        if env.t >= stop:
            break
        data = env.released().planning_data(since=stage_start)
        ellipsoid = block_ellipsoid(env, data, poly.n_vars, config)
        if ellipsoid.log_det < previous_log_det - LabConstants.FEASIBILITY_TOLERANCE:
            logger.warning(f"Block {k}: information matrix shrank")
        previous_log_det = ellipsoid.log_det
        mech, score = solve_pess_opt(poly, ellipsoid, vertices)
        vertex_id = next(j for j, v in enumerate(vertices) if v is mech)
        start = env.t
        played = _play(env, mech, delay + 1, LearnerPhase.PLANNING, stop, delay=delay, head_only=True)
        last = mech
        reward = float(env.transcript.blocks[-1].rewards.sum()) if played else 0.0
        block = BlockLog(
            k=k,
            start=start,
            beta_norm=float(np.linalg.norm(ellipsoid.beta_hat)),
            radius=ellipsoid.radius,
            log_det=ellipsoid.log_det,
            vertex_id=vertex_id,
            optimistic_value=score,
            block_reward=reward,
        )
        logs.append(block)
        logger.debug(
            f"Block {k}: vertex {vertex_id}, optimistic value {score:.4f}, radius {ellipsoid.radius:.3f}"
        )
    return logs, last


def _abort(env: Environment, result: RunResult, stage: str, stop: int) -> RunResult:
    result.failed = True
    result.failure_stage = stage
    _play(env, dummy_mechanism(env.n_types, env.n_actions), stop - env.t, LearnerPhase.DUMMY, stop)
    return result


def pess_opt_linucb(
    env: Environment,
    config: LinUcbConfig | None = None,
    horizon: int | None = None,
    rng: np.random.Generator | None = None,
    split: HorizonSplit | None = None,
    budget: EstimationBudget | None = None,
    angles: RewardAngles | None = None,
) -> RunResult:
    """
    Pessimistic-optimistic LinUCB for a known horizon.

    Stage I estimates the reward angles (skipped for one type or when
    ``angles`` is given) and builds the pessimistic polytope. Stage II runs
    the delayed-block planner for n blocks; leftover rounds repeat the last
    mechanism.

    Args:
        env (Environment): Environment to play in
        config (LinUcbConfig | None): Planner settings
        horizon (int | None): Rounds of this run, the environment's remaining rounds if None
        rng (np.random.Generator | None): Learner randomness, seeded from the environment if None
        split (HorizonSplit | None): Schedule override, derived from the horizon if None
        budget (EstimationBudget | None): Estimator budget, derived from n if None
        angles (RewardAngles | None): Known angles that replace Stage I

    Raises:
        ConfigError: If no horizon is known
        EstimationFailure: If Stage I fails and the fallback is "raise"

    Returns:
        RunResult: Transcript, ledger and logs
    """
    config = config or LinUcbConfig()
    if horizon is None:
        if env.horizon is None:
            raise ConfigError("pess_opt_linucb needs a horizon")
        horizon = int(env.remaining)
    split = split or horizon_split(horizon)
    rng = rng or np.random.default_rng(env.rng.integers(2**63))
    start, stop = env.t, env.t + horizon
    result = RunResult(transcript=env.transcript, ledger=env.ledger, split=split)
    logger.info(f"PessOpt-LinUCB: T={horizon}, n={split.n}, delay={split.delay}")

    if env.n_types == 1:
        poly = single_simplex(env.n_actions)
    else:
        if angles is None:
            budget = budget or EstimationBudget.from_accuracy(
                max(split.n, 2),
                eps_target=min(1.0 / split.n, 1.0),
                fail_prob=config.fail_prob,
                f_min_hint=config.f_min_hint,
                t_sec=config.t_sec,
                polylog_rounds=False,
            )
            try:
                angles = estimate_all(env, budget, rng).angles
            except EstimationFailure as e:
                result.stage_one_rounds = env.t - start
                logger.warning(f"Stage I failed at stage {e.stage}: {e}")
                if config.fallback == "raise":
                    raise
                return _abort(env, result, e.stage, stop)
            result.stage_one_rounds = env.t - start
            cap = config.stage_one_cap or split.stage_one_cap
            if result.stage_one_rounds > cap:
                result.stage_one_overrun = True
                logger.warning(f"Stage I used {result.stage_one_rounds} rounds, cap {cap}")
                if config.strict_stage_one:
                    if config.fallback == "raise":
                        raise EstimationFailure("budget", f"Stage I overran its cap {cap}")
                    return _abort(env, result, "budget", stop)
        radius = config.radius
        if radius is None:
            radius = budget.eps_target if budget is not None else 0.0
        poly = pessimistic_polytope(angles, radius, config.margin, env.isometry)
    result.angles = angles

    try:
        blocks, last = run_planning_stage(env, poly, config, split.n, split.delay, stop)
    except LpInfeasibleError as e:
        logger.warning(f"Planning failed: {e}")
        if config.fallback == "raise":
            raise
        return _abort(env, result, "planning", stop)
    result.blocks = blocks
    _play(env, last, stop - env.t, LearnerPhase.TAIL, stop)
    if env.n_types > 1 and env.oracle.true_angles is not None:
        error = angle_set_distance(env.oracle.true_angles, angles)
        logger.info(f"Run done: regret {env.ledger.total:.3f}, angle error {error:.2e}")
    return result


def doubling_pipeline(
    env: Environment,
    config: LinUcbConfig | None = None,
    rng: np.random.Generator | None = None,
) -> RunResult:
    """
    Anytime planner: episodes k = 1, 2, ... with n_k = 2^k.

    Each episode runs the known-horizon planner for its own length, then
    ceil(ln n_k)^2 dummy rounds. The run stops when the environment's
    horizon is used up, possibly mid-episode.
    """
    config = config or LinUcbConfig()
    if env.horizon is None:
        raise ConfigError("doubling_pipeline runs until the environment horizon; set one")
    rng = rng or np.random.default_rng(env.rng.integers(2**63))
    result = RunResult(transcript=env.transcript, ledger=env.ledger)
    k = 1
    while env.remaining > 0:
        split = split_for_n(2**k)
        start = env.t
        length = int(min(split.episode_rounds, env.remaining))
        truncated = length < split.episode_rounds
        episode_rng = np.random.default_rng(rng.integers(2**63))
        episode = pess_opt_linucb(env, config, horizon=length, rng=episode_rng, split=split)
        _play(
            env,
            dummy_mechanism(env.n_types, env.n_actions),
            split.delay,
            LearnerPhase.DUMMY,
            env.t + split.delay,
        )
        result.episodes.append(
            EpisodeLog(
                k=k,
                n=split.n,
                start=start,
                rounds=env.t - start,
                failed=episode.failed,
                truncated=truncated,
            )
        )
        result.blocks.extend(episode.blocks)
        result.stage_one_rounds += episode.stage_one_rounds
        result.stage_one_overrun |= episode.stage_one_overrun
        if episode.failed and not truncated:
            result.failed = True
            result.failure_stage = episode.failure_stage
        result.split, result.angles = split, episode.angles
        logger.info(f"Episode {k}: n={split.n}, {env.t - start} rounds, regret so far {env.ledger.total:.3f}")
        k += 1
    return result


def classical_linucb(
    env: Environment,
    polytope: PessimisticPolytope,
    config: LinUcbConfig | None = None,
    horizon: int | None = None,
    split: HorizonSplit | None = None,
) -> RunResult:
    """
    Delayed-block LinUCB over a known polytope, without Stage I.

    With ``split`` given the schedule is exactly the Stage II schedule of
    :func:`pess_opt_linucb`; otherwise blocks fill the horizon.
    """
    config = config or LinUcbConfig()
    if horizon is None:
        if env.horizon is None:
            raise ConfigError("classical_linucb needs a horizon")
        horizon = int(env.remaining)
    stop = env.t + horizon
    if split is None:
        base = horizon_split(horizon)
        split = replace(base, n=max((horizon - base.delay) // base.block_rounds, 1))
    result = RunResult(transcript=env.transcript, ledger=env.ledger, split=split)
    blocks, last = run_planning_stage(env, polytope, config, split.n, split.delay, stop)
    result.blocks = blocks
    _play(env, last, stop - env.t, LearnerPhase.TAIL, stop)
    return result


def coverage_holds(
    env: Environment, result: RunResult, config: LinUcbConfig | None = None
) -> bool:
    """
    Whether beta* lies in every ellipsoid the run's blocks used.

    The ellipsoids are refit from the transcript, so the check reads the same
    released block heads the planner read.
    """
    config = config or LinUcbConfig()
    if not result.blocks:
        return True
    matching = None
    if result.angles is not None and env.oracle.true_angles is not None:
        matching = alignment(env.oracle.true_angles, result.angles)
    beta = true_parameter(env, matching)
    stage_start = result.blocks[0].start
    for block in result.blocks:
        data = delay_guard(env.transcript, block.start).planning_data(since=stage_start)
        ellipsoid = block_ellipsoid(env, data, beta.size, config)
        if not ellipsoid.contains(beta):
            return False
    return True
