"""
Ground-truth oracles that check the laboratory against the quantities it
can compute exactly: LP values, sector containment, angle accuracy,
confidence coverage, polytope containment and the agent's slack contract.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any

import numpy as np

from .agent import AgentKind, AgentModel
from .bandit import (
    LinUcbConfig,
    classical_linucb,
    coverage_holds,
    doubling_pipeline,
    pess_opt_linucb,
    true_polytope,
)
from .constants import LabConstants
from .env import Environment, TraceLog
from .estimator import EstimationBudget, angle_set_distance, estimate_all, sec_test
from .exceptions import AssumptionViolationError, EstimationFailure
from .geometry import arc, make_isometry
from .lp import enumerate_vertices, ic_polytope, pessimistic_polytope, solve_lp_star, solve_opt_oracle
from .model import (
    Mechanism,
    ProblemInstance,
    RewardAngles,
    instance_from_angles,
    random_instance,
    reward_profile,
    separated_angles,
)
from .state_machine import LearnerPhase

if TYPE_CHECKING:
    from .harness import ExperimentConfig

logger = logging.getLogger(__name__)

SCALES: dict[str, dict[str, int]] = {
    "quick": {
        "lp_instances": 20,
        "sector_cases": 100,
        "angle_instances": 6,
        "coverage_replications": 40,
        "containment_instances": 5,
        "containment_points": 200,
        "contract_rounds": 20_000,
        "doubling_horizon": 2**13,
        "doubling_seeds": 4,
    },
    "full": {
        "lp_instances": 200,
        "sector_cases": 500,
        "angle_instances": 100,
        "coverage_replications": 500,
        "containment_instances": 50,
        "containment_points": 1000,
        "contract_rounds": 100_000,
        "doubling_horizon": 2**14,
        "doubling_seeds": 20,
    },
}

LP_TOLERANCE: float = 1e-7
SECTOR_EDGE_GAP: float = 1e-3
SECTOR_ACCURACY_N: int = 1000
CONTAINMENT_RADIUS: float = 1e-3
CORRUPTION_NOISE: float = 0.1
COVERAGE_HORIZON: int = 2**10
DOUBLING_REGRET_RATIO: float = 3.0
REGRET_SLOPE_RANGE: tuple[float, float] = (0.30, 0.80)


@dataclass(frozen=True)
class OracleResult:
    name: str
    passed: bool
    checked: int
    violations: int
    detail: str = ""

    def to_dict(self) -> dict[str, Any]:
        return dict(self.__dict__)


@dataclass
class OracleReport:
    results: list[OracleResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def get(self, name: str) -> OracleResult:
        return next(r for r in self.results if r.name == name)

    def to_dict(self) -> dict[str, Any]:
        return {"passed": self.passed, "checks": [r.to_dict() for r in self.results]}


def _small_instances(count: int, rng: np.random.Generator) -> list[ProblemInstance]:
    """Random instances with |Theta| <= 3 and d <= 4."""
    instances = []
    while len(instances) < count:
        try:
            instances.append(
                random_instance(
                    n_types=int(rng.integers(1, 4)),
                    n_actions=int(rng.integers(2, 5)),
                    seed=int(rng.integers(2**31)),
                )
            )
        except AssumptionViolationError:
            continue
    return instances


def revelation_principle(count: int, seed: int) -> OracleResult:
    """LP* over truthful mechanisms matches the best value over all reporting maps."""
    rng = np.random.default_rng(seed)
    violations, worst = 0, 0.0
    for inst in _small_instances(count, rng):
        profile = reward_profile(inst)
        lp_value = solve_lp_star(inst.f, profile.u, profile.v_bar).value
        opt_value = solve_opt_oracle(inst.f, profile.u, profile.v)
        gap = abs(lp_value - opt_value)
        worst = max(worst, gap)
        if gap > LP_TOLERANCE:
            violations += 1
            logger.warning(f"Revelation gap {gap:.3e} on instance seed {inst.seed}")
    return OracleResult("revelation_principle", violations == 0, count, violations, f"max gap {worst:.3e}")


def lp_backends(count: int, seed: int) -> OracleResult:
    """The in-house simplex and HiGHS agree on LP*."""
    rng = np.random.default_rng(seed)
    violations = 0
    for inst in _small_instances(count, rng):
        profile = reward_profile(inst)
        ours = solve_lp_star(inst.f, profile.u, profile.v_bar).value
        theirs = solve_lp_star(inst.f, profile.u, profile.v_bar, backend="highs").value
        if abs(ours - theirs) > LP_TOLERANCE:
            violations += 1
    return OracleResult("lp_backends", violations == 0, count, violations)


def margin_monotonicity(count: int, seed: int) -> OracleResult:
    """LP value is non-increasing in the margin and reaches u* as the margin vanishes."""
    margins = (0.1, 0.05, 0.01, 1e-3, 1e-4, 1e-6, 1e-9)
    rng = np.random.default_rng(seed)
    violations = 0
    for inst in _small_instances(count, rng):
        profile = reward_profile(inst)
        u_star = solve_lp_star(inst.f, profile.u, profile.v_bar).value
        values = []
        for margin in margins:
            solution = solve_lp_star(inst.f, profile.u, profile.v_bar, margin)
            values.append(solution.value if solution.optimal else -math.inf)
        monotone = all(b >= a - LP_TOLERANCE for a, b in zip(values, values[1:]))
        if not monotone or abs(values[-1] - u_star) > 1e-6:
            violations += 1
    return OracleResult("margin_monotonicity", violations == 0, count, violations)


def sector_soundness(
    inst: ProblemInstance, agent: AgentModel, count: int, seed: int, required: float = 1.0
) -> OracleResult:
    """
    Sector tests agree with true containment on margin-respecting sectors.

    Sectors whose edges come within SECTOR_EDGE_GAP of a true last-coordinate
    angle are redrawn.
    """
    name = f"sector_soundness_{agent.kind.name.lower()}"
    if inst.n_actions < 3:
        return OracleResult(name, True, 0, 0, "no reward angles for d < 2")
    env = Environment.create(inst, agent, seed)
    truth = env.oracle.true_angles
    if truth is None:
        return OracleResult(name, False, 0, 0, "degenerate isometry")
    last = truth.coordinate(truth.n_coords)
    budget = EstimationBudget.from_accuracy(
        SECTOR_ACCURACY_N, fail_prob=1e-4, f_min_hint=inst.f_min, polylog_rounds=False
    )
    rng = np.random.default_rng(seed)
    agree = 0
    checked = 0
    while checked < count:
        alpha = float(rng.uniform(0.0, 2.0 * math.pi))
        delta = float(rng.uniform(0.1, math.pi))
        distances = np.array([arc(a, alpha) for a in last])
        if np.any(np.abs(distances - 0.5 * delta) < SECTOR_EDGE_GAP):
            continue
        expected = bool(np.any(distances < 0.5 * delta))
        agree += sec_test(env, alpha, delta, budget) == expected
        checked += 1
    rate = agree / count
    return OracleResult(name, rate >= required, count, count - agree, f"agreement {rate:.4f}")


def _accuracy_instances(inst: ProblemInstance, count: int, rng: np.random.Generator):
    yield inst, None
    for _ in range(count - 1):
        d = int(rng.integers(3, 6))
        n_types = int(rng.integers(2, 5))
        angles = separated_angles(n_types, d, rng)
        iso = make_isometry(d, int(rng.integers(2**31)))
        yield instance_from_angles(angles, iso, seed=int(rng.integers(2**31))), iso


def angle_accuracy(
    inst: ProblemInstance, count: int, seed: int, eps_target: float = LabConstants.DEFAULT_EPS_TARGET
) -> OracleResult:
    """estimate_all reaches the target accuracy in at least 95% of runs."""
    rng = np.random.default_rng(seed)
    hits, failures, checked = 0, 0, 0
    for instance, iso in _accuracy_instances(inst, count, rng):
        if instance.n_actions < 3 or instance.n_types < 2:
            continue
        env = Environment.create(
            instance, AgentModel(), int(rng.integers(2**31)), isometry=iso
        )
        if env.oracle.true_angles is None:
            continue
        budget = EstimationBudget.from_accuracy(
            SECTOR_ACCURACY_N,
            eps_target=eps_target,
            fail_prob=1e-3,
            f_min_hint=instance.f_min,
            polylog_rounds=False,
        )
        checked += 1
        try:
            estimate = estimate_all(env, budget, np.random.default_rng(rng.integers(2**63)))
        except EstimationFailure as e:
            failures += 1
            logger.warning(f"Angle accuracy run failed at {e.stage}")
            continue
        hits += angle_set_distance(env.oracle.true_angles, estimate.angles) <= eps_target
    rate = hits / max(checked, 1)
    return OracleResult(
        "angle_accuracy", rate >= 0.95, checked, checked - hits, f"rate {rate:.3f}, failures {failures}"
    )


def ellipsoid_coverage(
    inst: ProblemInstance, agent: AgentModel, count: int, seed: int
) -> OracleResult:
    """beta* stays in every block's confidence set in at least 88% of replications."""
    config = LinUcbConfig()
    covered = 0
    seeds = np.random.SeedSequence(seed).generate_state(count)
    for rep_seed in seeds:
        env = Environment.create(inst, agent, int(rep_seed), horizon=COVERAGE_HORIZON)
        result = classical_linucb(env, true_polytope(env, config.margin), config)
        covered += coverage_holds(env, result, config)
    rate = covered / count
    return OracleResult("ellipsoid_coverage", rate >= 0.88, count, count - covered, f"rate {rate:.3f}")


def ic_violation(v_bar: np.ndarray, mech: Mechanism) -> float:
    """Largest gain of any type from taking another type's row."""
    values = v_bar @ np.asarray(mech).T
    gain = values - np.diag(values)[:, None]
    np.fill_diagonal(gain, -np.inf)
    return float(gain.max())


def _sample_points(vertices: list[Mechanism], count: int, rng: np.random.Generator) -> list[Mechanism]:
    stacked = np.array(vertices)
    weights = rng.dirichlet(np.ones(len(vertices)), size=count)
    return list(vertices) + list(np.einsum("kv,vij->kij", weights, stacked))


def _perturbed(angles: RewardAngles, radius: float, rng: np.random.Generator) -> RewardAngles:
    noise = rng.standard_normal(angles.values.shape)
    noise *= 0.99 * radius / np.abs(noise).sum(axis=1, keepdims=True)
    values = angles.values + noise
    values[:, :-1] = np.clip(values[:, :-1], 0.0, math.pi)
    values[:, -1] = np.mod(values[:, -1], 2.0 * math.pi)
    return RewardAngles(values)


def pessimistic_containment(
    inst: ProblemInstance,
    instances: int,
    points: int,
    seed: int,
    corruption: float = 0.0,
) -> OracleResult:
    """
    Points of the pessimistic polytope satisfy the true IC constraints.

    Estimates are the true angles moved by l1 distance just under the
    radius. With ``corruption`` the polytope is built instead from the true
    normalized rewards plus renormalized noise of that size, which should
    break containment.
    """
    name = "pessimistic_containment" if corruption == 0.0 else "containment_negative_control"
    rng = np.random.default_rng(seed)
    violations, checked = 0, 0
    for _ in range(instances):
        env = Environment.create(inst, AgentModel(), int(rng.integers(2**31)))
        v_bar = env.profile.v_bar
        if corruption > 0.0:
            noisy = v_bar + corruption * rng.standard_normal(v_bar.shape)
            noisy -= noisy.mean(axis=1, keepdims=True)
            noisy /= np.linalg.norm(noisy, axis=1, keepdims=True)
            poly = ic_polytope(noisy, LabConstants.DEFAULT_MARGIN, CONTAINMENT_RADIUS)
        elif env.oracle.true_angles is None:
            poly = ic_polytope(v_bar, LabConstants.DEFAULT_MARGIN, CONTAINMENT_RADIUS)
        else:
            estimate = _perturbed(env.oracle.true_angles, CONTAINMENT_RADIUS, rng)
            poly = pessimistic_polytope(
                estimate, CONTAINMENT_RADIUS, LabConstants.DEFAULT_MARGIN, env.isometry
            )
        vertices = enumerate_vertices(poly)
        if not vertices:
            continue
        for mech in _sample_points(vertices, points, rng):
            checked += 1
            violations += ic_violation(v_bar, mech) > LabConstants.FEASIBILITY_TOLERANCE
    passed = violations == 0 if corruption == 0.0 else violations > 0
    return OracleResult(name, passed, checked, violations)


def slack_contract(inst: ProblemInstance, rounds: int, seed: int) -> OracleResult:
    """Every report of a slack-adversarial agent loses at most its slack."""
    agent = AgentModel(kind=AgentKind.SLACK_ADVERSARIAL)
    env = Environment.create(inst, agent, seed)
    rng = np.random.default_rng(seed)
    block = max(rounds // 200, 1)
    while env.t < rounds:
        mech = rng.dirichlet(np.ones(inst.n_actions), size=inst.n_types)
        delay = int(rng.integers(0, 12))
        env.deploy(mech, min(block, rounds - env.t), LearnerPhase.PLANNING, delay=delay)
    violations = 0
    for played, hidden in zip(env.transcript.blocks, env.oracle.blocks):
        values = (env.profile.v_bar @ played.mechanism.T)[hidden.types]
        deficit = values.max(axis=1) - values[np.arange(values.shape[0]), played.reports]
        violations += int(np.sum(deficit > hidden.report_slacks + LabConstants.REPORT_TIE_TOLERANCE))
    return OracleResult("slack_contract", violations == 0, env.t, violations)


def single_type_path(seed: int) -> OracleResult:
    """With one type the planner never enters an estimation phase."""
    inst = random_instance(n_types=1, n_actions=3, seed=seed)
    trace = TraceLog()
    env = Environment.create(inst, AgentModel(), seed, horizon=256, trace=trace)
    pess_opt_linucb(env)
    estimation = [b for b in env.transcript.blocks if b.phase is LearnerPhase.ESTIMATION]
    violations = len(estimation) + len(trace.events)
    return OracleResult("single_type_path", violations == 0, len(env.transcript.blocks), violations)


def doubling_vs_known(
    inst: ProblemInstance, agent: AgentModel, horizon: int, seeds: int, seed: int
) -> OracleResult:
    """
    The doubling pipeline's mean regret stays within DOUBLING_REGRET_RATIO of
    the known-horizon learner's on paired seeds.
    """
    config = LinUcbConfig(fail_prob=1e-4)
    known, doubling = [], []
    for rep_seed in np.random.SeedSequence(seed).generate_state(seeds):
        env = Environment.create(inst, agent, int(rep_seed), horizon=horizon)
        pess_opt_linucb(env, config, rng=np.random.default_rng(rep_seed))
        known.append(env.ledger.total)
        env = Environment.create(inst, agent, int(rep_seed), horizon=horizon)
        doubling_pipeline(env, config, rng=np.random.default_rng(rep_seed))
        doubling.append(env.ledger.total)
    ratio = float(np.mean(doubling)) / max(float(np.mean(known)), LabConstants.FEASIBILITY_TOLERANCE)
    passed = ratio <= DOUBLING_REGRET_RATIO
    return OracleResult("doubling_vs_known", passed, seeds, int(not passed), f"regret ratio {ratio:.3f}")


def regret_scaling(report: dict[str, Any]) -> OracleResult:
    """
    Regret of an aggregated run grows, sublinearly, and flattens once divided by sqrt(T) log(T)^3.

    Checks the mean regret is strictly increasing in T, the log-log slope lies
    in REGRET_SLOPE_RANGE, and the normalized regret is non-increasing over
    the three largest horizons.
    """
    lo, hi = REGRET_SLOPE_RANGE
    slope = report["regret_slope"]
    checks = {
        "increasing": bool(report["regret_increasing"]),
        "slope": bool(lo <= slope <= hi),
        "normalized": bool(np.all(np.diff(np.asarray(report["normalized_regret"])[-3:]) <= 0)),
    }
    failed = [name for name, ok in checks.items() if not ok]
    return OracleResult(
        "regret_scaling",
        not failed,
        len(checks),
        len(failed),
        f"slope {slope:.3f}" + (f", failed {failed}" if failed else ""),
    )


def oracle_suite(config: "ExperimentConfig | None" = None, scale: str = "quick") -> OracleReport:
    """
    Run every oracle on the configured instance.

    The negative control passes when the corrupted polytope is caught, so a
    passing suite means every check behaved as expected.
    """
    from .harness import ExperimentConfig

    config = config or ExperimentConfig()
    sizes = SCALES[scale]
    inst, _ = config.build_instance()
    seed = config.base_seed
    logger.info(f"Running the {scale} oracle suite on a |Theta|={inst.n_types}, d={inst.n_actions} instance")
    report = OracleReport()
    report.results.append(revelation_principle(sizes["lp_instances"], seed))
    report.results.append(lp_backends(sizes["lp_instances"], seed + 1))
    report.results.append(margin_monotonicity(sizes["lp_instances"], seed + 2))
    if inst.n_types > 1:
        report.results.append(sector_soundness(inst, AgentModel(), sizes["sector_cases"], seed + 3))
        report.results.append(
            sector_soundness(
                inst,
                AgentModel(kind=AgentKind.SLACK_ADVERSARIAL),
                sizes["sector_cases"],
                seed + 4,
                required=0.99,
            )
        )
        report.results.append(angle_accuracy(inst, sizes["angle_instances"], seed + 5))
        report.results.append(
            pessimistic_containment(
                inst, sizes["containment_instances"], sizes["containment_points"], seed + 7
            )
        )
        report.results.append(
            pessimistic_containment(
                inst,
                sizes["containment_instances"],
                sizes["containment_points"],
                seed + 8,
                corruption=CORRUPTION_NOISE,
            )
        )
    report.results.append(
        ellipsoid_coverage(inst, config.agent_model(), sizes["coverage_replications"], seed + 6)
    )
    report.results.append(slack_contract(inst, sizes["contract_rounds"], seed + 9))
    report.results.append(single_type_path(seed + 10))
    if inst.n_types > 1 and inst.n_actions >= 3:
        report.results.append(
            doubling_vs_known(
                inst, config.agent_model(), sizes["doubling_horizon"], sizes["doubling_seeds"], seed + 11
            )
        )
    for result in report.results:
        level = logging.INFO if result.passed else logging.WARNING
        logger.log(level, f"Oracle {result.name}: {'pass' if result.passed else 'FAIL'} ({result.detail})")
    return report
