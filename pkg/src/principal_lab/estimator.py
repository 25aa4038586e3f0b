"""
Reward angle estimation from the agent's reports.

Every test deploys a query menu for ``t_sec`` rounds with its data released
only after ``l_delay`` dummy rounds, then reads the released reports. The last
coordinate is located by sector tests on the circle; interior coordinates are
estimated in reverse order by conditional tests that keep each label matched
to the same latent type across coordinates.
"""

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy.optimize import linear_sum_assignment

from .constants import LabConstants
from .env import Environment
from .exceptions import (
    CapacityError,
    ConfigError,
    DimensionError,
    EstimationFailure,
    HorizonExhaustedError,
    ProtocolViolationError,
)
from .geometry import HALF_PI, arc, embed_points, wrap, xi
from .model import Mechanism, RewardAngles
from .state_machine import LearnerPhase

logger = logging.getLogger(__name__)

BRUTE_FORCE_LABELS: int = 8


@dataclass(frozen=True)
class EstimationBudget:
    """
    Round and accuracy budget of the estimator.

    Attributes:
        n (int): Accuracy parameter
        t_sec (int): Query rounds per test
        l_delay (int): Dummy rounds after each test
        eps_target (float): Final accuracy of the angle set
        grid_intervals (int): N, the grid search uses intervals of width pi / (2N)
        fail_prob (float): Per-test failure probability the coverage term targets
    """

    n: int
    t_sec: int
    l_delay: int
    eps_target: float = LabConstants.DEFAULT_EPS_TARGET
    grid_intervals: int = LabConstants.MIN_GRID_INTERVALS
    fail_prob: float = LabConstants.DEFAULT_FAIL_PROB

    def __post_init__(self) -> None:
        problems = []
        if self.n < 2:
            problems.append(f"n must be at least 2, got {self.n}")
        if self.t_sec < 1:
            problems.append(f"t_sec must be positive, got {self.t_sec}")
        if self.l_delay < 0:
            problems.append(f"l_delay must be non-negative, got {self.l_delay}")
        if not 0.0 < self.eps_target < math.pi:
            problems.append(f"eps_target must lie in (0, pi), got {self.eps_target}")
        if self.grid_intervals < 1:
            problems.append(f"grid_intervals must be positive, got {self.grid_intervals}")
        if not 0.0 < self.fail_prob < 1.0:
            problems.append(f"fail_prob must lie in (0, 1), got {self.fail_prob}")
        if problems:
            raise ConfigError("Invalid estimation budget: " + "; ".join(problems))

    @classmethod
    def from_accuracy(
        cls,
        n: int,
        eps_target: float = LabConstants.DEFAULT_EPS_TARGET,
        fail_prob: float = LabConstants.DEFAULT_FAIL_PROB,
        f_min_hint: float = LabConstants.DEFAULT_F_MIN_HINT,
        t_sec: int | None = None,
        polylog_rounds: bool = True,
    ) -> "EstimationBudget":
        """
        Derive the budget from the accuracy parameter.

        T_sec is the larger of ceil(ln n)^4 (capped) and the rounds needed to
        see a type of probability ``f_min_hint`` with probability
        1 - ``fail_prob``. With ``polylog_rounds`` off only the coverage term
        is used. The delay is ceil(ln n)^2.
        """
        if not 0.0 < f_min_hint <= 1.0:
            raise ConfigError(f"f_min_hint must lie in (0, 1], got {f_min_hint}")
        if not 0.0 < fail_prob < 1.0:
            raise ConfigError(f"fail_prob must lie in (0, 1), got {fail_prob}")
        log_n = max(1, math.ceil(math.log(max(n, 2))))
        coverage = math.ceil(math.log(1.0 / fail_prob) / f_min_hint)
        if t_sec is None:
            polylog = min(log_n**4, LabConstants.MAX_T_SEC)
            t_sec = max(polylog, coverage) if polylog_rounds else coverage
        return cls(
            n=n,
            t_sec=int(t_sec),
            l_delay=log_n**2,
            eps_target=eps_target,
            grid_intervals=max(log_n, LabConstants.MIN_GRID_INTERVALS),
            fail_prob=fail_prob,
        )

    @property
    def test_rounds(self) -> int:
        return self.t_sec + self.l_delay

    @property
    def k(self) -> int:
        """Binary search depth for the target accuracy."""
        return self.depth(self.eps_target)

    @property
    def grid_step(self) -> float:
        return math.pi / (2 * self.grid_intervals)

    @property
    def last_slack(self) -> float:
        """Offset e added to the tail correlation in the last-coordinate query."""
        return 1.0 / math.log(max(self.n, 3))

    @property
    def sign_threshold(self) -> float:
        return math.sqrt(1.0 / math.log(max(self.n, 3)))

    @staticmethod
    def depth(eps: float) -> int:
        return max(1, math.ceil(math.log2(math.pi / eps)))

    def eps_for_coordinate(self, i: int, d: int) -> float:
        """Accuracy allotted to coordinate i, eps / (4 (d - 1 - i))."""
        if not 1 <= i <= d - 2:
            raise DimensionError(f"Coordinate {i} out of range for d={d}")
        return self.eps_target / (4 * (d - 1 - i))

    def to_dict(self) -> dict[str, Any]:
        return {
            "n": self.n,
            "t_sec": self.t_sec,
            "l_delay": self.l_delay,
            "eps_target": self.eps_target,
            "grid_intervals": self.grid_intervals,
            "fail_prob": self.fail_prob,
        }


@dataclass(frozen=True, eq=False)
class EstimatedAngles:
    angles: RewardAngles
    rounds_used: int

    def to_dict(self) -> dict[str, Any]:
        return {"angles": self.angles.to_list(), "rounds_used": self.rounds_used}


@dataclass
class CoordinateContext:
    """
    State of the search on one interior coordinate.

    Attributes:
        i (int): 1-based coordinate being estimated
        d (int): Number of principal actions
        tails (np.ndarray): Estimates of coordinates i+1..d-2, one row per label
        matched (dict[int, float]): Labels already estimated on coordinate i, in match order
    """

    i: int
    d: int
    tails: np.ndarray
    matched: dict[int, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.tails = np.atleast_2d(np.asarray(self.tails, dtype=float))
        if not 1 <= self.i <= self.d - 3:
            raise DimensionError(f"Interior coordinate {self.i} out of range for d={self.d}")
        if self.tails.shape[1] != self.d - 2 - self.i:
            raise DimensionError(
                f"Tails for coordinate {self.i} need {self.d - 2 - self.i} angles, "
                f"got {self.tails.shape[1]}"
            )

    @property
    def n_labels(self) -> int:
        return int(self.tails.shape[0])

    @property
    def unmatched(self) -> list[int]:
        return [s for s in range(self.n_labels) if s not in self.matched]

    def query_direction(self, beta: float, s: int) -> np.ndarray:
        """xi_i(beta, tail of s)."""
        return xi(self.i, np.concatenate([[beta], self.tails[s]]), self.d)

    def anchor_directions(self) -> list[np.ndarray]:
        return [
            xi(self.i, np.concatenate([[alpha], self.tails[h]]), self.d)
            for h, alpha in self.matched.items()
        ]

    def tail_direction(self, s: int) -> np.ndarray:
        """xi_{i+1}(tail of s), orthogonal to the i-th axis."""
        return xi(self.i + 1, self.tails[s], self.d)

    def matched_spread(self) -> float:
        """Largest distance of a matched estimate from pi/2."""
        return max((abs(a - HALF_PI) for a in self.matched.values()), default=0.0)


@dataclass(frozen=True)
class LastEstimate:
    """Outcome of the last-label search on one coordinate."""

    label: int
    angle: float
    delta_star: float
    correlation: float
    offset: float
    sign: int


def _trace(env: Environment, stage: str, **fields: Any) -> None:
    if env.trace is not None:
        env.trace.write(stage=stage, t=env.t, **fields)


def _menu(env: Environment, directions: list[np.ndarray], radius: float | None = None) -> Mechanism:
    """Query menu from directions, padded to the menu size with copies of the last row."""
    rows = list(directions)
    while len(rows) < env.menu_rows:
        rows.append(rows[-1])
    if len(rows) > env.menu_rows:
        raise CapacityError(f"Query menu needs {len(rows)} rows, only {env.menu_rows} exist")
    return embed_points(np.array(rows), env.r_d if radius is None else radius, env.isometry)


def _query(env: Environment, mech: Mechanism, budget: EstimationBudget) -> np.ndarray:
    """Deploy a query, run the delay, and read back the released reports."""
    start = env.t
    env.deploy(mech, budget.t_sec, LearnerPhase.ESTIMATION, delay=budget.l_delay)
    env.dummy(budget.l_delay)
    if env.t - start != budget.test_rounds:
        logger.error(f"Test consumed {env.t - start} rounds, expected {budget.test_rounds}")
        raise ProtocolViolationError("Test round accounting is off")
    return env.released().reports(start, start + budget.t_sec)


def _audit_edges(env: Environment, i: int, edges: tuple[float, ...]) -> None:
    """Warn when a test edge lands on a true angle within tolerance."""
    truth = env.oracle.true_angles
    if not env.audit_boundaries or truth is None:
        return
    column = truth.coordinate(i)
    last = i == truth.n_coords
    for edge in edges:
        gaps = [arc(edge, a) if last else abs(edge - a) for a in column]
        if min(gaps) <= LabConstants.BOUNDARY_TOLERANCE:
            logger.warning(f"Margin violation: test edge {edge:.15f} on coordinate {i}")


def _last_plane(beta: float, d: int) -> np.ndarray:
    direction = np.zeros(d - 1)
    direction[-2] = math.cos(beta)
    direction[-1] = math.sin(beta)
    return direction


def sec_test(env: Environment, alpha: float, delta: float, budget: EstimationBudget) -> bool:
    """
    Is some last-coordinate angle inside (alpha - delta/2, alpha + delta/2)?

    Rows are x_{alpha-delta}, x_alpha, x_{alpha+delta}; remaining rows copy the
    third. True iff row 1 (x_alpha) is reported at least once.
    """
    if not 0.0 < delta <= math.pi:
        raise ValueError(f"Sector width must lie in (0, pi], got {delta}")
    d = env.n_actions
    mech = _menu(env, [_last_plane(alpha + k * delta, d) for k in (-1, 0, 1)])
    reports = _query(env, mech, budget)
    hit = bool(np.any(reports == 1))
    _audit_edges(env, d - 2, (alpha - 0.5 * delta, alpha + 0.5 * delta))
    _trace(env, "sec_test", alpha=alpha, delta=delta, hits=int(np.sum(reports == 1)), outcome=hit,
           rounds=budget.test_rounds)
    return hit


def binary_search_last(
    env: Environment, budget: EstimationBudget, rng: np.random.Generator
) -> list[tuple[float, float]]:
    """
    Sectors each holding one last-coordinate reward angle.

    Raises:
        EstimationFailure: If the number of surviving sectors differs from |Theta|

    Returns:
        list[tuple[float, float]]: (start, width) of each surviving sector
    """
    d = env.n_actions
    depth = budget.depth(budget.eps_for_coordinate(d - 2, d))
    origin = float(rng.uniform(0.0, 2.0 * math.pi))
    survivors = [origin, origin + math.pi]
    for k in range(1, depth + 1):
        width = math.pi / 2 ** (k - 1)
        following = []
        for q in survivors:
            if sec_test(env, q + 0.5 * width, width, budget):
                following.extend([q, q + 0.5 * width])
        survivors = following
        _trace(env, "binary_search_last", depth=k, survivors=len(survivors) // 2)
    width = math.pi / 2**depth
    sectors = [
        (wrap(q), width) for q in survivors if sec_test(env, q + 0.5 * width, width, budget)
    ]
    if len(sectors) != env.n_types:
        logger.error(f"Last-coordinate search kept {len(sectors)} sectors for {env.n_types} types")
        raise EstimationFailure(
            "last-coordinate", f"{len(sectors)} sectors survived for {env.n_types} types"
        )
    logger.info(f"Last coordinate located in {len(sectors)} sectors of width {width:.3e}")
    return sectors


def con_sec_test(
    env: Environment,
    alpha: float,
    delta: float,
    s: int,
    context: CoordinateContext,
    budget: EstimationBudget,
) -> bool:
    """
    Is coordinate i of the type matched to label s inside (alpha - delta/2, alpha + delta/2)?

    Rows are xi_i at alpha - delta, alpha, alpha + delta with the tail of s,
    then one anchor per matched label, then copies of the last row.

    Raises:
        CapacityError: If the matched set leaves fewer than three free rows
    """
    capacity = env.menu_rows - 3
    if len(context.matched) > capacity:
        logger.error(f"Conditional test with {len(context.matched)} anchors, capacity {capacity}")
        raise CapacityError(
            f"{len(context.matched)} anchors exceed the conditional test capacity {capacity}"
        )
    queries = [context.query_direction(alpha + k * delta, s) for k in (-1, 0, 1)]
    mech = _menu(env, queries + context.anchor_directions())
    reports = _query(env, mech, budget)
    hit = bool(np.any(reports == 1))
    _audit_edges(env, context.i, (alpha - 0.5 * delta, alpha + 0.5 * delta))
    _trace(env, "con_sec_test", i=context.i, label=s, alpha=alpha, delta=delta,
           anchors=len(context.matched), outcome=hit, rounds=budget.test_rounds)
    return hit


def modified_con_sec_test(
    env: Environment,
    alpha: float,
    delta: float,
    s: int,
    context: CoordinateContext,
    budget: EstimationBudget,
) -> tuple[int, int]:
    """
    Two-query conditional test.

    Rows are xi_i at alpha - delta and alpha + delta with the tail of s, then
    one anchor per matched label.

    Returns:
        tuple[int, int]: Reports of the query farther from pi/2 and of the nearer one
    """
    capacity = env.menu_rows - 2
    if len(context.matched) > capacity:
        raise CapacityError(
            f"{len(context.matched)} anchors exceed the modified test capacity {capacity}"
        )
    queries = [context.query_direction(alpha - delta, s), context.query_direction(alpha + delta, s)]
    reports = _query(env, _menu(env, queries + context.anchor_directions()), budget)
    lower, upper = int(np.sum(reports == 0)), int(np.sum(reports == 1))
    outer, inner = (upper, lower) if alpha >= HALF_PI else (lower, upper)
    _trace(env, "modified_con_sec_test", i=context.i, label=s, alpha=alpha, delta=delta,
           outer=outer, inner=inner, rounds=budget.test_rounds)
    return outer, inner


def bin_search_interval(
    env: Environment,
    interval: tuple[float, float],
    s: int,
    context: CoordinateContext,
    eps_target: float,
    budget: EstimationBudget,
) -> float:
    """
    Halve an interval known to hold the angle of label s until it is at most eps_target long.

    The half nearer pi/2 is tested; the other half is kept when the test fails.
    """
    lo, hi = sorted(interval)
    length = hi - lo
    while length > eps_target:
        half = 0.5 * length
        halves = [(lo, lo + half), (lo + half, hi)]
        halves.sort(key=lambda h: abs(0.5 * (h[0] + h[1]) - HALF_PI))
        near, far = halves
        if con_sec_test(env, 0.5 * (near[0] + near[1]), half, s, context, budget):
            lo, hi = near
        else:
            lo, hi = far
        length = half
    return 0.5 * (lo + hi)


def _grid_intervals(budget: EstimationBudget, offset: float) -> list[tuple[float, float]]:
    """Intervals of width iota sweeping outward from pi/2, alternating sides."""
    iota = budget.grid_step
    intervals = []
    k = 1
    while offset + k * iota <= HALF_PI:
        inner, outer = offset + (k - 1) * iota, offset + k * iota
        intervals.append((HALF_PI + inner, HALF_PI + outer))
        intervals.append((HALF_PI - outer, HALF_PI - inner))
        k += 1
    return intervals


def grid_search_coordinate(
    env: Environment,
    i: int,
    tails: np.ndarray,
    budget: EstimationBudget,
    rng: np.random.Generator,
) -> np.ndarray:
    """
    Estimate coordinate i of every label, keeping labels matched.

    Intervals are swept outward from pi/2 from a random offset. A positive
    interval is refined for each positive label, the refined estimate nearest
    pi/2 is matched and becomes an anchor, and the interval is tested again.
    The last two labels are handled by the penultimate and last procedures.

    Raises:
        EstimationFailure: If the sweep ends with too few matched labels

    Returns:
        np.ndarray: Estimate of coordinate i, one entry per label
    """
    d = env.n_actions
    context = CoordinateContext(i=i, d=d, tails=tails)
    eps = budget.eps_for_coordinate(i, d)
    n_labels = context.n_labels
    if n_labels == 1:
        estimate = bin_search_interval(env, (0.0, math.pi), 0, context, eps, budget)
        return np.array([estimate])

    iota = budget.grid_step
    offset = float(rng.uniform(0.0, iota))
    for interval in _grid_intervals(budget, offset):
        if len(context.matched) >= n_labels - 2:
            break
        center = 0.5 * (interval[0] + interval[1])
        while len(context.matched) < n_labels - 2:
            hits = [s for s in context.unmatched if con_sec_test(env, center, iota, s, context, budget)]
            if not hits:
                break
            refined = {s: bin_search_interval(env, interval, s, context, eps, budget) for s in hits}
            label = min(hits, key=lambda s: abs(refined[s] - HALF_PI))
            context.matched[label] = refined[label]
            logger.debug(f"Coordinate {i}: label {label} matched at {refined[label]:.6f}")
            _trace(env, "grid_match", i=i, label=label, estimate=refined[label],
                   candidates=len(hits))
    if len(context.matched) < n_labels - 2:
        logger.error(f"Grid search on coordinate {i} matched {len(context.matched)} labels")
        raise EstimationFailure(
            "grid-search", f"coordinate {i}: {len(context.matched)} of {n_labels - 2} labels matched"
        )

    label, estimate = estimate_penultimate(env, context, budget, rng)
    context.matched[label] = estimate
    last = estimate_last(env, context, budget)
    context.matched[last.label] = last.angle
    return np.array([context.matched[s] for s in range(n_labels)])


def _bisect_distance(
    env: Environment,
    context: CoordinateContext,
    s: int,
    side: int,
    lo: float,
    hi: float,
    eps: float,
    budget: EstimationBudget,
    inside: Any,
) -> float:
    """
    Bisect a distance from pi/2 on one side with modified tests.

    ``inside(outer, inner)`` says whether the angle lies nearer pi/2 than the query.
    """
    while hi - lo > eps:
        mid = 0.5 * (lo + hi)
        outer, inner = modified_con_sec_test(
            env, HALF_PI + side * mid, 0.5 * (hi - lo), s, context, budget
        )
        if inside(outer, inner):
            hi = mid
        else:
            lo = mid
    return HALF_PI + side * 0.5 * (lo + hi)


def estimate_penultimate(
    env: Environment,
    context: CoordinateContext,
    budget: EstimationBudget,
    rng: np.random.Generator,
) -> tuple[int, float]:
    """
    Estimate the nearer-to-pi/2 of the two remaining labels.

    Queries at pi/2 +- u with u beyond every matched estimate decide whether the
    two remaining angles straddle pi/2 or lie on one side. A straddle is
    resolved by sweeping outward until a side has no angle beyond the query;
    a one-sided pair is resolved by sweeping outward until an angle falls
    inside the query. Either way the crossing is then bisected.

    Raises:
        EstimationFailure: If two labels are not left or no crossing is found

    Returns:
        tuple[int, float]: Matched label and its estimate
    """
    remaining = context.unmatched
    if len(remaining) != 2:
        raise EstimationFailure(
            "penultimate", f"expected two unmatched labels, found {len(remaining)}"
        )
    iota = budget.grid_step
    eps = budget.eps_for_coordinate(context.i, context.d)
    u = context.matched_spread() + iota + float(rng.uniform(0.0, iota))
    steps = math.floor((HALF_PI - u) / iota)
    if steps < 1:
        raise EstimationFailure("penultimate", f"no room to sweep beyond u={u:.4f}")

    beyond = {
        side: [q for q in remaining if modified_con_sec_test(
            env, HALF_PI + side * u, iota, q, context, budget)[0] > 0]
        for side in (1, -1)
    }
    if beyond[1] and beyond[-1]:
        branch = "straddle"
        candidates = [(side, q) for side in (1, -1) for q in beyond[side]]
        for k in range(1, steps + 1):
            distance = u + k * iota
            hits = []
            for side, q in candidates:
                outer, inner = modified_con_sec_test(
                    env, HALF_PI + side * distance, iota, q, context, budget
                )
                if outer == 0 and inner > 0:
                    hits.append((side, q))
            if hits:
                refined = {
                    hit: _bisect_distance(
                        env, context, hit[1], hit[0], distance - iota, distance, eps, budget,
                        lambda outer, inner: outer == 0 and inner > 0,
                    )
                    for hit in hits
                }
                break
        else:
            refined = {}
    else:
        side = 1 if not beyond[-1] else -1
        branch = "above" if side == 1 else "below"
        refined = {}
        for k in range(0, steps + 1):
            distance = u + k * iota
            hits = [
                (side, q)
                for q in remaining
                if modified_con_sec_test(env, HALF_PI + side * distance, iota, q, context, budget)[1]
                > 0
            ]
            if hits:
                floor = max(distance - iota, context.matched_spread())
                refined = {
                    hit: _bisect_distance(
                        env, context, hit[1], side, floor, distance, eps, budget,
                        lambda outer, inner: inner > 0,
                    )
                    for hit in hits
                }
                break

    if not refined:
        logger.error(f"Penultimate search ({branch}) on coordinate {context.i} found no crossing")
        raise EstimationFailure("penultimate", f"{branch} sweep found no crossing")
    (_, label), estimate = min(refined.items(), key=lambda item: abs(item[1] - HALF_PI))
    _trace(env, "penultimate", i=context.i, branch=branch, label=label, estimate=estimate)
    logger.debug(f"Coordinate {context.i}: penultimate label {label} at {estimate:.6f} ({branch})")
    return label, estimate


def estimate_type_prior(
    env: Environment, context: CoordinateContext, budget: EstimationBudget
) -> np.ndarray:
    """
    Report frequencies under the menu of tail directions xi_{i+1}(tail of s).

    Each type reports the label whose tail matches its own, so the
    frequencies estimate the type prior in label order.
    """
    mech = _menu(env, [context.tail_direction(s) for s in range(context.n_labels)])
    reports = _query(env, mech, budget)
    counts = np.bincount(reports, minlength=env.menu_rows)[: context.n_labels]
    prior = counts / reports.size
    _trace(env, "type_prior", i=context.i, prior=prior.tolist(), rounds=budget.test_rounds)
    return prior


def estimate_sign(
    env: Environment,
    context: CoordinateContext,
    budget: EstimationBudget,
    prior: np.ndarray,
    label: int,
) -> int:
    """
    Estimate sign(pi/2 - alpha_i) of the unmatched label.

    Row 0 points along the i-th axis and every other row against it, so the
    types below pi/2 on coordinate i report row 0. The share of row 0 minus
    the prior mass of matched labels below pi/2 reveals the remaining label.

    Raises:
        EstimationFailure: If the share falls short of the matched mass

    Returns:
        int: +1 if the angle lies below pi/2, -1 otherwise
    """
    axis = np.zeros(context.d - 1)
    axis[context.i - 1] = 1.0
    directions = [axis] + [-axis] * (env.menu_rows - 1)
    reports = _query(env, _menu(env, directions), budget)
    share = float(np.mean(reports == 0))
    below = sum(prior[s] for s, a in context.matched.items() if a <= HALF_PI)
    threshold = min(budget.sign_threshold, 0.5 * float(prior[label]))
    gap = share - below
    _trace(env, "sign", i=context.i, label=label, share=share, matched_mass=below,
           threshold=threshold)
    if gap <= -threshold:
        logger.error(f"Sign test share {share:.4f} is below the matched mass {below:.4f}")
        raise EstimationFailure("sign", f"row-0 share {share:.4f} below matched mass {below:.4f}")
    return 1 if gap >= threshold else -1


def _last_query(
    env: Environment, context: CoordinateContext, label: int, delta: float, sign: int, offset: float
) -> Mechanism:
    axis = np.zeros(context.d - 1)
    axis[context.i - 1] = 1.0
    query = sign * delta * axis - offset * context.tail_direction(label)
    directions = [context.tail_direction(s) for s in context.matched] + [query]
    radius = env.r_d / max(1.0, float(np.linalg.norm(query)))
    return _menu(env, directions, radius)


def estimate_last(
    env: Environment, context: CoordinateContext, budget: EstimationBudget
) -> LastEstimate:
    """
    Estimate coordinate i of the one label left.

    The menu holds the tail direction of every matched label and one query
    sign * delta * e_i - e * xi_{i+1}(tail of the label). The label's type
    takes the query exactly when delta > |tan alpha_i| (c + e), where c is
    the largest tail correlation with the matched labels. The threshold is
    bisected and inverted through arctan, with the side of pi/2 taken from
    the sign estimate.

    Raises:
        EstimationFailure: If one label is not left or the bracket is empty
    """
    remaining = context.unmatched
    if len(remaining) != 1:
        raise EstimationFailure("last", f"expected one unmatched label, found {len(remaining)}")
    label = remaining[0]
    own = context.tail_direction(label)
    correlation = max(float(own @ context.tail_direction(s)) for s in context.matched)
    offset = max(-correlation, 0.0) + budget.last_slack
    scale = correlation + offset

    prior = estimate_type_prior(env, context, budget)
    sign = estimate_sign(env, context, budget, prior, label)

    low = 0.0
    high = min(abs(math.tan(a)) for a in context.matched.values()) * scale
    if high <= LabConstants.MIN_BRACKET:
        raise EstimationFailure("last", f"empty threshold bracket {high:.3e}")
    tolerance = budget.eps_for_coordinate(context.i, context.d) * scale
    row = len(context.matched)
    while high - low > tolerance:
        mid = 0.5 * (low + high)
        reports = _query(env, _last_query(env, context, label, mid, sign, offset), budget)
        taken = bool(np.any(reports == row))
        _trace(env, "last_bisect", i=context.i, label=label, delta=mid, outcome=taken)
        if taken:
            high = mid
        else:
            low = mid
    delta_star = 0.5 * (low + high)
    angle = math.atan(delta_star / scale)
    if sign < 0:
        angle = math.pi - angle
    _trace(env, "last", i=context.i, label=label, estimate=angle, delta_star=delta_star)
    return LastEstimate(
        label=label,
        angle=angle,
        delta_star=delta_star,
        correlation=correlation,
        offset=offset,
        sign=sign,
    )


def estimate_all(
    env: Environment, budget: EstimationBudget, rng: np.random.Generator
) -> EstimatedAngles:
    """
    Estimate the full reward angle set.

    The last coordinate comes first, then coordinates d-3 down to 1, each
    conditioned on the tails already estimated.

    Raises:
        DimensionError: If d < 3
        EstimationFailure: If a stage fails; ``stage`` names it

    Returns:
        EstimatedAngles: Angle estimates and rounds consumed
    """
    d = env.n_actions
    if d < 3:
        logger.error(f"estimate_all needs d >= 3, got {d}")
        raise DimensionError(f"Reward angles need d >= 3, got {d}")
    start = env.t
    values = np.zeros((env.n_types, d - 2))
    logger.info(f"Estimating reward angles: |Theta|={env.n_types}, d={d}, T_sec={budget.t_sec}")
    try:
        sectors = binary_search_last(env, budget, rng)
        values[:, -1] = [wrap(q + 0.5 * width) for q, width in sectors]
        for i in range(d - 3, 0, -1):
            values[:, i - 1] = grid_search_coordinate(env, i, values[:, i:], budget, rng)
    except HorizonExhaustedError as e:
        logger.error(f"Estimation ran out of rounds at t={env.t}")
        raise EstimationFailure("budget", str(e)) from e
    values[:, :-1] = np.clip(values[:, :-1], 0.0, math.pi)
    rounds = env.t - start
    _trace(env, "estimate_all", rounds=rounds, estimate=values.tolist())
    logger.info(f"Reward angles estimated in {rounds} rounds")
    return EstimatedAngles(angles=RewardAngles(values), rounds_used=rounds)


def _as_values(angles: RewardAngles | np.ndarray) -> np.ndarray:
    if isinstance(angles, RewardAngles):
        return angles.values
    return np.atleast_2d(np.asarray(angles, dtype=float))


def pairwise_distances(truth: RewardAngles | np.ndarray, estimate: RewardAngles | np.ndarray) -> np.ndarray:
    """
    l1 distances between every estimated and every true angle vector.

    Entry [s, theta] compares label s with type theta; the last coordinate
    is measured along the circle.
    """
    a, b = _as_values(truth), _as_values(estimate)
    if a.shape != b.shape:
        logger.error(f"Angle sets of shapes {a.shape} and {b.shape} cannot be compared")
        raise DimensionError(f"Angle sets differ in shape: {a.shape} vs {b.shape}")
    interior = np.abs(b[:, None, :-1] - a[None, :, :-1]).sum(axis=-1)
    diff = np.mod(b[:, None, -1] - a[None, :, -1], 2.0 * math.pi)
    circular = np.minimum(diff, 2.0 * math.pi - diff)
    return interior + circular


def bottleneck_distance(costs: np.ndarray) -> float:
    """
    min over permutations of the max matched cost.

    Thresholds are searched over the sorted costs; a threshold is feasible
    when a zero-cost assignment exists on the edges not above it.
    """
    costs = np.asarray(costs, dtype=float)
    levels = np.unique(costs)
    lo, hi = 0, levels.size - 1
    while lo < hi:
        mid = (lo + hi) // 2
        blocked = (costs > levels[mid]).astype(float)
        rows, cols = linear_sum_assignment(blocked)
        if blocked[rows, cols].sum() == 0:
            hi = mid
        else:
            lo = mid + 1
    return float(levels[lo])


def _brute_force_bottleneck(costs: np.ndarray) -> float:
    n = costs.shape[0]
    return float(
        min(
            max(costs[s, perm[s]] for s in range(n))
            for perm in itertools.permutations(range(n))
        )
    )


def angle_set_distance(
    truth: RewardAngles | np.ndarray, estimate: RewardAngles | np.ndarray
) -> float:
    """Set distance: min over label permutations of the largest l1 error."""
    costs = pairwise_distances(truth, estimate)
    if costs.shape[0] <= BRUTE_FORCE_LABELS:
        return _brute_force_bottleneck(costs)
    return bottleneck_distance(costs)


def coordinate_distance(
    truth: np.ndarray, estimate: np.ndarray, circular: bool = True
) -> float:
    """Set distance of one coordinate, on the circle by default."""
    a, b = np.asarray(truth, dtype=float).ravel(), np.asarray(estimate, dtype=float).ravel()
    if a.size != b.size:
        raise DimensionError(f"Coordinate sets differ in size: {a.size} vs {b.size}")
    diff = np.abs(b[:, None] - a[None, :])
    if circular:
        diff = np.mod(diff, 2.0 * math.pi)
        diff = np.minimum(diff, 2.0 * math.pi - diff)
    if a.size <= BRUTE_FORCE_LABELS:
        return _brute_force_bottleneck(diff)
    return bottleneck_distance(diff)


def alignment(truth: RewardAngles | np.ndarray, estimate: RewardAngles | np.ndarray) -> np.ndarray:
    """
    Type matched to each label by the last coordinate.

    The permutation minimizes the largest circular error on the last
    coordinate; ties go to the lexicographically first permutation.
    """
    a, b = _as_values(truth), _as_values(estimate)
    diff = np.mod(np.abs(b[:, None, -1] - a[None, :, -1]), 2.0 * math.pi)
    diff = np.minimum(diff, 2.0 * math.pi - diff)
    n = diff.shape[0]
    best = min(
        itertools.permutations(range(n)),
        key=lambda perm: max(diff[s, perm[s]] for s in range(n)),
    )
    return np.array(best)


def matched_distance(
    truth: RewardAngles | np.ndarray,
    estimate: RewardAngles | np.ndarray,
    i: int = 1,
    matching: np.ndarray | None = None,
) -> float:
    """
    sup over labels of the l1 error on coordinates i..d-2 under a fixed matching.

    The matching defaults to :func:`alignment`; it needs the true angles, so
    this metric is for tests and oracles only.
    """
    a, b = _as_values(truth), _as_values(estimate)
    if a.shape != b.shape:
        raise DimensionError(f"Angle sets differ in shape: {a.shape} vs {b.shape}")
    matching = alignment(a, b) if matching is None else np.asarray(matching, dtype=int)
    costs = pairwise_distances(a[:, i - 1 :], b[:, i - 1 :])
    return float(max(costs[s, matching[s]] for s in range(b.shape[0])))
