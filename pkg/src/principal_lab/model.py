"""
Ground-truth problem instances, reward normalization, best responses and
assumption checks.
"""

import hashlib
import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .constants import LabConstants
from .exceptions import (
    AssumptionViolationError,
    DegenerateInstanceError,
    DimensionError,
    RotationRetry,
)
from .geometry import HALF_PI, Isometry, arc, inradius, inverse_embed, spherical_embed, wrap

logger = logging.getLogger(__name__)

Mechanism = np.ndarray


def validate_mechanism(mech: Mechanism, n_rows: int | None = None, d: int | None = None) -> np.ndarray:
    """
    Check that a mechanism is a row-stochastic matrix.

    Raises:
        DimensionError: If the shape does not match or rows are not distributions
    """
    mech = np.asarray(mech, dtype=float)
    if mech.ndim != 2:
        raise DimensionError(f"Mechanism must be a matrix, got shape {mech.shape}")
    if n_rows is not None and mech.shape[0] != n_rows:
        raise DimensionError(f"Mechanism must have {n_rows} rows, got {mech.shape[0]}")
    if d is not None and mech.shape[1] != d:
        raise DimensionError(f"Mechanism must have {d} columns, got {mech.shape[1]}")
    tol = LabConstants.FEASIBILITY_TOLERANCE
    if mech.min() < -tol or np.max(np.abs(mech.sum(axis=1) - 1.0)) > tol:
        raise DimensionError("Mechanism rows must be probability distributions")
    return mech


def dummy_mechanism(n_rows: int, d: int) -> Mechanism:
    """Every row uniform over the principal's actions."""
    return np.full((n_rows, d), 1.0 / d)


def mechanism_hash(mech: Mechanism) -> str:
    """Short stable digest of a mechanism, rounded to 12 decimals."""
    normalized = np.round(np.asarray(mech, dtype=float), 12) + 0.0
    return hashlib.sha1(np.ascontiguousarray(normalized).tobytes()).hexdigest()[:12]


@dataclass(frozen=True, eq=False)
class ProblemInstance:
    """
    A finite generalized principal-agent game.

    Attributes:
        f (np.ndarray): Type distribution, shape (n_types,)
        U (np.ndarray): Principal rewards indexed (type, action, agent action, outcome)
        V (np.ndarray): Agent rewards with the same indexing
        F (np.ndarray): Outcome distributions indexed (type, action, agent action, outcome)
        gamma (float): Agent discount factor in (0, 1)
        B (float): Bound on absolute rewards
        seed (int | None): Generator seed, if any
    """

    f: np.ndarray
    U: np.ndarray
    V: np.ndarray
    F: np.ndarray
    gamma: float = LabConstants.DEFAULT_GAMMA
    B: float = LabConstants.DEFAULT_BOUND
    seed: int | None = None
    expected_U: np.ndarray = field(init=False, repr=False)
    expected_V: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        f = np.asarray(self.f, dtype=float)
        U = np.asarray(self.U, dtype=float)
        V = np.asarray(self.V, dtype=float)
        F = np.asarray(self.F, dtype=float)
        if f.ndim != 1 or U.ndim != 4 or V.shape != U.shape or F.shape != U.shape:
            raise DimensionError(
                f"Inconsistent instance shapes: f {f.shape}, U {U.shape}, V {V.shape}, F {F.shape}"
            )
        if U.shape[0] != f.size:
            raise DimensionError("Reward tensors must be indexed by the type first")
        if U.shape[1] < 2:
            raise DimensionError("The principal needs at least two actions")
        if np.any(f <= 0) or abs(f.sum() - 1.0) > 1e-9:
            raise AssumptionViolationError(
                "Type distribution must be positive and sum to one", ["type-support"]
            )
        if np.any(F < 0) or np.max(np.abs(F.sum(axis=-1) - 1.0)) > 1e-9:
            raise AssumptionViolationError(
                "Outcome distributions must be probability vectors", ["outcome-distribution"]
            )
        if max(np.abs(U).max(), np.abs(V).max()) > self.B + 1e-12:
            raise AssumptionViolationError(
                f"Rewards exceed the bound B={self.B}", ["reward-bound"]
            )
        if not 0.0 < self.gamma < 1.0:
            raise AssumptionViolationError(
                f"Discount factor must lie in (0, 1), got {self.gamma}", ["discount"]
            )
        for name, value in (("f", f), ("U", U), ("V", V), ("F", F)):
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        expected_U = np.einsum("txao,txao->txa", U, F)
        expected_V = np.einsum("txao,txao->txa", V, F)
        expected_U.setflags(write=False)
        expected_V.setflags(write=False)
        object.__setattr__(self, "expected_U", expected_U)
        object.__setattr__(self, "expected_V", expected_V)
        self._check_unique_best_actions()

    def _check_unique_best_actions(self) -> None:
        if self.n_agent_actions < 2:
            return
        ordered = np.sort(self.expected_V, axis=-1)
        gaps = ordered[..., -1] - ordered[..., -2]
        if gaps.min() <= LabConstants.TIE_TOLERANCE:
            theta, x = np.unravel_index(int(np.argmin(gaps)), gaps.shape)
            logger.error(f"Best response tie at type {theta}, action {x}")
            raise AssumptionViolationError(
                f"Best response is not unique at type {theta}, action {x}",
                ["unique-best-response"],
            )

    @property
    def n_types(self) -> int:
        return int(self.f.size)

    @property
    def n_actions(self) -> int:
        return int(self.U.shape[1])

    @property
    def n_agent_actions(self) -> int:
        return int(self.U.shape[2])

    @property
    def n_outcomes(self) -> int:
        return int(self.U.shape[3])

    @property
    def f_min(self) -> float:
        return float(self.f.min())

    def to_dict(self) -> dict[str, Any]:
        return {
            "n_types": self.n_types,
            "n_actions": self.n_actions,
            "n_agent_actions": self.n_agent_actions,
            "n_outcomes": self.n_outcomes,
            "gamma": self.gamma,
            "B": self.B,
            "seed": self.seed,
            "f": self.f.tolist(),
            "U": self.U.tolist(),
            "V": self.V.tolist(),
            "F": self.F.tolist(),
        }

    @classmethod
    def from_dict(cls, payload: dict[str, Any]) -> "ProblemInstance":
        try:
            return cls(
                f=np.asarray(payload["f"], dtype=float),
                U=np.asarray(payload["U"], dtype=float),
                V=np.asarray(payload["V"], dtype=float),
                F=np.asarray(payload["F"], dtype=float),
                gamma=float(payload.get("gamma", LabConstants.DEFAULT_GAMMA)),
                B=float(payload.get("B", LabConstants.DEFAULT_BOUND)),
                seed=payload.get("seed"),
            )
        except KeyError as e:
            logger.error(f"Instance document misses field {e}")
            raise DimensionError(f"Instance document misses field {e}") from e


def save_instance(inst: ProblemInstance, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(inst.to_dict(), indent=2))
    logger.info(f"Instance written to {path}")
    return path


def load_instance(path: str | Path) -> ProblemInstance:
    path = Path(path)
    logger.debug(f"Loading instance from {path}")
    return ProblemInstance.from_dict(json.loads(path.read_text()))


def _check_indices(inst: ProblemInstance, theta: int, x: int, a: int | None = None) -> None:
    if not 0 <= theta < inst.n_types:
        raise DimensionError(f"Type index {theta} out of range [0, {inst.n_types})")
    if not 0 <= x < inst.n_actions:
        raise DimensionError(f"Action index {x} out of range [0, {inst.n_actions})")
    if a is not None and not 0 <= a < inst.n_agent_actions:
        raise DimensionError(f"Agent action {a} out of range [0, {inst.n_agent_actions})")


def expected_agent_reward(inst: ProblemInstance, theta: int, x: int, a: int) -> float:
    """Agent reward of (theta, x, a) averaged over outcomes."""
    _check_indices(inst, theta, x, a)
    return float(inst.expected_V[theta, x, a])


def expected_principal_reward(inst: ProblemInstance, theta: int, x: int, a: int) -> float:
    """Principal reward of (theta, x, a) averaged over outcomes."""
    _check_indices(inst, theta, x, a)
    return float(inst.expected_U[theta, x, a])


def best_action(inst: ProblemInstance, theta: int, x: int) -> int:
    """
    The agent's best response to principal action x.

    Raises:
        DimensionError: If an index is out of range
        AssumptionViolationError: If two actions tie within tolerance
    """
    _check_indices(inst, theta, x)
    values = inst.expected_V[theta, x]
    best = int(np.argmax(values))
    if values.size > 1:
        runner_up = np.max(np.delete(values, best))
        if values[best] - runner_up <= LabConstants.TIE_TOLERANCE:
            raise AssumptionViolationError(
                f"Best response tie at type {theta}, action {x}", ["unique-best-response"]
            )
    return best


@dataclass(frozen=True, eq=False)
class RewardProfile:
    """
    Reward vectors induced by best responses.

    Attributes:
        v (np.ndarray): Agent rewards V(theta, x), shape (n_types, d)
        u (np.ndarray): Principal rewards U(theta, x), shape (n_types, d)
        v_bar (np.ndarray): Centered, unit-norm agent reward rows
        C0 (float): Report slack scale 2B / min_theta ||v_theta - mean||
        best_actions (np.ndarray): Best response a(theta, x)
    """

    v: np.ndarray
    u: np.ndarray
    v_bar: np.ndarray
    C0: float
    best_actions: np.ndarray

    @property
    def n_types(self) -> int:
        return int(self.v.shape[0])

    @property
    def d(self) -> int:
        return int(self.v.shape[1])


def reward_profile(inst: ProblemInstance) -> RewardProfile:
    """
    Best-response reward vectors and their normalization.

    Raises:
        AssumptionViolationError: If a row of v is parallel to the all-ones vector
            or two normalized rows coincide
    """
    best = np.argmax(inst.expected_V, axis=-1)
    v = np.take_along_axis(inst.expected_V, best[..., None], axis=-1)[..., 0]
    u = np.take_along_axis(inst.expected_U, best[..., None], axis=-1)[..., 0]
    centered = v - v.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(centered, axis=1)
    if norms.min() <= LabConstants.TIE_TOLERANCE:
        theta = int(np.argmin(norms))
        logger.error(f"Agent reward row of type {theta} is parallel to the all-ones vector")
        raise AssumptionViolationError(
            f"Agent reward row of type {theta} is constant", ["not-all-one"]
        )
    v_bar = centered / norms[:, None]
    for a, b in itertools.combinations(range(v.shape[0]), 2):
        if np.max(np.abs(v_bar[a] - v_bar[b])) <= LabConstants.TIE_TOLERANCE:
            raise AssumptionViolationError(
                f"Types {a} and {b} share a normalized reward vector", ["distinct-rows"]
            )
    for array in (v, u, v_bar, best):
        array.setflags(write=False)
    return RewardProfile(
        v=v, u=u, v_bar=v_bar, C0=float(2.0 * inst.B / norms.min()), best_actions=best
    )


def antipodal_pairs(profile: RewardProfile) -> list[tuple[int, int]]:
    """Type pairs whose normalized reward vectors are opposite."""
    pairs = []
    for a, b in itertools.combinations(range(profile.n_types), 2):
        if np.max(np.abs(profile.v_bar[a] + profile.v_bar[b])) <= LabConstants.TIE_TOLERANCE:
            pairs.append((a, b))
    return pairs


def interior_feasible_mechanism(profile: RewardProfile) -> Mechanism:
    """Strictly incentive-compatible mechanism 1/d + (r_d/2) v_bar."""
    return 1.0 / profile.d + 0.5 * inradius(profile.d) * profile.v_bar


@dataclass(frozen=True, eq=False)
class RewardAngles:
    """
    Spherical coordinates of the rotated normalized reward vectors.

    Row s holds (alpha_1, ..., alpha_{d-2}) for label s; interior coordinates
    lie in [0, pi] and the last one in [0, 2pi).
    """

    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=float, ndmin=2)
        if values.shape[1] < 1:
            raise DimensionError("RewardAngles needs at least one coordinate")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def n_types(self) -> int:
        return int(self.values.shape[0])

    @property
    def n_coords(self) -> int:
        return int(self.values.shape[1])

    @property
    def d(self) -> int:
        return self.n_coords + 2

    def coordinate(self, i: int) -> np.ndarray:
        """Column of the 1-based coordinate i."""
        if not 1 <= i <= self.n_coords:
            raise DimensionError(f"Coordinate {i} out of range [1, {self.n_coords}]")
        return self.values[:, i - 1]

    def tail(self, s: int, i: int) -> np.ndarray:
        """Coordinates i..d-2 of label s."""
        return self.values[s, i - 1 :]

    def directions(self) -> np.ndarray:
        """Unit vectors rho(alpha^s), one row per label."""
        return spherical_embed(self.values)

    def to_list(self) -> list[list[float]]:
        return self.values.tolist()


def angle_condition_violations(angles: RewardAngles) -> list[str]:
    """Names of the genericity conditions the angle set breaks."""
    tol = LabConstants.TIE_TOLERANCE
    values = angles.values
    violations: list[str] = []
    interior = values[:, :-1]
    if interior.size and np.any(
        (np.abs(interior) <= tol)
        | (np.abs(interior - math.pi) <= tol)
        | (np.abs(interior - HALF_PI) <= tol)
    ):
        violations.append("interior-position")
    for a, b in itertools.combinations(range(angles.n_types), 2):
        if np.any(np.abs(interior[a] - interior[b]) <= tol) or arc(
            values[a, -1], values[b, -1]
        ) <= tol:
            violations.append(f"distinct-coordinates({a},{b})")
        if abs(arc(values[a, -1], values[b, -1]) - math.pi) <= tol:
            violations.append(f"non-antipodal-last({a},{b})")
        if interior.size and np.any(
            np.abs(np.abs(interior[a] - HALF_PI) - np.abs(interior[b] - HALF_PI)) <= tol
        ):
            violations.append(f"distinct-distance({a},{b})")
    return violations


def reward_angles(profile: RewardProfile, iso: Isometry) -> RewardAngles:
    """
    Reward angles of every type under the isometry.

    Raises:
        DimensionError: If d < 3 or the isometry dimension does not match
        RotationRetry: If the angles are in a degenerate position
    """
    if profile.d < 3:
        raise DimensionError(f"Reward angles need d >= 3, got {profile.d}")
    if iso.d != profile.d:
        raise DimensionError(f"Isometry dimension {iso.d} does not match d={profile.d}")
    rotated = iso.apply(profile.v_bar)
    rotated /= np.linalg.norm(rotated, axis=1, keepdims=True)
    angles = RewardAngles(np.array([inverse_embed(row) for row in rotated]))
    violations = angle_condition_violations(angles)
    if violations:
        logger.warning(f"Isometry seed {iso.seed} gives degenerate angles: {violations}")
        raise RotationRetry("Reward angles violate the genericity conditions", violations)
    return angles


@dataclass(frozen=True, eq=False)
class GapProfile:
    """
    Angle gaps per coordinate.

    Arrays are indexed by 0-based position of the 1-based coordinate i, so
    entry i-1 belongs to coordinate i. ``chi`` and ``chi_tilde`` are +inf on
    the last coordinate.
    """

    chi: np.ndarray
    chi_tilde: np.ndarray
    chi_bar: np.ndarray
    delta_sin: float

    def minimum(self) -> float:
        return float(min(self.chi.min(), self.chi_tilde.min(), self.chi_bar.min(), self.delta_sin))


def gap_profile(angles: RewardAngles) -> GapProfile:
    """
    Angle gaps of a reward angle set.

    Raises:
        DegenerateInstanceError: If some gap is zero
    """
    values = angles.values
    k = angles.n_coords
    chi = np.full(k, math.inf)
    chi_tilde = np.full(k, math.inf)
    chi_bar = np.full(k, math.inf)
    pairs = list(itertools.combinations(range(angles.n_types), 2))
    for j in range(k - 1):
        column = values[:, j]
        distance = np.abs(column - HALF_PI)
        edges = np.minimum.reduce([np.abs(column), np.abs(column - math.pi), distance])
        chi_tilde[j] = float(min(edges.min(), LabConstants.GAP_CAP))
        for a, b in pairs:
            chi[j] = min(chi[j], abs(distance[a] - distance[b]))
    for j in range(k):
        column = values[:, j]
        for a, b in pairs:
            chi_bar[j] = min(
                chi_bar[j],
                arc(column[a], column[b]),
                arc(column[a], wrap(column[b] + math.pi)),
            )
    delta_sin = float(np.min(np.prod(np.sin(values[:, :-1]), axis=1)))
    profile = GapProfile(chi=chi, chi_tilde=chi_tilde, chi_bar=chi_bar, delta_sin=delta_sin)
    if profile.minimum() <= 0.0:
        logger.error(f"Degenerate angle gaps: {profile}")
        raise DegenerateInstanceError("Some angle gap is zero")
    return profile


def sample_type(inst: ProblemInstance, rng: np.random.Generator) -> int:
    return int(rng.choice(inst.n_types, p=inst.f))


def sample_outcome(
    inst: ProblemInstance, theta: int, x: int, a: int, rng: np.random.Generator
) -> int:
    _check_indices(inst, theta, x, a)
    return int(rng.choice(inst.n_outcomes, p=inst.F[theta, x, a]))


def sample_categorical(probabilities: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One categorical draw per row of a probability matrix."""
    cumulative = np.cumsum(probabilities, axis=-1)
    draws = rng.random(probabilities.shape[:-1])[..., None]
    picks = (draws > cumulative).sum(axis=-1)
    return np.minimum(picks, probabilities.shape[-1] - 1)


def random_instance(
    n_types: int,
    n_actions: int,
    n_agent_actions: int = 2,
    n_outcomes: int = 2,
    seed: int = 0,
    bound: float = LabConstants.DEFAULT_BOUND,
    gamma: float = LabConstants.DEFAULT_GAMMA,
    min_prob: float = LabConstants.MIN_TYPE_PROBABILITY,
) -> ProblemInstance:
    """
    Random instance with uniform rewards and Dirichlet outcome laws.

    The type distribution is a Dirichlet draw floored at ``min_prob``.
    Instances that break the model assumptions, or have antipodal reward
    vectors, are regenerated.

    Raises:
        AssumptionViolationError: If no valid instance is found within the retry cap
    """
    if n_types * min_prob >= 1.0:
        raise AssumptionViolationError(
            f"min_prob={min_prob} is too large for {n_types} types", ["type-support"]
        )
    rng = np.random.default_rng(seed)
    shape = (n_types, n_actions, n_agent_actions, n_outcomes)
    last_error: AssumptionViolationError | None = None
    for attempt in range(LabConstants.MAX_INSTANCE_RETRIES):
        f = min_prob + (1.0 - n_types * min_prob) * rng.dirichlet(np.ones(n_types))
        U = rng.uniform(-bound, bound, size=shape)
        V = rng.uniform(-bound, bound, size=shape)
        F = rng.dirichlet(np.ones(n_outcomes), size=shape[:-1])
        try:
            inst = ProblemInstance(f=f, U=U, V=V, F=F, gamma=gamma, B=bound, seed=seed)
            profile = reward_profile(inst)
            if antipodal_pairs(profile):
                raise AssumptionViolationError("Antipodal reward vectors", ["non-antipodal"])
            return inst
        except AssumptionViolationError as e:
            logger.debug(f"Instance attempt {attempt} rejected: {e}")
            last_error = e
    logger.error(f"No valid instance after {LabConstants.MAX_INSTANCE_RETRIES} attempts")
    raise AssumptionViolationError(
        f"No valid instance after {LabConstants.MAX_INSTANCE_RETRIES} attempts",
        last_error.conditions if last_error else [],
    )


def reference_instance() -> ProblemInstance:
    """The shipped two-type, three-action instance."""
    return random_instance(
        n_types=2,
        n_actions=3,
        n_agent_actions=2,
        n_outcomes=2,
        seed=LabConstants.REFERENCE_SEED,
        min_prob=0.2,
    )


def instance_from_angles(
    angles: RewardAngles,
    iso: Isometry,
    f: np.ndarray | None = None,
    principal_rewards: np.ndarray | None = None,
    bound: float = LabConstants.DEFAULT_BOUND,
    gamma: float = LabConstants.DEFAULT_GAMMA,
    seed: int = 0,
) -> ProblemInstance:
    """
    One-action, one-outcome instance with prescribed reward angles.

    The agent rewards are B * iso^-1(rho(alpha^theta)), which are already
    centered with norm B, so the normalized rows recover the angles exactly.
    """
    if iso.d != angles.d:
        raise DimensionError(f"Isometry dimension {iso.d} does not match d={angles.d}")
    rng = np.random.default_rng(seed)
    n_types, d = angles.n_types, angles.d
    if f is None:
        f = np.full(n_types, 1.0 / n_types)
    if principal_rewards is None:
        principal_rewards = rng.uniform(-bound, bound, size=(n_types, d))
    v = bound * iso.inverse(angles.directions())
    return ProblemInstance(
        f=np.asarray(f, dtype=float),
        U=np.asarray(principal_rewards, dtype=float).reshape(n_types, d, 1, 1),
        V=v.reshape(n_types, d, 1, 1),
        F=np.ones((n_types, d, 1, 1)),
        gamma=gamma,
        B=bound,
        seed=seed,
    )


SEPARATION_LEVELS: tuple[float, ...] = (0.15, 0.40, 0.65, 0.90)


def _min_tail_inner_product(values: np.ndarray) -> float:
    n_types, k = values.shape
    d = k + 2
    lowest = math.inf
    for i in range(1, k):
        vectors = spherical_embed(
            np.concatenate([np.full((n_types, i), HALF_PI), values[:, i:]], axis=1)
        )
        gram = vectors @ vectors.T
        off = gram[~np.eye(n_types, dtype=bool)]
        if off.size:
            lowest = min(lowest, float(off.min()))
    return lowest


def separated_angles(
    n_types: int,
    d: int,
    rng: np.random.Generator,
    jitter: float = 0.02,
    max_spread: float = 0.9,
) -> RewardAngles:
    """
    Draw a well-separated reward angle set.

    Interior coordinates sit at distinct distances from pi/2 (levels spaced
    by at least 0.21) on random sides; last coordinates lie on an arc of at
    most ``max_spread`` with spacing at least min(0.3, spread / (n - 1)).
    Every pair of partial tails has a positive inner product.
    """
    if d < 3:
        raise DimensionError(f"Reward angles need d >= 3, got {d}")
    levels = list(SEPARATION_LEVELS)
    if n_types > len(levels):
        levels = list(np.linspace(0.15, 1.3, n_types))
    for _ in range(100):
        values = np.zeros((n_types, d - 2))
        for j in range(d - 3):
            distances = rng.permutation(levels[:n_types]) + rng.uniform(-jitter, jitter, n_types)
            sides = rng.choice([-1.0, 1.0], size=n_types)
            values[:, j] = HALF_PI + sides * distances
        spacing = min(0.3, max_spread / max(n_types - 1, 1))
        slack = max(0.0, max_spread - spacing * (n_types - 1))
        gaps = spacing + rng.uniform(0.0, slack / max(n_types - 1, 1), max(n_types - 1, 0))
        offsets = np.concatenate([[0.0], np.cumsum(gaps)])
        base = rng.uniform(0.0, 2.0 * math.pi)
        values[:, -1] = np.mod(base + rng.permutation(offsets), 2.0 * math.pi)
        angles = RewardAngles(values)
        if not angle_condition_violations(angles) and _min_tail_inner_product(values) > 0.05:
            return angles
    raise AssumptionViolationError("Could not draw a separated angle set", ["separation"])
