"""
Linear programming over mechanisms.

A dense two-phase tableau simplex with Bland's rule solves every program
here; problem sizes stay at desk scale. ``backend="highs"`` solves the same
program with SciPy for cross-checking.
"""

import itertools
import logging
import math
from dataclasses import dataclass
from enum import Enum, auto
from typing import TYPE_CHECKING, Any

import numpy as np
from scipy.optimize import linprog

from .constants import LabConstants
from .exceptions import (
    CapacityError,
    DimensionError,
    LpInfeasibleError,
    LpSolverError,
    LpUnboundedError,
)
from .geometry import Isometry, spherical_embed
from .model import Mechanism, RewardAngles

if TYPE_CHECKING:
    from .bandit import ConfidenceEllipsoid

logger = logging.getLogger(__name__)

SQRT2: float = math.sqrt(2.0)


class LpStatus(Enum):
    OPTIMAL = auto()
    INFEASIBLE = auto()
    UNBOUNDED = auto()


@dataclass(frozen=True, eq=False)
class LinearProgram:
    """
    maximize c.x  subject to  A_ub x <= b_ub,  A_eq x = b_eq,  x >= 0
    """

    c: np.ndarray
    A_ub: np.ndarray
    b_ub: np.ndarray
    A_eq: np.ndarray
    b_eq: np.ndarray

    def __post_init__(self) -> None:
        n = np.asarray(self.c).size
        for name in ("A_ub", "A_eq"):
            matrix = np.asarray(getattr(self, name), dtype=float).reshape(-1, n)
            object.__setattr__(self, name, matrix)
        for name in ("c", "b_ub", "b_eq"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).ravel())
        if self.A_ub.shape[0] != self.b_ub.size or self.A_eq.shape[0] != self.b_eq.size:
            raise DimensionError("Constraint matrices and right-hand sides disagree")

    @property
    def n_vars(self) -> int:
        return int(self.c.size)

    def objective(self, x: np.ndarray) -> float:
        return float(self.c @ x)

    def is_feasible(self, x: np.ndarray, tol: float = LabConstants.FEASIBILITY_TOLERANCE) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(
            np.all(x >= -tol)
            and np.all(self.A_ub @ x <= self.b_ub + tol)
            and np.all(np.abs(self.A_eq @ x - self.b_eq) <= tol)
        )

    def dual(self) -> "LinearProgram":
        """
        Dual program in the same maximization form.

        The dual min b_ub.y + b_eq.z over A_ub^T y + A_eq^T z >= c, y >= 0,
        with z split into positive and negative parts, is written as a
        maximization of the negated objective. Its optimal value is therefore
        minus the dual optimum.
        """
        n_ub, n_eq = self.b_ub.size, self.b_eq.size
        c = np.concatenate([-self.b_ub, -self.b_eq, self.b_eq])
        A_ub = -np.hstack([self.A_ub.T, self.A_eq.T, -self.A_eq.T]).reshape(self.n_vars, n_ub + 2 * n_eq)
        return LinearProgram(
            c=c,
            A_ub=A_ub,
            b_ub=-self.c,
            A_eq=np.zeros((0, c.size)),
            b_eq=np.zeros(0),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "c": self.c.tolist(),
            "A_ub": self.A_ub.tolist(),
            "b_ub": self.b_ub.tolist(),
            "A_eq": self.A_eq.tolist(),
            "b_eq": self.b_eq.tolist(),
        }


@dataclass(frozen=True, eq=False)
class LpSolution:
    """
    Outcome of a solve. ``x`` and ``mechanism`` are None unless optimal.
    """

    status: LpStatus
    value: float
    x: np.ndarray | None = None
    mechanism: Mechanism | None = None

    @property
    def optimal(self) -> bool:
        return self.status is LpStatus.OPTIMAL

    def require_optimal(self, what: str = "program") -> "LpSolution":
        """
        Raises:
            LpInfeasibleError: If the program has no feasible point
            LpUnboundedError: If the objective is unbounded
        """
        match self.status:
            case LpStatus.INFEASIBLE:
                logger.error(f"{what} is infeasible")
                raise LpInfeasibleError(f"{what} has no feasible point")
            case LpStatus.UNBOUNDED:
                logger.error(f"{what} is unbounded")
                raise LpUnboundedError(f"{what} is unbounded")
        return self

    def to_dict(self) -> dict[str, Any]:
        return {
            "status": self.status.name.lower(),
            "value": self.value,
            "mechanism": None if self.mechanism is None else self.mechanism.tolist(),
        }


def _pivot(tableau: np.ndarray, basis: list[int], row: int, col: int) -> None:
    """Pivot in place on tableau[row, col]; the objective is the last row."""
    tableau[row] /= tableau[row, col]
    column = tableau[:, col].copy()
    column[row] = 0.0
    tableau -= np.outer(column, tableau[row])
    basis[row] = col


def _choose_pivot_column(objective_row: np.ndarray, allowed: int, tol: float) -> int | None:
    """Bland's rule: lowest-index column with a negative reduced cost."""
    candidates = np.flatnonzero(objective_row[:allowed] < -tol)
    return int(candidates[0]) if candidates.size else None


def _choose_pivot_row(
    tableau: np.ndarray, basis: list[int], col: int, tol: float
) -> int | None:
    """Minimum ratio test; ties go to the lowest basic index."""
    column = tableau[:-1, col]
    rows = np.flatnonzero(column > tol)
    if rows.size == 0:
        return None
    ratios = tableau[rows, -1] / column[rows]
    best = ratios.min()
    tied = rows[ratios <= best + tol * max(1.0, abs(best))]
    return int(min(tied, key=lambda r: basis[r]))


def _simplex_iterations(
    tableau: np.ndarray, basis: list[int], allowed: int, tol: float
) -> LpStatus:
    for _ in range(LabConstants.MAX_SIMPLEX_ITERATIONS):
        col = _choose_pivot_column(tableau[-1], allowed, tol)
        if col is None:
            return LpStatus.OPTIMAL
        row = _choose_pivot_row(tableau, basis, col, tol)
        if row is None:
            return LpStatus.UNBOUNDED
        _pivot(tableau, basis, row, col)
    logger.error("Simplex iteration cap reached")
    raise LpSolverError("Simplex did not terminate within the iteration cap")


def _simplex(program: LinearProgram, tol: float = LabConstants.PIVOT_TOLERANCE) -> LpSolution:
    """
    Two-phase tableau simplex.

    Every row gets an artificial variable after its right-hand side is made
    non-negative. Phase one minimizes their sum; artificials left in the basis
    at level zero are pivoted out, or their rows dropped when redundant.
    """
    n = program.n_vars
    n_ub, n_eq = program.b_ub.size, program.b_eq.size
    m = n_ub + n_eq
    A = np.zeros((m, n + n_ub))
    A[:n_ub, :n] = program.A_ub
    A[:n_ub, n:] = np.eye(n_ub)
    A[n_ub:, :n] = program.A_eq
    b = np.concatenate([program.b_ub, program.b_eq])
    negative = b < 0
    A[negative] *= -1.0
    b = np.abs(b)

    width = n + n_ub
    tableau = np.zeros((m + 1, width + m + 1))
    tableau[:m, :width] = A
    tableau[:m, width : width + m] = np.eye(m)
    tableau[:m, -1] = b
    tableau[-1, :width] = -A.sum(axis=0)
    tableau[-1, -1] = -b.sum()
    basis = list(range(width, width + m))

    _simplex_iterations(tableau, basis, width, tol)
    if tableau[-1, -1] < -LabConstants.FEASIBILITY_TOLERANCE:
        logger.debug(f"Phase one ended with infeasibility {-tableau[-1, -1]:.3e}")
        return LpSolution(status=LpStatus.INFEASIBLE, value=math.nan)

    keep = []
    for row in range(m):
        if basis[row] < width:
            keep.append(row)
            continue
        candidates = np.flatnonzero(np.abs(tableau[row, :width]) > tol)
        if candidates.size:
            _pivot(tableau, basis, row, int(candidates[0]))
            keep.append(row)
    tableau = np.vstack([tableau[keep][:, list(range(width)) + [-1]], np.zeros(width + 1)])
    basis = [basis[row] for row in keep]

    tableau[-1, :n] = -program.c
    for row, col in enumerate(basis):
        if tableau[-1, col] != 0.0:
            tableau[-1] -= tableau[-1, col] * tableau[row]

    status = _simplex_iterations(tableau, basis, width, tol)
    if status is LpStatus.UNBOUNDED:
        return LpSolution(status=status, value=math.inf)
    solution = np.zeros(width)
    for row, col in enumerate(basis):
        solution[col] = tableau[row, -1]
    x = np.clip(solution[:n], 0.0, None)
    return LpSolution(status=LpStatus.OPTIMAL, value=float(program.c @ x), x=x)


def _highs(program: LinearProgram) -> LpSolution:
    result = linprog(
        -program.c,
        A_ub=program.A_ub if program.b_ub.size else None,
        b_ub=program.b_ub if program.b_ub.size else None,
        A_eq=program.A_eq if program.b_eq.size else None,
        b_eq=program.b_eq if program.b_eq.size else None,
        bounds=(0, None),
        method="highs",
    )
    match result.status:
        case 0:
            return LpSolution(status=LpStatus.OPTIMAL, value=float(-result.fun), x=np.asarray(result.x))
        case 2:
            return LpSolution(status=LpStatus.INFEASIBLE, value=math.nan)
        case 3:
            return LpSolution(status=LpStatus.UNBOUNDED, value=math.inf)
        case 1:
            logger.error(f"HiGHS hit its iteration limit: {result.message}")
            raise LpSolverError(f"HiGHS iteration limit: {result.message}")
        case _:
            logger.error(f"HiGHS returned status {result.status}: {result.message}")
            raise LpSolverError(f"HiGHS failed with status {result.status}: {result.message}")


def solve_program(program: LinearProgram, backend: str = "simplex") -> LpSolution:
    """
    Solve a program with the in-house simplex or with SciPy's HiGHS.

    Raises:
        ValueError: If the backend is unknown
    """
    match backend:
        case "simplex":
            return _simplex(program)
        case "highs":
            return _highs(program)
        case _:
            raise ValueError(f"Unknown LP backend '{backend}'")


def dual_value(program: LinearProgram, backend: str = "simplex") -> float:
    """Optimal value of the dual of ``program``."""
    solution = solve_program(program.dual(), backend)
    if not solution.optimal:
        return math.nan
    return -solution.value


def _ic_rows(rows: np.ndarray) -> np.ndarray:
    """Rows of <v_s, Pi_s' - Pi_s> for every ordered pair s != s'."""
    n_types, d = rows.shape
    constraints = []
    for s, s_prime in itertools.permutations(range(n_types), 2):
        line = np.zeros((n_types, d))
        line[s_prime] += rows[s]
        line[s] -= rows[s]
        constraints.append(line.ravel())
    return np.array(constraints).reshape(-1, n_types * d)


def _simplex_rows(n_types: int, d: int) -> np.ndarray:
    return np.kron(np.eye(n_types), np.ones((1, d)))


def ic_program(f: np.ndarray, u: np.ndarray, v_bar: np.ndarray, margin: float = 0.0) -> LinearProgram:
    """Incentive-compatible program over vec(Pi), row-major."""
    f = np.asarray(f, dtype=float)
    u = np.asarray(u, dtype=float)
    v_bar = np.asarray(v_bar, dtype=float)
    n_types, d = u.shape
    A_ub = _ic_rows(v_bar)
    return LinearProgram(
        c=(f[:, None] * u).ravel(),
        A_ub=A_ub,
        b_ub=np.full(A_ub.shape[0], -margin),
        A_eq=_simplex_rows(n_types, d),
        b_eq=np.ones(n_types),
    )


def solve_lp_star(
    f: np.ndarray,
    u: np.ndarray,
    v_bar: np.ndarray,
    margin: float = 0.0,
    backend: str = "simplex",
) -> LpSolution:
    """
    Best incentive-compatible mechanism with a strict margin.

    Args:
        f (np.ndarray): Type distribution
        u (np.ndarray): Principal reward rows U(theta, x)
        v_bar (np.ndarray): Normalized agent reward rows
        margin (float): Required IC gap, at least zero

    Returns:
        LpSolution: Optimal or infeasible solution; the mechanism is |Theta| x d
    """
    if margin < 0:
        raise ValueError(f"margin must be non-negative, got {margin}")
    u = np.asarray(u, dtype=float)
    solution = solve_program(ic_program(f, u, v_bar, margin), backend)
    if not solution.optimal:
        logger.debug(f"LP* at margin {margin} is {solution.status.name.lower()}")
        return solution
    return LpSolution(
        status=solution.status,
        value=solution.value,
        x=solution.x,
        mechanism=solution.x.reshape(u.shape),
    )


def solve_opt_oracle(f: np.ndarray, u: np.ndarray, v: np.ndarray) -> float:
    """
    Principal's value when every reporting map may be induced.

    For each map r the program maximizes sum_theta f(theta)<Pi_r(theta), u_theta>
    subject to type theta weakly preferring row r(theta) under v; the answer
    is the best value over all maps.
    """
    f = np.asarray(f, dtype=float)
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    n_types, d = u.shape
    equalities = _simplex_rows(n_types, d)
    best = -math.inf
    for reporting in itertools.product(range(n_types), repeat=n_types):
        c = np.zeros((n_types, d))
        constraints = []
        for theta, s in enumerate(reporting):
            c[s] += f[theta] * u[theta]
            for s_prime in range(n_types):
                if s_prime == s:
                    continue
                line = np.zeros((n_types, d))
                line[s_prime] += v[theta]
                line[s] -= v[theta]
                constraints.append(line.ravel())
        A_ub = np.array(constraints).reshape(-1, n_types * d)
        program = LinearProgram(
            c=c.ravel(),
            A_ub=A_ub,
            b_ub=np.zeros(A_ub.shape[0]),
            A_eq=equalities,
            b_eq=np.ones(n_types),
        )
        solution = solve_program(program)
        if solution.optimal:
            best = max(best, solution.value)
    return best


@dataclass(frozen=True, eq=False)
class PessimisticPolytope:
    """
    Mechanisms with A vec(Pi) <= b inside the product of row simplices.

    Attributes:
        A_ub (np.ndarray): IC constraint rows over vec(Pi), row-major
        b_ub (np.ndarray): Right-hand sides, -(margin + sqrt(2) radius)
        n_types (int): Rows of the mechanism
        d (int): Principal actions
        margin (float): Required IC gap
        radius (float): Tightening radius on the reward directions
    """

    A_ub: np.ndarray
    b_ub: np.ndarray
    n_types: int
    d: int
    margin: float
    radius: float

    def __post_init__(self) -> None:
        if not (np.all(np.isfinite(self.A_ub)) and np.all(np.isfinite(self.b_ub))):
            raise ValueError("Polytope constraints must be finite")

    @property
    def n_vars(self) -> int:
        return self.n_types * self.d

    def program(self, c: np.ndarray) -> LinearProgram:
        return LinearProgram(
            c=np.asarray(c, dtype=float).ravel(),
            A_ub=self.A_ub,
            b_ub=self.b_ub,
            A_eq=_simplex_rows(self.n_types, self.d),
            b_eq=np.ones(self.n_types),
        )

    def contains(self, mech: Mechanism, tol: float = LabConstants.VERTEX_DEDUP_TOLERANCE) -> bool:
        x = np.asarray(mech, dtype=float).ravel()
        return self.program(np.zeros(self.n_vars)).is_feasible(x, tol)

    def is_empty(self) -> bool:
        return not solve_program(self.program(np.zeros(self.n_vars))).optimal

    def to_dict(self) -> dict[str, Any]:
        return {
            "n_types": self.n_types,
            "d": self.d,
            "margin": self.margin,
            "radius": self.radius,
            "A_ub": self.A_ub.tolist(),
            "b_ub": self.b_ub.tolist(),
        }


def ic_polytope(rows: np.ndarray, margin: float = 0.0, radius: float = 0.0) -> PessimisticPolytope:
    """
    Mechanisms where every label s prefers its own row under direction rows[s]
    by at least margin + sqrt(2) * radius.
    """
    if radius < 0:
        raise ValueError(f"radius must be non-negative, got {radius}")
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    n_types, d = rows.shape
    A_ub = _ic_rows(rows)
    return PessimisticPolytope(
        A_ub=A_ub,
        b_ub=np.full(A_ub.shape[0], -(margin + SQRT2 * radius)),
        n_types=n_types,
        d=d,
        margin=margin,
        radius=radius,
    )


def pessimistic_polytope(
    angle_estimates: RewardAngles, radius: float, margin: float, iso: Isometry
) -> PessimisticPolytope:
    """IC region of the estimated reward directions, tightened by the radius."""
    directions = iso.inverse(angle_estimates.directions())
    return ic_polytope(directions, margin=margin, radius=radius)


def single_simplex(d: int) -> PessimisticPolytope:
    """The unconstrained one-type polytope."""
    return ic_polytope(np.zeros((1, d)))


def enumerate_vertices(poly: PessimisticPolytope) -> list[Mechanism]:
    """
    All basic feasible points of the polytope.

    Every choice of n - |Theta| active inequalities (IC rows and
    non-negativity) that is of full rank together with the row sums is
    solved; feasible points are kept and deduplicated.

    Raises:
        CapacityError: If |Theta| * d exceeds the desk-scale cap

    Returns:
        list[Mechanism]: Vertices in lexicographic order of vec(Pi)
    """
    n = poly.n_vars
    if n > LabConstants.MAX_VERTEX_DIMENSION:
        logger.error(f"Vertex enumeration asked for {n} variables")
        raise CapacityError(
            f"Vertex enumeration supports at most {LabConstants.MAX_VERTEX_DIMENSION} variables, got {n}"
        )
    G = np.vstack([poly.A_ub.reshape(-1, n), -np.eye(n)])
    h = np.concatenate([poly.b_ub, np.zeros(n)])
    E = _simplex_rows(poly.n_types, poly.d)
    n_active = n - poly.n_types
    tol = LabConstants.VERTEX_DEDUP_TOLERANCE

    found = []
    combos = itertools.combinations(range(G.shape[0]), n_active)
    while True:
        chunk = np.array(list(itertools.islice(combos, LabConstants.VERTEX_BATCH_SIZE)), dtype=int)
        if chunk.size == 0:
            break
        chunk = chunk.reshape(-1, n_active)
        systems = np.concatenate([np.broadcast_to(E, (chunk.shape[0],) + E.shape), G[chunk]], axis=1)
        rhs = np.concatenate([np.ones((chunk.shape[0], poly.n_types)), h[chunk]], axis=1)
        regular = np.abs(np.linalg.det(systems)) > LabConstants.PIVOT_TOLERANCE
        if not regular.any():
            continue
        points = np.linalg.solve(systems[regular], rhs[regular][..., None])[..., 0]
        feasible = np.all(points @ G.T <= h + tol, axis=1)
        found.append(points[feasible])

    if not found or sum(block.shape[0] for block in found) == 0:
        return []
    points = np.vstack(found)
    points[np.abs(points) < tol] = 0.0
    unique = dedup_points(points, tol)
    logger.debug(f"Enumerated {unique.shape[0]} vertices over {n} variables")
    return [row.reshape(poly.n_types, poly.d) for row in unique]


def dedup_points(points: np.ndarray, tol: float = LabConstants.VERTEX_DEDUP_TOLERANCE) -> np.ndarray:
    """
    Points in lexicographic order with every point within ``tol`` (max-norm)
    of an earlier kept point dropped.
    """
    points = np.asarray(points, dtype=float)
    if points.shape[0] == 0:
        return points
    ordered = points[np.lexsort(points.T[::-1])]
    kept = [ordered[0]]
    for point in ordered[1:]:
        if np.min(np.max(np.abs(np.asarray(kept) - point), axis=1)) > tol:
            kept.append(point)
    return np.asarray(kept)


def score_vertices(vertices: list[Mechanism], ellipsoid: "ConfidenceEllipsoid") -> np.ndarray:
    """Optimistic value <beta_hat, x> + radius * ||x||_{Omega^-1} of each vertex."""
    X = np.array([np.asarray(v).ravel() for v in vertices])
    whitened = np.linalg.solve(ellipsoid.omega, X.T).T
    quad = np.maximum(np.sum(X * whitened, axis=1), 0.0)
    return X @ ellipsoid.beta_hat + ellipsoid.radius * np.sqrt(quad)


def solve_pess_opt(
    poly: PessimisticPolytope,
    ellipsoid: "ConfidenceEllipsoid",
    vertices: list[Mechanism] | None = None,
) -> tuple[Mechanism, float]:
    """
    Optimistic planning over the pessimistic polytope.

    The objective is convex in vec(Pi), so its maximum over the polytope sits
    at a vertex. Ties go to the first vertex.

    Raises:
        LpInfeasibleError: If the polytope is empty
    """
    if vertices is None:
        vertices = enumerate_vertices(poly)
    if not vertices:
        logger.error("Optimistic planning over an empty polytope")
        raise LpInfeasibleError("The pessimistic polytope is empty")
    scores = score_vertices(vertices, ellipsoid)
    best = int(np.argmax(scores))
    return vertices[best], float(scores[best])


def reward_directions(angles: RewardAngles, iso: Isometry) -> np.ndarray:
    """Hyperplane vectors iso^-1(rho(alpha^s))."""
    return iso.inverse(spherical_embed(angles.values))
