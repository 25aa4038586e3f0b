"""
Angle arithmetic, spherical coordinates and the random isometry between the
zero-sum hyperplane of R^d and R^(d-1).
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .constants import LabConstants
from .exceptions import DimensionError, DomainError, SimplexViolationError

logger = logging.getLogger(__name__)

HALF_PI: float = 0.5 * math.pi


def wrap(alpha: float, m: float = LabConstants.TWO_PI) -> float:
    """
    Reduce an angle modulo m into [0, m).

    Args:
        alpha (float): Angle in radians
        m (float): Period, must be positive

    Raises:
        DomainError: If alpha is not finite or m is not positive

    Returns:
        float: alpha + k*m for the unique integer k placing it in [0, m)
    """
    if not math.isfinite(alpha) or not math.isfinite(m):
        logger.error(f"wrap received non-finite input alpha={alpha}, m={m}")
        raise DomainError(f"wrap needs finite inputs, got alpha={alpha}, m={m}")
    if m <= 0:
        logger.error(f"wrap received non-positive modulus {m}")
        raise DomainError(f"wrap needs a positive modulus, got {m}")
    reduced = alpha % m
    # float modulo of a tiny negative can land exactly on m
    if reduced >= m:
        reduced = 0.0
    return float(reduced)


def arc(alpha: float, beta: float) -> float:
    """Arc length between two angles on the unit circle, in [0, pi]."""
    return min(wrap(beta - alpha), wrap(alpha - beta))


def spherical_embed(angles: np.ndarray | list[float], check_range: bool = True) -> np.ndarray:
    """
    Map spherical coordinates to a unit vector.

    Coordinate j is the product of sines of the earlier angles times the cosine
    of angle j; the final coordinate is the product of all sines. Works on the
    last axis, so a stack of angle vectors maps to a stack of unit vectors.

    Args:
        angles (np.ndarray | list[float]): Angle vector(s) of length k >= 1
        check_range (bool): Require the chart ranges, [0, pi] for the first
            k-1 angles and [0, 2pi) for the last

    Raises:
        DimensionError: If the angle vector is empty
        DomainError: If an angle is not finite, or out of range under check_range

    Returns:
        np.ndarray: Unit vector(s) of length k + 1
    """
    angles = np.asarray(angles, dtype=float)
    if angles.ndim == 0 or angles.shape[-1] < 1:
        logger.error(f"spherical_embed needs at least one angle, got shape {angles.shape}")
        raise DimensionError("spherical_embed needs at least one angle")
    if not np.all(np.isfinite(angles)):
        raise DomainError("spherical_embed received a non-finite angle")
    if check_range:
        tol = LabConstants.ANGLE_RANGE_TOLERANCE
        interior, last = angles[..., :-1], angles[..., -1]
        if np.any(interior < -tol) or np.any(interior > math.pi + tol):
            logger.error(f"spherical_embed interior angles outside [0, pi]: {interior.tolist()}")
            raise DomainError("spherical_embed needs interior angles in [0, pi]")
        if np.any(last < -tol) or np.any(last >= LabConstants.TWO_PI + tol):
            logger.error(f"spherical_embed last angle outside [0, 2pi): {last.tolist()}")
            raise DomainError("spherical_embed needs the last angle in [0, 2pi)")

    sines = np.sin(angles)
    ones = np.ones(angles.shape[:-1] + (1,))
    prefix = np.concatenate([ones, np.cumprod(sines, axis=-1)], axis=-1)
    out = prefix.copy()
    out[..., :-1] *= np.cos(angles)
    return out


def xi(i: int, tail: np.ndarray | list[float], d: int) -> np.ndarray:
    """
    Unit vector with the first i-1 angles pinned at pi/2.

    The tail is not range-checked: queries step past the edges of the chart.

    Args:
        i (int): 1-based coordinate index, 1 <= i <= d-2
        tail (np.ndarray | list[float]): Angles for coordinates i..d-2
        d (int): Number of principal actions

    Raises:
        DimensionError: If i is out of range or the tail has the wrong length

    Returns:
        np.ndarray: Unit vector in R^(d-1)
    """
    tail = np.asarray(tail, dtype=float)
    if not 1 <= i <= d - 2:
        logger.error(f"xi index {i} out of range for d={d}")
        raise DimensionError(f"xi index must be in [1, {d - 2}], got {i}")
    if tail.shape[-1] != d - 1 - i:
        raise DimensionError(
            f"xi tail for i={i}, d={d} must have {d - 1 - i} angles, got {tail.shape[-1]}"
        )
    pad = np.full(tail.shape[:-1] + (i - 1,), HALF_PI)
    return spherical_embed(np.concatenate([pad, tail], axis=-1), check_range=False)


def inverse_embed(v: np.ndarray | list[float]) -> np.ndarray:
    """
    Spherical coordinates of a unit vector.

    Interior angles come from arccos of the clamped ratio against the
    remaining norm; the last angle uses atan2 and lies in [0, 2pi). A
    vanishing remainder (a pole) gives angle 0.

    Raises:
        DimensionError: If v has fewer than two entries
        DomainError: If v is not a unit vector within tolerance

    Returns:
        np.ndarray: Angle vector of length len(v) - 1
    """
    v = np.asarray(v, dtype=float)
    if v.ndim != 1 or v.size < 2:
        raise DimensionError(f"inverse_embed needs a vector of length >= 2, got {v.shape}")
    norm = float(np.linalg.norm(v))
    if abs(norm - 1.0) > LabConstants.UNIT_TOLERANCE:
        logger.error(f"inverse_embed received a vector of norm {norm}")
        raise DomainError(f"inverse_embed needs a unit vector, got norm {norm}")

    k = v.size - 1
    angles = np.zeros(k)
    # remaining[j] = ||v[j:]||
    remaining = np.sqrt(np.cumsum((v**2)[::-1])[::-1])
    for j in range(k - 1):
        if remaining[j] <= 0.0:
            angles[j] = 0.0
            continue
        angles[j] = math.acos(min(1.0, max(-1.0, v[j] / remaining[j])))
    if remaining[k - 1] > 0.0:
        angles[k - 1] = wrap(math.atan2(v[k], v[k - 1]))
    return angles


def inradius(d: int) -> float:
    """Radius of the ball around the barycenter kept inside the simplex."""
    if d < 2:
        raise DomainError(f"inradius needs d >= 2, got {d}")
    return LabConstants.INRADIUS_FACTOR / math.sqrt(d * (d - 1))


def _householder_base(d: int) -> np.ndarray:
    """Rows 2..d of the reflection swapping e_1 and 1/sqrt(d)."""
    u = np.full(d, 1.0 / math.sqrt(d))
    w = np.zeros(d)
    w[0] = 1.0
    w -= u
    w /= np.linalg.norm(w)
    reflection = np.eye(d) - 2.0 * np.outer(w, w)
    return reflection[:, 1:].T.copy()


@dataclass(frozen=True, eq=False)
class Isometry:
    """
    Linear isometry from the zero-sum hyperplane of R^d onto R^(d-1).

    Attributes:
        matrix (np.ndarray): (d-1) x d matrix with orthonormal rows orthogonal to 1_d
        seed (int | None): Seed the rotation was drawn from
    """

    matrix: np.ndarray
    seed: int | None = None
    d: int = field(init=False)

    def __post_init__(self) -> None:
        matrix = np.asarray(self.matrix, dtype=float)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1] - 1:
            raise DimensionError(f"Isometry matrix must be (d-1) x d, got {matrix.shape}")
        d = matrix.shape[1]
        tol = LabConstants.ISOMETRY_TOLERANCE * 100
        if np.max(np.abs(matrix @ np.ones(d))) > tol:
            raise DomainError("Isometry rows must be orthogonal to the all-ones vector")
        if np.max(np.abs(matrix @ matrix.T - np.eye(d - 1))) > tol:
            raise DomainError("Isometry rows must be orthonormal")
        matrix.setflags(write=False)
        object.__setattr__(self, "matrix", matrix)
        object.__setattr__(self, "d", d)

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Map hyperplane vector(s) of length d to R^(d-1)."""
        return np.asarray(x, dtype=float) @ self.matrix.T

    def inverse(self, y: np.ndarray) -> np.ndarray:
        """Map vector(s) of R^(d-1) back into the zero-sum hyperplane."""
        return np.asarray(y, dtype=float) @ self.matrix

    def to_dict(self) -> dict[str, Any]:
        return {
            "d": self.d,
            "seed": self.seed,
            "matrix": self.matrix.ravel().tolist(),
        }

    @classmethod
    def from_dict(cls, payload: dict[str, Any]) -> "Isometry":
        d = int(payload["d"])
        matrix = np.asarray(payload["matrix"], dtype=float).reshape(d - 1, d)
        return cls(matrix=matrix, seed=payload.get("seed"))


def make_isometry(d: int, seed: int) -> Isometry:
    """
    Draw a seed-deterministic isometry.

    A fixed Householder completion is composed with a uniform random rotation
    obtained from the QR factorization of a standard normal matrix with the
    signs of R's diagonal folded into Q.

    Args:
        d (int): Number of principal actions, at least 2
        seed (int): Seed for the rotation

    Raises:
        DomainError: If d < 2

    Returns:
        Isometry: The composed isometry
    """
    if d < 2:
        logger.error(f"make_isometry called with d={d}")
        raise DomainError(f"make_isometry needs d >= 2, got {d}")
    rng = np.random.default_rng(seed)
    gaussian = rng.standard_normal((d - 1, d - 1))
    q, r = np.linalg.qr(gaussian)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    rotation = q * signs
    return Isometry(matrix=rotation @ _householder_base(d), seed=seed)


def embed_points(directions: np.ndarray, radius: float, iso: Isometry) -> np.ndarray:
    """
    Rows 1_d/d + radius * iso^-1(w) for each direction w.

    Args:
        directions (np.ndarray): (m, d-1) directions, each of norm at most one
        radius (float): Embedding radius
        iso (Isometry): The isometry

    Raises:
        SimplexViolationError: If some row leaves the simplex

    Returns:
        np.ndarray: (m, d) row-stochastic matrix
    """
    directions = np.atleast_2d(np.asarray(directions, dtype=float))
    rows = 1.0 / iso.d + radius * iso.inverse(directions)
    low = float(rows.min())
    if low < -LabConstants.SIMPLEX_TOLERANCE:
        logger.error(f"Embedded point leaves the simplex (min entry {low}, radius {radius})")
        raise SimplexViolationError(
            f"Embedded point leaves the simplex: min entry {low} at radius {radius}"
        )
    return np.clip(rows, 0.0, None)


def embed_point(direction: np.ndarray, radius: float, iso: Isometry) -> np.ndarray:
    """Single-row form of :func:`embed_points`."""
    return embed_points(direction, radius, iso)[0]


def x_of_angle(alpha: float, r_d: float, iso: Isometry) -> np.ndarray:
    """Principal action distribution whose image points at angle alpha in the last plane."""
    direction = np.zeros(iso.d - 1)
    direction[-2] = math.cos(alpha)
    direction[-1] = math.sin(alpha)
    return embed_point(direction, r_d, iso)
