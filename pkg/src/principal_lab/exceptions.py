"""
Custom exceptions for principal-lab
"""


class PrincipalLabError(Exception):
    """
    Base exception for principal-lab errors.

    All principal-lab specific exceptions should inherit from this class.
    """

    pass


class DomainError(PrincipalLabError):
    """
    Error related to values outside an operation's domain.

    This exception is raised when:
    - An angle or modulus is not finite or not positive
    - A vector that must have unit norm does not
    - A dimension is too small for the requested construction
    """

    pass


class SimplexViolationError(DomainError):
    """
    Error raised when an embedded point leaves the probability simplex.

    This exception is raised when:
    - The embedding radius is too large for the dimension
    - A query direction has norm larger than one
    """

    pass


class DimensionError(PrincipalLabError):
    """
    Error related to shapes and indices.

    This exception is raised when:
    - A vector or tensor has the wrong length or shape
    - A coordinate, type or action index is out of range
    - An operation needs more types or actions than the instance has
    """

    pass


class AssumptionViolationError(PrincipalLabError):
    """
    Error raised when the model's regularity assumptions fail.

    This exception is raised when:
    - Two agent actions tie for the best response
    - An agent reward row is parallel to the all-ones vector
    - Two normalized reward rows coincide
    """

    def __init__(self, message: str, conditions: list[str] | None = None) -> None:
        super().__init__(message)
        self.conditions: list[str] = list(conditions or [])


class RotationRetry(AssumptionViolationError):
    """
    Signal that the sampled isometry puts some reward angle on a degenerate
    position and a new isometry should be drawn.

    This exception is raised when:
    - An interior angle equals 0, pi/2 or pi
    - Two types share a coordinate value
    - Two last-coordinate angles are antipodal
    """

    pass


class DegenerateInstanceError(PrincipalLabError):
    """
    Error raised when an angle gap is zero.

    This exception is raised when:
    - Two types share the distance of a coordinate to pi/2
    - A sine product vanishes
    """

    pass


class ProtocolViolationError(PrincipalLabError):
    """
    Error related to the information protocol between learner and environment.

    This exception is raised when:
    - A transcript record is read before its release round
    - A learner phase transition is not allowed
    """

    pass


class HorizonExhaustedError(PrincipalLabError):
    """
    Error raised when a deployment runs past the environment horizon.

    This exception is raised when:
    - A test or block needs more rounds than remain
    """

    pass


class CapacityError(PrincipalLabError):
    """
    Error raised when a desk-scale cap is exceeded.

    This exception is raised when:
    - Vertex enumeration is asked for more variables than the cap allows
    - A query menu has no room for the requested anchor rows
    """

    pass


class LpInfeasibleError(PrincipalLabError):
    """
    Error raised when a linear program has no feasible point.

    This exception is raised when:
    - An incentive-compatibility margin is too large
    - A pessimistic polytope is empty
    """

    pass


class LpUnboundedError(PrincipalLabError):
    """
    Error raised when a linear program is unbounded.

    This exception is raised when:
    - The objective grows without limit along a feasible ray
    """

    pass


class LpSolverError(PrincipalLabError):
    """
    Error raised when a solver stops without deciding the program.

    This exception is raised when:
    - The in-house simplex hits its iteration cap
    - HiGHS reports an iteration limit or a numerical failure
    """

    pass


class EstimationFailure(PrincipalLabError):
    """
    Error raised when an estimation stage cannot complete.

    This exception is raised when:
    - The last-coordinate search keeps a wrong number of sectors
    - An interval sweep runs out before every label is matched
    - Observed reports contradict every dispatch branch
    - The estimation runs past its round budget
    """

    def __init__(self, stage: str, message: str) -> None:
        super().__init__(f"[{stage}] {message}")
        self.stage: str = stage


class ConfigError(PrincipalLabError):
    """
    Error related to experiment or budget configuration.

    This exception is raised when:
    - A config file is missing fields or has invalid values
    - A horizon is too short for any block
    - An estimation budget has non-positive entries
    """

    pass
