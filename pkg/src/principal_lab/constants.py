"""
Constants for principal-lab configuration
"""

import math


class LabConstants:
    """
    Default values, tolerances and caps used across the laboratory.

    Every tunable that an experiment config does not override falls back to
    one of these.
    """

    # Geometry
    INRADIUS_FACTOR: float = 0.9
    UNIT_TOLERANCE: float = 1e-9
    ISOMETRY_TOLERANCE: float = 1e-12
    SIMPLEX_TOLERANCE: float = 1e-12
    ANGLE_RANGE_TOLERANCE: float = 1e-9
    TWO_PI: float = 2.0 * math.pi

    # Model
    TIE_TOLERANCE: float = 1e-12
    MAX_INSTANCE_RETRIES: int = 50
    MAX_ROTATION_RETRIES: int = 20
    MIN_TYPE_PROBABILITY: float = 0.05
    DEFAULT_BOUND: float = 1.0
    DEFAULT_GAMMA: float = 0.5
    GAP_CAP: float = 0.1

    # Agent
    REPORT_TIE_TOLERANCE: float = 1e-12

    # Linear programming
    PIVOT_TOLERANCE: float = 1e-10
    FEASIBILITY_TOLERANCE: float = 1e-8
    VERTEX_DEDUP_TOLERANCE: float = 1e-9
    MAX_VERTEX_DIMENSION: int = 12
    VERTEX_BATCH_SIZE: int = 20_000
    MAX_SIMPLEX_ITERATIONS: int = 5_000
    DEFAULT_MARGIN: float = 1e-6

    # Estimation
    MAX_T_SEC: int = 10_000
    DEFAULT_FAIL_PROB: float = 0.01
    DEFAULT_EPS_TARGET: float = 1e-4
    DEFAULT_F_MIN_HINT: float = 0.1
    DEFAULT_BANDIT_F_MIN: float = 0.2
    BOUNDARY_TOLERANCE: float = 1e-12
    MIN_MENU_ROWS: int = 3
    MIN_GRID_INTERVALS: int = 24
    MIN_BRACKET: float = 1e-12

    # Bandit
    DEFAULT_LAMBDA: float = 1.0
    DEFAULT_DELTA: float = 0.1
    NOISE_FACTOR: float = 4.0

    # Harness
    DEFAULT_BASE_SEED: int = 42
    REFERENCE_SEED: int = 42
    DEFAULT_HORIZONS: tuple[int, ...] = tuple(2**k for k in range(10, 17))
    DEFAULT_REPLICATIONS: int = 20
    DEFAULT_OUTPUT_DIR: str = "results"
