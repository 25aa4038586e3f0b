"""
Simulated agents whose reports and actions stay within the slack a
discounting agent can afford under a given delay.
"""

import logging
import math
from collections.abc import Mapping
from dataclasses import dataclass, field
from enum import Enum, auto

import numpy as np

from .constants import LabConstants
from .exceptions import ConfigError
from .model import Mechanism, ProblemInstance, RewardProfile

logger = logging.getLogger(__name__)


class AgentKind(Enum):
    EXACT_MYOPIC = auto()
    SLACK_ADVERSARIAL = auto()
    SCRIPTED = auto()

    @classmethod
    def from_name(cls, name: str) -> "AgentKind":
        key = name.strip().upper().replace("-", "_")
        aliases = {"MYOPIC": "EXACT_MYOPIC", "ADVERSARIAL": "SLACK_ADVERSARIAL"}
        key = aliases.get(key, key)
        try:
            return cls[key]
        except KeyError as e:
            raise ConfigError(
                f"Unknown agent kind '{name}', expected one of {[k.name.lower() for k in cls]}"
            ) from e


@dataclass(frozen=True)
class AgentModel:
    """
    Agent behavior within the delay slack.

    Attributes:
        kind (AgentKind): Behavior family
        slack_scale (float): Multiplier on the delay slack, 1.0 is the exact envelope
        script (Mapping[int, int]): Scripted reports keyed by round, SCRIPTED only
    """

    kind: AgentKind = AgentKind.EXACT_MYOPIC
    slack_scale: float = 1.0
    script: Mapping[int, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.slack_scale < 0:
            raise ConfigError(f"slack_scale must be non-negative, got {self.slack_scale}")

    @property
    def is_myopic(self) -> bool:
        return self.kind is AgentKind.EXACT_MYOPIC or self.slack_scale == 0.0

    def report_slack(self, profile: RewardProfile, gamma: float, delay: float) -> float:
        """Normalized report slack C0 * gamma^delay / (1 - gamma)."""
        if self.is_myopic or math.isinf(delay):
            return 0.0
        return self.slack_scale * profile.C0 * gamma**delay / (1.0 - gamma)

    def action_slack(self, inst: ProblemInstance, delay: float) -> float:
        """Unnormalized action slack 2B * gamma^delay / (1 - gamma)."""
        if self.is_myopic or math.isinf(delay):
            return 0.0
        return self.slack_scale * 2.0 * inst.B * inst.gamma**delay / (1.0 - inst.gamma)

    def report_slacks(self, profile: RewardProfile, gamma: float, delays: np.ndarray) -> np.ndarray:
        delays = np.asarray(delays, dtype=float)
        if self.is_myopic:
            return np.zeros(delays.shape)
        with np.errstate(under="ignore"):
            return self.slack_scale * profile.C0 * np.power(gamma, delays) / (1.0 - gamma)

    def action_slacks(self, inst: ProblemInstance, delays: np.ndarray) -> np.ndarray:
        delays = np.asarray(delays, dtype=float)
        if self.is_myopic:
            return np.zeros(delays.shape)
        with np.errstate(under="ignore"):
            return (
                self.slack_scale * 2.0 * inst.B * np.power(inst.gamma, delays) / (1.0 - inst.gamma)
            )


def myopic_reports(profile: RewardProfile, mech: Mechanism) -> np.ndarray:
    """
    Myopic report of every type.

    Ties within tolerance go to the row the principal values most, then to
    the lowest index.
    """
    values = profile.v_bar @ mech.T
    principal = profile.u @ mech.T
    best = values.max(axis=1, keepdims=True)
    tied = values >= best - LabConstants.REPORT_TIE_TOLERANCE
    return np.argmax(np.where(tied, principal, -np.inf), axis=1)


def report_type(
    model: AgentModel,
    profile: RewardProfile,
    mech: Mechanism,
    theta: int,
    slack: float,
    rng: np.random.Generator | None = None,
    t: int | None = None,
) -> int:
    """
    Reported row for one round.

    Args:
        model (AgentModel): Agent behavior
        profile (RewardProfile): Reward vectors of the instance
        mech (Mechanism): Deployed menu, one row per possible report
        theta (int): True type
        slack (float): Normalized value the agent may give up
        rng (np.random.Generator | None): Unused by the deterministic agents
        t (int | None): Round index, used by scripted agents

    Returns:
        int: Reported row index
    """
    return int(
        report_types(
            model,
            profile,
            mech,
            np.array([theta]),
            np.array([slack], dtype=float),
            None if t is None else np.array([t]),
        )[0]
    )


def report_types(
    model: AgentModel,
    profile: RewardProfile,
    mech: Mechanism,
    thetas: np.ndarray,
    slacks: np.ndarray,
    rounds: np.ndarray | None = None,
) -> np.ndarray:
    """Vectorized :func:`report_type` over rounds sharing one mechanism."""
    thetas = np.asarray(thetas, dtype=int)
    myopic = myopic_reports(profile, mech)[thetas]
    if model.is_myopic:
        return myopic

    slacks = np.broadcast_to(np.asarray(slacks, dtype=float), thetas.shape)
    values = (profile.v_bar @ mech.T)[thetas]
    best = values.max(axis=1)
    eligible = values >= (best - slacks)[:, None]

    if model.kind is AgentKind.SLACK_ADVERSARIAL:
        principal = (profile.u @ mech.T)[thetas]
        deviation = np.argmin(np.where(eligible, principal, np.inf), axis=1)
        return np.where(slacks > 0.0, deviation, myopic)

    reports = myopic.copy()
    if rounds is None or not model.script:
        return reports
    for k, t in enumerate(np.asarray(rounds, dtype=int)):
        scripted = model.script.get(int(t))
        if scripted is None:
            continue
        if 0 <= scripted < mech.shape[0] and eligible[k, scripted]:
            reports[k] = scripted
        else:
            logger.debug(f"Scripted report {scripted} at round {t} exceeds the slack")
    return reports


def myopic_actions(inst: ProblemInstance) -> np.ndarray:
    """Best response for every (type, action)."""
    return np.argmax(inst.expected_V, axis=-1)


def respond_action(
    model: AgentModel,
    inst: ProblemInstance,
    theta: int,
    x: int,
    slack: float,
    rng: np.random.Generator | None = None,
) -> int:
    """
    Agent action after seeing principal action x.

    Args:
        slack (float): Unnormalized value the agent may give up

    Returns:
        int: Agent action index
    """
    return int(
        respond_actions(model, inst, np.array([theta]), np.array([x]), np.array([slack]))[0]
    )


def respond_actions(
    model: AgentModel,
    inst: ProblemInstance,
    thetas: np.ndarray,
    xs: np.ndarray,
    slacks: np.ndarray,
) -> np.ndarray:
    """Vectorized :func:`respond_action`; scripted agents act myopically here."""
    thetas = np.asarray(thetas, dtype=int)
    xs = np.asarray(xs, dtype=int)
    best = myopic_actions(inst)[thetas, xs]
    if model.kind is not AgentKind.SLACK_ADVERSARIAL or model.is_myopic:
        return best
    slacks = np.broadcast_to(np.asarray(slacks, dtype=float), thetas.shape)
    values = inst.expected_V[thetas, xs]
    top = np.take_along_axis(values, best[:, None], axis=1)[:, 0]
    eligible = values >= (top - slacks)[:, None]
    principal = inst.expected_U[thetas, xs]
    deviation = np.argmin(np.where(eligible, principal, np.inf), axis=1)
    return np.where(slacks > 0.0, deviation, best)


def report_table(
    model: AgentModel, profile: RewardProfile, mech: Mechanism, slack: float
) -> np.ndarray:
    """Report of every type at one slack level."""
    thetas = np.arange(profile.n_types)
    return report_types(model, profile, mech, thetas, np.full(thetas.shape, slack))


def action_table(model: AgentModel, inst: ProblemInstance, slack: float) -> np.ndarray:
    """Action of every (type, principal action) at one slack level."""
    thetas, xs = np.meshgrid(np.arange(inst.n_types), np.arange(inst.n_actions), indexing="ij")
    return respond_actions(
        model, inst, thetas.ravel(), xs.ravel(), np.full(thetas.size, slack)
    ).reshape(thetas.shape)
