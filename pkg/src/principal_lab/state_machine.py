"""
Learner phases and the transitions an environment accepts between them.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum, auto

from .exceptions import ProtocolViolationError

logger = logging.getLogger(__name__)


class LearnerPhase(Enum):
    IDLE = auto()
    ESTIMATION = auto()
    DUMMY = auto()
    PLANNING = auto()
    TAIL = auto()

    @property
    def tag(self) -> str:
        """Lower-case tag written to per-round outputs."""
        return self.name.lower()

    @classmethod
    def get_transitions(cls) -> dict["LearnerPhase", frozenset["LearnerPhase"]]:
        """
        Allowed next phases of a learner driving an environment.

        Nothing returns to IDLE, and a tail never resumes planning: after the
        last planning block only dummy play or a fresh estimation stage (the
        next doubling episode) may follow.

        Returns:
            dict: Current phase mapped to the phases it may move to
        """
        return {
            cls.IDLE: frozenset({cls.ESTIMATION, cls.DUMMY, cls.PLANNING, cls.TAIL}),
            cls.ESTIMATION: frozenset({cls.ESTIMATION, cls.DUMMY, cls.TAIL}),
            cls.DUMMY: frozenset({cls.DUMMY, cls.ESTIMATION, cls.PLANNING, cls.TAIL}),
            cls.PLANNING: frozenset({cls.PLANNING, cls.DUMMY, cls.ESTIMATION, cls.TAIL}),
            cls.TAIL: frozenset({cls.TAIL, cls.DUMMY, cls.ESTIMATION}),
        }


@dataclass
class PhaseMachine:
    """Current phase of one environment, moved only along the transition table."""

    current: LearnerPhase = LearnerPhase.IDLE
    transitions: dict[LearnerPhase, frozenset[LearnerPhase]] = field(
        default_factory=LearnerPhase.get_transitions
    )

    def can_transition(self, phase: LearnerPhase) -> bool:
        return phase in self.transitions.get(self.current, frozenset())

    def transition_to(self, phase: LearnerPhase) -> LearnerPhase:
        """
        Args:
            phase (LearnerPhase): Phase of the next block

        Raises:
            ProtocolViolationError: If the table does not allow the move

        Returns:
            LearnerPhase: The previous phase
        """
        if not self.can_transition(phase):
            logger.error(f"Invalid phase transition from {self.current.name} to {phase.name}")
            raise ProtocolViolationError(
                f"Invalid phase transition from {self.current.name} to {phase.name}"
            )
        previous = self.current
        if phase is not previous:
            logger.debug(f"Phase {previous.name} -> {phase.name}")
        self.current = phase
        return previous
