import itertools

import pytest

from principal_lab.exceptions import ProtocolViolationError
from principal_lab.state_machine import LearnerPhase, PhaseMachine


def test_starts_idle():
    machine = PhaseMachine()
    assert machine.current is LearnerPhase.IDLE
    assert LearnerPhase.PLANNING.tag == "planning"


def test_nothing_returns_to_idle():
    for phase in LearnerPhase:
        assert LearnerPhase.IDLE not in LearnerPhase.get_transitions()[phase]


@pytest.mark.parametrize("start, target", list(itertools.product(LearnerPhase, LearnerPhase)))
def test_transition_table_is_enforced(start, target):
    machine = PhaseMachine(current=start)
    allowed = target in LearnerPhase.get_transitions()[start]
    if allowed:
        assert machine.transition_to(target) is start
        assert machine.current is target
    else:
        with pytest.raises(ProtocolViolationError):
            machine.transition_to(target)
        assert machine.current is start


def test_tail_never_resumes_planning():
    machine = PhaseMachine()
    machine.transition_to(LearnerPhase.PLANNING)
    machine.transition_to(LearnerPhase.TAIL)
    assert not machine.can_transition(LearnerPhase.PLANNING)
    machine.transition_to(LearnerPhase.ESTIMATION)
    assert not machine.can_transition(LearnerPhase.PLANNING)
    machine.transition_to(LearnerPhase.DUMMY)
    assert machine.can_transition(LearnerPhase.PLANNING)
