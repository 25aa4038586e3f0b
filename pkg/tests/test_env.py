import json

import numpy as np
import pytest

from principal_lab.agent import AgentKind, AgentModel
from principal_lab.env import (
    Environment,
    RegretLedger,
    TraceLog,
    delay_guard,
    expected_principal_value,
    run_round,
)
from principal_lab.exceptions import HorizonExhaustedError, ProtocolViolationError
from principal_lab.model import dummy_mechanism, interior_feasible_mechanism
from principal_lab.state_machine import LearnerPhase


def test_create_is_seed_deterministic(reference):
    mech = dummy_mechanism(2, 3)
    first = Environment.create(reference, AgentModel(), seed=3)
    second = Environment.create(reference, AgentModel(), seed=3)
    a = first.deploy(mech, 100, LearnerPhase.PLANNING)
    b = second.deploy(mech, 100, LearnerPhase.PLANNING)
    assert np.array_equal(a, b)
    assert np.array_equal(first.transcript.blocks[0].rewards, second.transcript.blocks[0].rewards)
    assert np.array_equal(first.isometry.matrix, second.isometry.matrix)


def test_deploy_advances_time(myopic_env):
    myopic_env.deploy(dummy_mechanism(2, 3), 10, LearnerPhase.PLANNING)
    myopic_env.dummy(5)
    assert myopic_env.t == 15
    assert len(myopic_env.transcript) == 15
    assert myopic_env.ledger.rounds == 15
    assert myopic_env.oracle.hidden_types().size == 15


def test_horizon_is_enforced(reference):
    env = Environment.create(reference, AgentModel(), seed=1, horizon=20)
    env.deploy(dummy_mechanism(2, 3), 15, LearnerPhase.PLANNING)
    with pytest.raises(HorizonExhaustedError):
        env.deploy(dummy_mechanism(2, 3), 6, LearnerPhase.PLANNING)
    env.fill()
    assert env.t == 20
    assert env.remaining == 0


def test_delayed_block_release(myopic_env):
    myopic_env.deploy(dummy_mechanism(2, 3), 10, LearnerPhase.ESTIMATION, delay=5)
    assert len(myopic_env.released()) == 0
    with pytest.raises(ProtocolViolationError):
        myopic_env.released().reports(0, 10)
    with pytest.raises(ProtocolViolationError):
        myopic_env.transcript.read(0, myopic_env.t)
    myopic_env.dummy(5)
    reports = myopic_env.released().reports(0, 10)
    assert np.array_equal(reports, myopic_env.transcript.blocks[0].reports)


def test_head_only_release(myopic_env):
    myopic_env.deploy(dummy_mechanism(2, 3), 4, LearnerPhase.PLANNING, delay=3, head_only=True)
    assert len(delay_guard(myopic_env.transcript, 3)) == 0
    history = delay_guard(myopic_env.transcript, 4)
    assert len(history) == 1
    assert history.get(0).t == 0
    with pytest.raises(ProtocolViolationError):
        history.get(1)


def test_dummy_data_never_released(myopic_env):
    myopic_env.dummy(5)
    myopic_env.deploy(dummy_mechanism(2, 3), 2, LearnerPhase.PLANNING)
    assert len(delay_guard(myopic_env.transcript, 1000)) == 2


def test_planning_data_since(myopic_env):
    mech = dummy_mechanism(2, 3)
    myopic_env.deploy(mech, 3, LearnerPhase.PLANNING)
    myopic_env.deploy(mech, 3, LearnerPhase.ESTIMATION)
    myopic_env.deploy(mech, 3, LearnerPhase.ESTIMATION, delay=0)
    myopic_env.dummy(1)
    myopic_env.deploy(mech, 4, LearnerPhase.PLANNING)
    myopic_env.dummy(1)
    released = myopic_env.released()
    assert len(released.planning_data()) == 7
    assert len(released.planning_data(since=9)) == 4


def test_invalid_phase_transition(myopic_env):
    myopic_env.deploy(dummy_mechanism(2, 3), 1, LearnerPhase.TAIL)
    with pytest.raises(ProtocolViolationError):
        myopic_env.deploy(dummy_mechanism(2, 3), 1, LearnerPhase.PLANNING)
    myopic_env.deploy(dummy_mechanism(2, 3), 1, LearnerPhase.ESTIMATION)


def test_uniform_mechanism_regret(myopic_env):
    myopic_env.dummy(50)
    inst, profile = myopic_env.instance, myopic_env.profile
    value = float(np.sum(inst.f * profile.u.mean(axis=1)))
    assert myopic_env.ledger.per_round() == pytest.approx(np.full(50, myopic_env.u_star - value))
    assert myopic_env.ledger.total == pytest.approx(50 * (myopic_env.u_star - value))


def test_u_star_bounds_every_mechanism(myopic_env, rng):
    for _ in range(20):
        mech = rng.dirichlet(np.ones(3), size=2)
        value = expected_principal_value(
            myopic_env.instance, myopic_env.profile, myopic_env.agent, mech
        )
        assert value <= myopic_env.u_star + 1e-9


def test_ledger_cumulative():
    ledger = RegretLedger(u_star=1.0)
    ledger.add(np.array([0.5, 1.0]))
    ledger.add(np.array([0.0]))
    assert np.allclose(ledger.cumulative(), [0.5, 0.5, 1.5])
    assert ledger.rounds == 3


def test_run_round_charges_ledger(reference):
    env = Environment.create(reference, AgentModel(), seed=5)
    ledger = RegretLedger(u_star=env.u_star)
    mech = interior_feasible_mechanism(env.profile)
    record = run_round(reference, env.profile, AgentModel(), mech, 0.0, env.rng, ledger, t=4)
    assert record.t == 4
    assert record.release_round == 5
    assert ledger.rounds == 1


def test_hidden_slacks_follow_delay(reference):
    env = Environment.create(reference, AgentModel(kind=AgentKind.SLACK_ADVERSARIAL), seed=2)
    env.deploy(dummy_mechanism(2, 3), 3, LearnerPhase.PLANNING, delay=2)
    slacks = env.oracle.blocks[0].report_slacks
    gamma, c0 = reference.gamma, env.profile.C0
    # release at round 5; rounds 0, 1, 2 wait 4, 3, 2 rounds
    assert slacks == pytest.approx(c0 * gamma ** np.array([4.0, 3.0, 2.0]) / (1 - gamma))
    env.dummy(1)
    assert env.oracle.blocks[1].report_slacks == pytest.approx([0.0])


def test_trace_log_writes_jsonl(tmp_path):
    trace = TraceLog(path=tmp_path / "trace.jsonl")
    trace.write(stage="sec_test", t=3, outcome=True)
    trace.write(stage="grid_match", t=9, estimate=np.float64(0.5))
    trace.close()
    lines = (tmp_path / "trace.jsonl").read_text().splitlines()
    assert [json.loads(line)["stage"] for line in lines] == ["sec_test", "grid_match"]
    assert len(trace.events) == 2


def test_true_angles_on_oracle_channel(myopic_env):
    angles = myopic_env.oracle.true_angles
    assert angles is not None
    assert angles.values.shape == (2, 1)


def test_delay_guard_never_leaks_unreleased_rounds(reference, rng):
    env = Environment.create(reference, AgentModel(kind=AgentKind.SLACK_ADVERSARIAL), seed=12)
    for _ in range(40):
        allowed = LearnerPhase.get_transitions()[env.phase.current] - {LearnerPhase.TAIL}
        phase = sorted(allowed, key=lambda p: p.name)[rng.integers(len(allowed))]
        delay = None if rng.random() < 0.2 else int(rng.integers(0, 10))
        mech = rng.dirichlet(np.ones(3), size=2)
        env.deploy(mech, int(rng.integers(1, 8)), phase, delay=delay, head_only=bool(rng.random() < 0.3))

    releases = np.concatenate([block.release_rounds for block in env.transcript.blocks])
    for now in range(env.t + 12):
        history = delay_guard(env.transcript, now)
        seen = [record.t for record in history.records()]
        assert all(env.transcript.read(t, now).release_round <= now for t in seen)
        assert sorted(seen) == np.flatnonzero(releases <= now).tolist()
        for t in rng.choice(env.t, size=10):
            if releases[t] > now:
                with pytest.raises(ProtocolViolationError):
                    history.get(int(t))
                with pytest.raises(ProtocolViolationError):
                    env.transcript.read(int(t), now)


def test_ledger_matches_realized_rewards(reference):
    env = Environment.create(reference, AgentModel(), seed=13)
    mech = interior_feasible_mechanism(env.profile)
    env.deploy(mech, 20_000, LearnerPhase.PLANNING)
    env.dummy(10)
    expected = expected_principal_value(reference, env.profile, env.agent, mech)
    block = env.transcript.blocks[0]
    assert env.ledger.expected_rewards()[:20_000] == pytest.approx(np.full(20_000, expected))
    sigma = block.rewards.std() / np.sqrt(block.rewards.size)
    assert abs(block.rewards.mean() - expected) <= 4 * sigma
    assert env.ledger.rounds == len(env.transcript)
    assert env.ledger.per_round() == pytest.approx(env.u_star - env.ledger.expected_rewards())
    assert env.ledger.cumulative()[-1] == pytest.approx(env.ledger.total)
