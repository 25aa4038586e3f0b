import math

import numpy as np
import pytest

from principal_lab.agent import AgentModel
from principal_lab.bandit import (
    ConfidenceEllipsoid,
    LinUcbConfig,
    classical_linucb,
    coverage_holds,
    doubling_pipeline,
    horizon_split,
    pess_opt_linucb,
    ridge_update,
    split_for_n,
    true_parameter,
    true_polytope,
)
from principal_lab.env import Environment, TraceLog
from principal_lab.estimator import EstimationBudget
from principal_lab.exceptions import ConfigError, EstimationFailure
from principal_lab.model import random_instance
from principal_lab.state_machine import LearnerPhase


def test_ridge_update_recovers_parameter(rng):
    beta = np.array([0.3, -0.2, 0.5])
    X = rng.dirichlet(np.ones(3), size=2000)
    data = [(x.reshape(1, 3), float(x @ beta + 0.01 * rng.standard_normal())) for x in X]
    ellipsoid = ridge_update(data, 3, lam=1e-3)
    assert np.allclose(ellipsoid.beta_hat, beta, atol=0.02)
    assert ellipsoid.contains(beta)
    assert ellipsoid.n_samples == 2000


def test_ridge_update_prior():
    ellipsoid = ridge_update([], 4, lam=2.0, delta=0.1, bound=1.0, dim=3)
    assert np.allclose(ellipsoid.beta_hat, 0.0)
    assert ellipsoid.log_det == pytest.approx(4 * math.log(2.0))
    expected = 4.0 * math.sqrt(-2.0 * math.log(0.1)) + math.sqrt(2.0) * math.sqrt(3.0)
    assert ellipsoid.radius == pytest.approx(expected)


@pytest.mark.parametrize("kwargs", [{"lam": 0.0}, {"delta": 1.5}])
def test_ridge_update_rejects_bad_parameters(kwargs):
    with pytest.raises(ConfigError):
        ridge_update([], 2, **kwargs)


def test_optimistic_value():
    ellipsoid = ConfidenceEllipsoid(
        beta_hat=np.array([1.0, 0.0]), omega=4.0 * np.eye(2), radius=2.0, lam=1.0, delta=0.1
    )
    # <beta_hat, x> + radius * ||x||_{Omega^-1}
    assert ellipsoid.optimistic_value(np.array([[0.0, 1.0]])) == pytest.approx(1.0)
    assert ellipsoid.optimistic_value(np.array([[1.0, 0.0]])) == pytest.approx(2.0)


def test_config_validation():
    with pytest.raises(ConfigError):
        LinUcbConfig(lam=-1.0)
    with pytest.raises(ConfigError):
        LinUcbConfig(fallback="retry")
    assert LinUcbConfig().to_dict()["fallback"] == "abort"


def test_horizon_split():
    split = horizon_split(2**10)
    assert split.n == 20
    assert split.log_n == 3
    assert split.delay == 9
    assert split.block_rounds == 10
    assert split.stage_one_cap == 729
    assert split.episode_rounds <= 2**10 < split_for_n(21).episode_rounds
    assert split_for_n(8).horizon == split_for_n(8).episode_rounds


def test_horizon_split_too_short():
    with pytest.raises(ConfigError):
        horizon_split(5)


def test_true_parameter_layout(myopic_env):
    beta = true_parameter(myopic_env)
    weights = myopic_env.instance.f[:, None] * myopic_env.profile.u
    assert np.allclose(beta, weights.ravel())
    assert np.allclose(true_parameter(myopic_env, np.array([1, 0])), weights[[1, 0]].ravel())


def test_classical_linucb_schedule(reference):
    env = Environment.create(reference, AgentModel(), seed=3, horizon=2000)
    result = classical_linucb(env, true_polytope(env, 1e-6))
    assert env.t == 2000
    split = result.split
    assert result.blocks
    assert all(b.start == split.delay + k * split.block_rounds for k, b in enumerate(result.blocks))
    head_only = [b for b in env.transcript.blocks if b.phase is LearnerPhase.PLANNING]
    assert all(np.sum(b.release_rounds < np.iinfo(np.int64).max) == 1 for b in head_only)
    assert coverage_holds(env, result)


def test_single_type_skips_estimation():
    inst = random_instance(1, 3, seed=5)
    trace = TraceLog()
    env = Environment.create(inst, AgentModel(), seed=5, horizon=512, trace=trace)
    result = pess_opt_linucb(env)
    assert not result.failed
    assert result.stage_one_rounds == 0
    assert trace.events == []
    assert all(b.phase is not LearnerPhase.ESTIMATION for b in env.transcript.blocks)
    assert env.t == 512


def test_known_horizon_run(reference):
    env = Environment.create(reference, AgentModel(), seed=9, horizon=4096)
    result = pess_opt_linucb(env, LinUcbConfig(fail_prob=1e-4))
    assert env.t == 4096
    assert not result.failed
    assert result.angles is not None
    assert result.stage_one_rounds > 0
    assert len(result.blocks) == result.split.n
    phases = [b.phase for b in env.transcript.blocks]
    assert phases[0] is LearnerPhase.ESTIMATION
    assert phases[-1] in (LearnerPhase.TAIL, LearnerPhase.PLANNING)


def test_known_horizon_with_given_angles(reference):
    env = Environment.create(reference, AgentModel(), seed=9, horizon=1024)
    truth = env.oracle.true_angles
    result = pess_opt_linucb(env, angles=truth)
    assert result.stage_one_rounds == 0
    assert not result.failed
    assert env.t == 1024


def test_stage_one_failure_aborts(reference):
    env = Environment.create(reference, AgentModel(), seed=9, horizon=1024)
    budget = EstimationBudget(n=50, t_sec=200, l_delay=16, eps_target=1e-3)
    result = pess_opt_linucb(env, budget=budget)
    assert result.failed
    assert result.failure_stage == "budget"
    assert env.t == 1024


def test_stage_one_failure_raises(reference):
    env = Environment.create(reference, AgentModel(), seed=9, horizon=1024)
    budget = EstimationBudget(n=50, t_sec=200, l_delay=16, eps_target=1e-3)
    with pytest.raises(EstimationFailure):
        pess_opt_linucb(env, LinUcbConfig(fallback="raise"), budget=budget)


def test_strict_stage_one_cap(reference):
    env = Environment.create(reference, AgentModel(), seed=9, horizon=8192)
    config = LinUcbConfig(stage_one_cap=10, strict_stage_one=True, fail_prob=1e-4)
    result = pess_opt_linucb(env, config)
    assert result.stage_one_overrun
    assert result.failed
    assert result.failure_stage == "budget"


def test_pess_opt_needs_horizon(myopic_env):
    with pytest.raises(ConfigError):
        pess_opt_linucb(myopic_env)


def test_doubling_pipeline_episodes(reference):
    env = Environment.create(reference, AgentModel(), seed=2, horizon=6000)
    result = doubling_pipeline(env)
    assert env.t == 6000
    assert [e.k for e in result.episodes] == list(range(1, len(result.episodes) + 1))
    assert [e.n for e in result.episodes] == [2**e.k for e in result.episodes]
    assert sum(e.rounds for e in result.episodes) == 6000
    assert result.episodes[-1].truncated
    assert not any(e.truncated for e in result.episodes[:-1])


def test_doubling_needs_horizon(myopic_env):
    with pytest.raises(ConfigError):
        doubling_pipeline(myopic_env)


@pytest.mark.slow
def test_ellipsoid_coverage_rate(reference):
    covered = 0
    for seed in range(100):
        env = Environment.create(reference, AgentModel(), seed=seed, horizon=1024)
        result = classical_linucb(env, true_polytope(env, 1e-6))
        covered += coverage_holds(env, result)
    assert covered >= 88


def test_coverage_uses_scaled_radius(reference):
    config = LinUcbConfig(ellipsoid_scale=0.0)
    env = Environment.create(reference, AgentModel(), seed=3, horizon=2000)
    result = classical_linucb(env, true_polytope(env, 1e-6), config)
    assert result.blocks
    assert all(block.radius == 0.0 for block in result.blocks)
    assert not coverage_holds(env, result, config)
