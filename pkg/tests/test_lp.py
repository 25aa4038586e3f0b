import math
from types import SimpleNamespace

import numpy as np
import pytest

from principal_lab.bandit import ConfidenceEllipsoid, ridge_update
from principal_lab.constants import LabConstants
from principal_lab.exceptions import CapacityError, LpInfeasibleError, LpSolverError, LpUnboundedError
from principal_lab.lp import (
    LinearProgram,
    LpSolution,
    LpStatus,
    dedup_points,
    dual_value,
    enumerate_vertices,
    ic_polytope,
    pessimistic_polytope,
    reward_directions,
    single_simplex,
    solve_lp_star,
    solve_opt_oracle,
    solve_pess_opt,
    solve_program,
)
from principal_lab.model import RewardAngles, random_instance, reward_profile
from principal_lab.oracles import ic_violation


@pytest.fixture
def small_program():
    return LinearProgram(
        c=[1.0, 1.0],
        A_ub=[[1.0, 2.0], [3.0, 1.0]],
        b_ub=[4.0, 6.0],
        A_eq=np.zeros((0, 2)),
        b_eq=[],
    )


@pytest.mark.parametrize("backend", ["simplex", "highs"])
def test_small_program(small_program, backend):
    solution = solve_program(small_program, backend)
    assert solution.status is LpStatus.OPTIMAL
    assert solution.value == pytest.approx(2.8)
    assert np.allclose(solution.x, [1.6, 1.2])


def test_strong_duality(small_program):
    assert dual_value(small_program) == pytest.approx(2.8)


@pytest.mark.parametrize("backend", ["simplex", "highs"])
def test_infeasible_program(backend):
    program = LinearProgram(c=[1.0], A_ub=[[1.0]], b_ub=[-1.0], A_eq=np.zeros((0, 1)), b_eq=[])
    assert solve_program(program, backend).status is LpStatus.INFEASIBLE


@pytest.mark.parametrize("backend", ["simplex", "highs"])
def test_unbounded_program(backend):
    program = LinearProgram(c=[1.0, 0.0], A_ub=[[-1.0, 1.0]], b_ub=[1.0], A_eq=np.zeros((0, 2)), b_eq=[])
    assert solve_program(program, backend).status is LpStatus.UNBOUNDED


def test_unknown_backend(small_program):
    with pytest.raises(ValueError):
        solve_program(small_program, "glpk")


def test_equality_rows():
    program = LinearProgram(
        c=[1.0, 2.0, 0.0], A_ub=np.zeros((0, 3)), b_ub=[], A_eq=[[1.0, 1.0, 1.0]], b_eq=[1.0]
    )
    solution = solve_program(program)
    assert solution.value == pytest.approx(2.0)
    assert np.allclose(solution.x, [0.0, 1.0, 0.0])


def test_lp_star_single_type():
    inst = random_instance(1, 4, seed=3)
    profile = reward_profile(inst)
    solution = solve_lp_star(inst.f, profile.u, profile.v_bar)
    assert solution.value == pytest.approx(profile.u.max())
    assert solution.mechanism.shape == (1, 4)


def test_lp_star_is_ic(reference):
    profile = reward_profile(reference)
    solution = solve_lp_star(reference.f, profile.u, profile.v_bar, margin=1e-3)
    assert solution.optimal
    assert ic_violation(profile.v_bar, solution.mechanism) <= -1e-3 + 1e-8


@pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
def test_revelation_principle(seed):
    inst = random_instance(n_types=1 + seed % 3, n_actions=2 + seed % 3, seed=seed)
    profile = reward_profile(inst)
    lp_value = solve_lp_star(inst.f, profile.u, profile.v_bar).value
    assert solve_opt_oracle(inst.f, profile.u, profile.v) == pytest.approx(lp_value, abs=1e-7)


def test_backends_agree(reference):
    profile = reward_profile(reference)
    ours = solve_lp_star(reference.f, profile.u, profile.v_bar).value
    theirs = solve_lp_star(reference.f, profile.u, profile.v_bar, backend="highs").value
    assert ours == pytest.approx(theirs, abs=1e-7)


def test_margin_monotone(reference):
    profile = reward_profile(reference)
    values = [
        solve_lp_star(reference.f, profile.u, profile.v_bar, margin).value
        for margin in (0.05, 0.01, 1e-3, 1e-6, 0.0)
    ]
    assert all(b >= a - 1e-9 for a, b in zip(values, values[1:]))


def test_lp_star_too_large_margin(reference):
    profile = reward_profile(reference)
    assert not solve_lp_star(reference.f, profile.u, profile.v_bar, margin=5.0).optimal
    with pytest.raises(ValueError):
        solve_lp_star(reference.f, profile.u, profile.v_bar, margin=-1.0)


def test_single_simplex_vertices():
    vertices = enumerate_vertices(single_simplex(3))
    assert len(vertices) == 3
    assert np.allclose(sorted(v.ravel().tolist() for v in vertices), sorted(np.eye(3).tolist()))


def test_vertex_cap():
    with pytest.raises(CapacityError):
        enumerate_vertices(single_simplex(13))


def test_ic_polytope_vertices_are_ic(reference):
    profile = reward_profile(reference)
    poly = ic_polytope(profile.v_bar, margin=1e-3)
    vertices = enumerate_vertices(poly)
    assert vertices
    for vertex in vertices:
        assert poly.contains(vertex)
        assert ic_violation(profile.v_bar, vertex) <= -1e-3 + 1e-8


def test_pessimistic_polytope_of_true_angles(myopic_env):
    angles = myopic_env.oracle.true_angles
    directions = reward_directions(angles, myopic_env.isometry)
    assert np.allclose(directions, myopic_env.profile.v_bar)
    poly = pessimistic_polytope(angles, 0.0, 0.0, myopic_env.isometry)
    reference_poly = ic_polytope(myopic_env.profile.v_bar)
    assert np.allclose(poly.A_ub, reference_poly.A_ub)


def test_pessimistic_polytope_is_contained(myopic_env, rng):
    truth = myopic_env.oracle.true_angles
    radius = 0.01
    noise = rng.standard_normal(truth.values.shape)
    noise *= 0.9 * radius / np.abs(noise).sum(axis=1, keepdims=True)
    values = truth.values + noise
    values[:, :-1] = np.clip(values[:, :-1], 0.0, math.pi)
    values[:, -1] = np.mod(values[:, -1], 2 * math.pi)
    estimate = RewardAngles(values)
    poly = pessimistic_polytope(estimate, radius, 0.0, myopic_env.isometry)
    for vertex in enumerate_vertices(poly):
        assert ic_violation(myopic_env.profile.v_bar, vertex) <= 1e-9


def test_solve_pess_opt_picks_best_vertex():
    u = np.array([0.1, 0.7, 0.3])
    ellipsoid = ConfidenceEllipsoid(beta_hat=u, omega=np.eye(3), radius=0.0, lam=1.0, delta=0.1)
    mech, value = solve_pess_opt(single_simplex(3), ellipsoid)
    assert np.allclose(mech, [[0.0, 1.0, 0.0]])
    assert value == pytest.approx(0.7)


def test_solve_pess_opt_empty(reference):
    profile = reward_profile(reference)
    poly = ic_polytope(profile.v_bar, margin=5.0)
    assert poly.is_empty()
    with pytest.raises(LpInfeasibleError):
        solve_pess_opt(poly, ridge_update([], poly.n_vars))


def test_polytope_rejects_negative_radius(reference):
    with pytest.raises(ValueError):
        ic_polytope(reward_profile(reference).v_bar, radius=-1.0)


def test_infinite_bound_polytope():
    with pytest.raises(ValueError):
        ic_polytope(np.array([[math.inf, 0.0], [0.0, 1.0]]))


def test_opt_oracle_needs_only_raw_rows():
    inst = random_instance(2, 3, seed=8)
    profile = reward_profile(inst)
    with pytest.raises(TypeError):
        solve_opt_oracle(inst.f, profile.u, profile.v, profile.v_bar)


@pytest.mark.parametrize("status", [1, 4])
def test_highs_undecided_status(small_program, monkeypatch, status):
    stopped = SimpleNamespace(status=status, message="stopped", fun=None, x=None)
    monkeypatch.setattr("principal_lab.lp.linprog", lambda *args, **kwargs: stopped)
    with pytest.raises(LpSolverError):
        solve_program(small_program, "highs")


def test_simplex_iteration_cap(small_program, monkeypatch):
    monkeypatch.setattr(LabConstants, "MAX_SIMPLEX_ITERATIONS", 0)
    with pytest.raises(LpSolverError):
        solve_program(small_program)


def test_require_optimal(small_program):
    solution = solve_program(small_program)
    assert solution.require_optimal() is solution
    with pytest.raises(LpInfeasibleError):
        LpSolution(status=LpStatus.INFEASIBLE, value=math.nan).require_optimal()
    with pytest.raises(LpUnboundedError):
        LpSolution(status=LpStatus.UNBOUNDED, value=math.inf).require_optimal()


def test_dedup_points_across_rounding_boundary():
    points = np.array([[1.0, 0.0], [0.1234567895001, 1.0], [0.1234567894999, 1.0]])
    unique = dedup_points(points)
    assert unique.shape == (2, 2)
    assert unique[0, 0] == pytest.approx(0.1234567895, abs=1e-12)
    assert np.allclose(unique[1], [1.0, 0.0])


def test_dedup_points_keeps_distinct():
    points = np.array([[0.0, 0.0], [5e-9, 0.0], [0.0, 5e-9]])
    assert dedup_points(points).shape == (3, 2)
    assert dedup_points(np.zeros((0, 2))).shape == (0, 2)
