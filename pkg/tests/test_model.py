import math

import numpy as np
import pytest

from principal_lab.exceptions import AssumptionViolationError, DegenerateInstanceError, DimensionError
from principal_lab.geometry import inradius, make_isometry
from principal_lab.model import (
    ProblemInstance,
    RewardAngles,
    angle_condition_violations,
    best_action,
    dummy_mechanism,
    expected_agent_reward,
    gap_profile,
    instance_from_angles,
    interior_feasible_mechanism,
    load_instance,
    mechanism_hash,
    random_instance,
    reward_angles,
    reward_profile,
    sample_outcome,
    sample_type,
    save_instance,
    separated_angles,
    validate_mechanism,
)


def test_validate_mechanism():
    validate_mechanism(dummy_mechanism(2, 3), n_rows=2, d=3)
    with pytest.raises(DimensionError):
        validate_mechanism(np.ones(3))
    with pytest.raises(DimensionError):
        validate_mechanism(dummy_mechanism(2, 3), n_rows=3)
    with pytest.raises(DimensionError):
        validate_mechanism(np.array([[0.5, 0.6, 0.1], [1.0, 0.0, 0.0]]))


def test_mechanism_hash_is_stable():
    mech = dummy_mechanism(2, 3)
    assert mechanism_hash(mech) == mechanism_hash(mech.copy())
    assert mechanism_hash(mech) != mechanism_hash(np.array([[1.0, 0, 0], [0, 1.0, 0]]))


def test_reference_instance_shape(reference):
    assert reference.U.shape == (2, 3, 2, 2)
    assert reference.f_min >= 0.2
    assert reference.seed == 42
    again = random_instance(2, 3, 2, 2, seed=42, min_prob=0.2)
    assert np.array_equal(again.U, reference.U)


def test_instance_rejects_bad_type_distribution(reference):
    with pytest.raises(AssumptionViolationError):
        ProblemInstance(f=[0.5, 0.6], U=reference.U, V=reference.V, F=reference.F)


def test_instance_rejects_bad_discount(reference):
    with pytest.raises(AssumptionViolationError):
        ProblemInstance(f=reference.f, U=reference.U, V=reference.V, F=reference.F, gamma=1.0)


def test_instance_rejects_shape_mismatch(reference):
    with pytest.raises(DimensionError):
        ProblemInstance(f=reference.f, U=reference.U, V=reference.V[:, :2], F=reference.F)


def test_save_and_load_instance(tmp_path, reference):
    path = save_instance(reference, tmp_path / "inst.json")
    loaded = load_instance(path)
    assert np.allclose(loaded.U, reference.U)
    assert np.allclose(loaded.f, reference.f)
    assert loaded.gamma == reference.gamma


def test_from_dict_missing_field(reference):
    payload = reference.to_dict()
    del payload["F"]
    with pytest.raises(DimensionError):
        ProblemInstance.from_dict(payload)


def test_best_action_matches_profile(reference):
    profile = reward_profile(reference)
    for theta in range(reference.n_types):
        for x in range(reference.n_actions):
            assert best_action(reference, theta, x) == profile.best_actions[theta, x]


def test_reward_profile_normalization(reference):
    profile = reward_profile(reference)
    assert np.allclose(profile.v_bar.sum(axis=1), 0.0)
    assert np.allclose(np.linalg.norm(profile.v_bar, axis=1), 1.0)
    centered = profile.v - profile.v.mean(axis=1, keepdims=True)
    assert profile.C0 == pytest.approx(2.0 * reference.B / np.linalg.norm(centered, axis=1).min())


def test_interior_feasible_mechanism_is_strictly_ic(reference):
    profile = reward_profile(reference)
    mech = interior_feasible_mechanism(profile)
    assert np.all(mech >= 0.0)
    assert np.allclose(mech.sum(axis=1), 1.0)
    values = profile.v_bar @ mech.T
    for s in range(profile.n_types):
        others = np.delete(values[s], s)
        assert np.all(values[s, s] > others)
        assert values[s, s] - others.max() <= inradius(profile.d)


def test_instance_from_angles_recovers_angles(separated_case):
    inst, iso, angles = separated_case
    recovered = reward_angles(reward_profile(inst), iso)
    assert np.allclose(recovered.values, angles.values)


def test_separated_angles_are_generic(rng):
    angles = separated_angles(3, 5, rng)
    assert angles.values.shape == (3, 3)
    assert angle_condition_violations(angles) == []
    assert gap_profile(angles).minimum() > 0.0


def test_angle_conditions_flag_duplicates():
    angles = RewardAngles(np.array([[1.0], [1.0]]))
    assert "distinct-coordinates(0,1)" in angle_condition_violations(angles)


def test_reward_angles_accessors():
    angles = RewardAngles(np.array([[0.4, 1.0], [2.0, 3.0]]))
    assert angles.d == 4
    assert np.allclose(angles.coordinate(2), [1.0, 3.0])
    assert np.allclose(angles.tail(1, 2), [3.0])
    with pytest.raises(DimensionError):
        angles.coordinate(3)


def test_reward_angles_need_matching_isometry(reference):
    with pytest.raises(DimensionError):
        reward_angles(reward_profile(reference), make_isometry(4, 0))


def test_random_instance_rejects_large_floor():
    with pytest.raises(AssumptionViolationError):
        random_instance(4, 3, min_prob=0.3)


def test_expected_agent_reward_averages_outcomes(reference):
    for theta, x, a in [(0, 0, 0), (1, 2, 1), (0, 1, 1)]:
        manual = np.einsum("o,o->", reference.V[theta, x, a], reference.F[theta, x, a])
        assert expected_agent_reward(reference, theta, x, a) == pytest.approx(manual)
    with pytest.raises(DimensionError):
        expected_agent_reward(reference, 0, 0, 5)


def test_expected_agent_reward_two_outcomes():
    inst = ProblemInstance(
        f=[1.0],
        U=np.zeros((1, 2, 1, 2)),
        V=np.array([0.0, 1.0, 0.0, 0.5]).reshape(1, 2, 1, 2),
        F=np.full((1, 2, 1, 2), 0.5),
    )
    assert expected_agent_reward(inst, 0, 0, 0) == pytest.approx(0.5)
    assert expected_agent_reward(inst, 0, 1, 0) == pytest.approx(0.25)


def test_expected_agent_reward_single_outcome(separated_case):
    inst, _, _ = separated_case
    assert expected_agent_reward(inst, 2, 1, 0) == pytest.approx(inst.V[2, 1, 0, 0])


def test_sample_type_frequencies(reference):
    rng = np.random.default_rng(3)
    draws = np.array([sample_type(reference, rng) for _ in range(20_000)])
    freq = np.bincount(draws, minlength=reference.n_types) / draws.size
    sigma = np.sqrt(reference.f * (1 - reference.f) / draws.size)
    assert np.all(np.abs(freq - reference.f) <= 4 * sigma)


def test_sample_type_is_seeded(reference):
    first, second = np.random.default_rng(9), np.random.default_rng(9)
    assert [sample_type(reference, first) for _ in range(50)] == [
        sample_type(reference, second) for _ in range(50)
    ]
    single = random_instance(1, 3, seed=2)
    assert {sample_type(single, np.random.default_rng(s)) for s in range(20)} == {0}


def test_sample_outcome_frequencies(reference):
    rng = np.random.default_rng(5)
    p = reference.F[1, 2, 0]
    draws = np.array([sample_outcome(reference, 1, 2, 0, rng) for _ in range(20_000)])
    freq = np.bincount(draws, minlength=p.size) / draws.size
    assert np.all(np.abs(freq - p) <= 4 * np.sqrt(p * (1 - p) / draws.size) + 1e-12)
    with pytest.raises(DimensionError):
        sample_outcome(reference, 2, 0, 0, rng)


def test_gap_profile_single_type():
    values = np.array([[0.7, 1.1, 4.0]])
    profile = gap_profile(RewardAngles(values))
    assert np.all(np.isinf(profile.chi))
    assert np.all(np.isinf(profile.chi_bar))
    assert profile.delta_sin == pytest.approx(math.sin(0.7) * math.sin(1.1))


def test_gap_profile_last_coordinate_antipode():
    profile = gap_profile(RewardAngles(np.array([[0.3], [2.0]])))
    assert profile.chi_bar[-1] == pytest.approx(min(1.7, math.pi - 1.7))
    assert math.isinf(profile.chi[-1])
    assert profile.delta_sin == pytest.approx(1.0)


def test_gap_profile_shrinks_as_sets_approach():
    lead = np.array([math.pi / 2 - 0.2, 0.3])
    previous = None
    for t in (0.6, 0.4, 0.2, 0.1, 0.05):
        profile = gap_profile(RewardAngles(np.vstack([lead, lead + np.array([-t, t])])))
        assert profile.chi[0] == pytest.approx(t)
        assert np.allclose(profile.chi_bar, t)
        if previous is not None:
            assert profile.minimum() <= previous
        previous = profile.minimum()


def test_gap_profile_degenerate():
    with pytest.raises(DegenerateInstanceError):
        gap_profile(RewardAngles(np.array([[1.0, 0.5], [1.0, 0.5]])))
