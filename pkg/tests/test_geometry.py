import math

import numpy as np
import pytest

from principal_lab.exceptions import DimensionError, DomainError, SimplexViolationError
from principal_lab.geometry import (
    HALF_PI,
    Isometry,
    arc,
    embed_points,
    inradius,
    inverse_embed,
    make_isometry,
    spherical_embed,
    wrap,
    x_of_angle,
    xi,
)


def test_wrap_reduces_into_period():
    assert wrap(-0.1) == pytest.approx(2 * math.pi - 0.1)
    assert wrap(2 * math.pi) == 0.0
    assert wrap(7.0, m=math.pi) == pytest.approx(7.0 - 2 * math.pi)


@pytest.mark.parametrize("alpha, m", [(math.nan, 1.0), (math.inf, 1.0), (1.0, 0.0), (1.0, -2.0)])
def test_wrap_rejects_bad_input(alpha, m):
    with pytest.raises(DomainError):
        wrap(alpha, m)


def test_arc_is_symmetric_and_short():
    assert arc(0.1, 2 * math.pi - 0.1) == pytest.approx(0.2)
    assert arc(2 * math.pi - 0.1, 0.1) == pytest.approx(0.2)
    assert arc(0.0, math.pi) == pytest.approx(math.pi)


def test_spherical_embed_unit_norm(rng):
    angles = rng.uniform(0.0, math.pi, size=(20, 4))
    vectors = spherical_embed(angles)
    assert vectors.shape == (20, 5)
    assert np.allclose(np.linalg.norm(vectors, axis=1), 1.0)


def test_spherical_embed_circle():
    assert np.allclose(spherical_embed([0.3]), [math.cos(0.3), math.sin(0.3)])


def test_spherical_embed_rejects_empty():
    with pytest.raises(DimensionError):
        spherical_embed(np.zeros(0))


def test_inverse_embed_recovers_angles(rng):
    angles = np.concatenate([rng.uniform(0.1, math.pi - 0.1, 3), [rng.uniform(0.0, 2 * math.pi)]])
    assert np.allclose(inverse_embed(spherical_embed(angles)), angles)


def test_inverse_embed_pole_gives_zero():
    assert np.allclose(inverse_embed([1.0, 0.0, 0.0]), [0.0, 0.0])


def test_inverse_embed_rejects_non_unit():
    with pytest.raises(DomainError):
        inverse_embed([1.0, 1.0])


def test_xi_pins_leading_angles():
    out = xi(2, [0.7], 4)
    assert np.allclose(out, [0.0, math.cos(0.7), math.sin(0.7)])
    assert np.allclose(xi(1, [0.2, 0.9], 4), spherical_embed([0.2, 0.9]))


def test_xi_checks_index_and_tail():
    with pytest.raises(DimensionError):
        xi(3, [0.1], 4)
    with pytest.raises(DimensionError):
        xi(1, [0.1], 4)


def test_inradius_value():
    assert inradius(3) == pytest.approx(0.9 / math.sqrt(6))
    with pytest.raises(DomainError):
        inradius(1)


def test_isometry_is_orthonormal_and_deterministic():
    iso = make_isometry(5, 3)
    assert np.allclose(iso.matrix @ iso.matrix.T, np.eye(4))
    assert np.allclose(iso.matrix @ np.ones(5), 0.0)
    assert np.array_equal(iso.matrix, make_isometry(5, 3).matrix)
    assert not np.allclose(iso.matrix, make_isometry(5, 4).matrix)


def test_isometry_round_trip_on_hyperplane(rng):
    iso = make_isometry(4, 9)
    x = rng.standard_normal(4)
    x -= x.mean()
    assert np.allclose(iso.inverse(iso.apply(x)), x)
    assert np.linalg.norm(iso.apply(x)) == pytest.approx(np.linalg.norm(x))


def test_isometry_rejects_bad_matrix():
    with pytest.raises(DomainError):
        Isometry(matrix=np.array([[1.0, 0.0]]))


def test_isometry_from_dict():
    iso = make_isometry(3, 5)
    again = Isometry.from_dict(iso.to_dict())
    assert np.allclose(again.matrix, iso.matrix)
    assert again.seed == 5


def test_embed_points_stay_in_simplex(rng):
    iso = make_isometry(4, 2)
    directions = rng.standard_normal((50, 3))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    rows = embed_points(directions, inradius(4), iso)
    assert np.all(rows >= 0.0)
    assert np.allclose(rows.sum(axis=1), 1.0)


def test_embed_points_outside_simplex():
    iso = make_isometry(3, 2)
    with pytest.raises(SimplexViolationError):
        embed_points(np.array([[1.0, 0.0]]), 10.0, iso)


def test_x_of_angle_points_along_angle():
    iso = make_isometry(3, 8)
    r_d = inradius(3)
    x = x_of_angle(1.1, r_d, iso)
    assert np.allclose(iso.apply(x - 1.0 / 3) / r_d, [math.cos(1.1), math.sin(1.1)])


def test_half_pi():
    assert HALF_PI == pytest.approx(math.pi / 2)


def _angle_draws(rng, n, d):
    interior = rng.uniform(0.0, math.pi, size=(n, d - 3))
    last = rng.uniform(0.0, 2 * math.pi, size=(n, 1))
    return np.concatenate([interior, last], axis=1)


def test_spherical_embed_chart_examples():
    assert np.allclose(spherical_embed([HALF_PI, 0.0]), [0.0, 1.0, 0.0])
    assert np.allclose(spherical_embed([HALF_PI, HALF_PI]), [0.0, 0.0, 1.0])
    assert np.allclose(spherical_embed([math.pi, 2 * math.pi - 1e-12]), [-1.0, 0.0, 0.0])


@pytest.mark.parametrize(
    "angles",
    [[-0.1, 1.0], [math.pi + 0.1, 1.0], [1.0, -0.1], [1.0, 2 * math.pi + 0.1], [[0.5, 1.0], [0.5, 7.0]]],
)
def test_spherical_embed_rejects_out_of_range(angles):
    with pytest.raises(DomainError):
        spherical_embed(angles)


def test_spherical_embed_unchecked_off_chart():
    vector = spherical_embed([-0.1, 7.0], check_range=False)
    assert np.linalg.norm(vector) == pytest.approx(1.0)
    assert np.allclose(xi(1, [-0.1, 7.0], 4), vector)


@pytest.mark.parametrize("d", [3, 4, 5, 6])
def test_spherical_embed_unit_norm_over_chart(rng, d):
    vectors = spherical_embed(_angle_draws(rng, 10_000, d))
    assert np.max(np.abs(np.linalg.norm(vectors, axis=1) - 1.0)) <= 1e-12


@pytest.mark.parametrize("d", [3, 4, 5, 6])
def test_spherical_embed_is_lipschitz(rng, d):
    a = _angle_draws(rng, 25_000, d)
    b = _angle_draws(rng, 25_000, d)
    # local pairs as well as far ones
    near = np.clip(a + rng.uniform(-1e-3, 1e-3, a.shape), 0.0, None)
    near[:, :-1] = np.minimum(near[:, :-1], math.pi)
    near[:, -1] = np.mod(near[:, -1], 2 * math.pi)
    for other in (b, near):
        gap = np.linalg.norm(spherical_embed(a) - spherical_embed(other), axis=1)
        diff = np.abs(a - other)
        diff[:, -1] = np.minimum(diff[:, -1], 2 * math.pi - diff[:, -1])
        assert np.all(gap <= diff.sum(axis=1) + 1e-12)


def test_inverse_embed_round_trip_over_chart(rng):
    for angles in _angle_draws(rng, 2_000, 5):
        angles[:-1] = np.clip(angles[:-1], 1e-3, math.pi - 1e-3)
        assert np.abs(inverse_embed(spherical_embed(angles)) - angles).sum() <= 1e-8


def test_cosine_quadratic_bound():
    x = np.linspace(-math.pi, math.pi, 10_000)
    assert np.all(np.cos(x) <= 1.0 - x**2 / 30.0 + 1e-15)


def test_cotangent_bound():
    x = np.linspace(1e-6, math.pi - 1e-6, 10_000)
    assert np.all(np.abs(1.0 / np.tan(x)) >= np.abs(x - HALF_PI) - 1e-12)


@pytest.mark.parametrize("d", [3, 4, 5, 6])
def test_isometry_preserves_inner_products(rng, d):
    iso = make_isometry(d, d)
    x = rng.standard_normal((10_000, d))
    y = rng.standard_normal((10_000, d))
    x -= x.mean(axis=1, keepdims=True)
    y -= y.mean(axis=1, keepdims=True)
    mapped = np.sum(iso.apply(x) * iso.apply(y), axis=1)
    assert np.max(np.abs(mapped - np.sum(x * y, axis=1))) <= 1e-10
    assert np.allclose(iso.apply(np.zeros(d)), 0.0)


@pytest.mark.parametrize("d", [3, 4, 5])
def test_isometry_maps_unit_hyperplane_vectors_to_sphere(rng, d):
    iso = make_isometry(d, 11)
    x = rng.standard_normal((1_000, d))
    x -= x.mean(axis=1, keepdims=True)
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    assert np.max(np.abs(np.linalg.norm(iso.apply(x), axis=1) - 1.0)) <= 1e-12


@pytest.mark.parametrize("d", [3, 4, 5])
def test_x_of_angle_correlation(rng, d):
    iso = make_isometry(d, 6)
    r_d = inradius(d)
    for angles, beta in zip(_angle_draws(rng, 1_000, d), rng.uniform(0.0, 2 * math.pi, 1_000)):
        v_bar = iso.inverse(spherical_embed(angles))
        expected = r_d * math.cos(angles[-1] - beta) * np.prod(np.sin(angles[:-1]))
        assert x_of_angle(beta, r_d, iso) @ v_bar == pytest.approx(expected, abs=1e-12)
    assert np.allclose(x_of_angle(0.4, 0.0, iso), np.full(d, 1.0 / d))
