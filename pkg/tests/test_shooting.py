import numpy as np
import pytest

from conftest import equator
from subrift.models import euclidean, grushin, heisenberg, hyperbolic2, sphere2
from subrift.shooting import (
    ShootingOptions,
    classify,
    distance,
    first_conjugate_time,
    solve_geodesic,
)


def test_euclidean_distance():
    sol = solve_geodesic(euclidean(2), np.zeros(2), np.array([3.0, 4.0]))
    assert abs(sol.distance - 5.0) < 1e-10
    assert sol.multiplicity == 1


def test_heisenberg_horizontal_distance(heis_straight):
    assert abs(heis_straight.distance - 1.0) < 1e-8
    assert heis_straight.residual < 1e-9


def test_heisenberg_vertical_distance_and_multiplicity():
    # d(0, (0, 0, z))^2 = 4 pi |z|; minimizers form a circle, so several are found
    sol = solve_geodesic(heisenberg(), np.zeros(3), np.array([0.0, 0.0, 0.2]))
    assert abs(sol.distance - np.sqrt(4 * np.pi * 0.2)) < 1e-6
    assert sol.multiplicity >= 2


def test_hyperbolic_distance_closed_form():
    x, y = np.array([0.0, 0.0]), np.array([0.4, 0.2])
    r = np.linalg.norm(y)
    assert abs(distance(hyperbolic2(), x, y) - 2 * np.arctanh(r)) < 1e-8


def test_sphere_distance_closed_form():
    x, y = np.array([0.2, -0.1]), np.array([-0.5, 0.9])

    def to_sphere(p):
        r2 = p @ p
        return np.array([2 * p[0], 2 * p[1], r2 - 1]) / (1 + r2)

    ang = np.arccos(np.clip(to_sphere(x) @ to_sphere(y), -1, 1))
    assert abs(distance(sphere2(), x, y) - ang) < 1e-8


def test_grushin_distance_across_singular_line():
    sol = solve_geodesic(grushin(), np.array([-0.5, 0.0]), np.array([0.5, 0.0]))
    assert abs(sol.distance - 1.0) < 1e-8


def test_sphere_conjugate_time_closed_form():
    L = 3.5
    t = first_conjugate_time(sphere2(), equator(L))
    assert abs(t - np.pi / L) < 1e-4


def test_classify_regular_and_conjugate_cases():
    rep = classify(sphere2(), equator(2.0))
    assert rep.outside_cut_locus and rep.first_conjugate_time is None
    assert abs(rep.min_singular_J1 - np.sin(2.0) / 2.0) < 1e-8
    rep = classify(sphere2(), equator(np.pi))
    assert not rep.outside_cut_locus
    assert abs(rep.first_conjugate_time - 1.0) < 1e-4


def test_deterministic_given_seed():
    opts = ShootingOptions(seed=5)
    a = solve_geodesic(heisenberg(), np.zeros(3), np.array([1.0, 0.3, 0.1]), opts)
    b = solve_geodesic(heisenberg(), np.zeros(3), np.array([1.0, 0.3, 0.1]), opts)
    assert np.array_equal(a.lambda0.p, b.lambda0.p)
