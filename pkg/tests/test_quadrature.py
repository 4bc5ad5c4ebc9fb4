from math import factorial

import numpy as np
import pytest

from ugfem.quadrature import (
    UnsupportedDegreeError,
    edge_rule,
    push_forward,
    triangle_rule,
)


def test_triangle_area():
    r = triangle_rule(0)
    assert abs(r.weights.sum() - 0.5) < 1e-14


def test_triangle_x_squared():
    r = triangle_rule(2)
    val = np.sum(r.weights * r.points[:, 0] ** 2)
    assert abs(val - 1.0 / 12.0) < 1e-14


@pytest.mark.parametrize("degree", list(range(0, 21)))
def test_triangle_monomial_exactness(degree):
    # oracle: int_T x^i y^j = i! j! / (i + j + 2)!
    r = triangle_rule(degree)
    assert abs(r.weights.sum() - 0.5) < 1e-14
    for i in range(degree + 1):
        for j in range(degree + 1 - i):
            val = np.sum(r.weights * r.points[:, 0] ** i * r.points[:, 1] ** j)
            exact = factorial(i) * factorial(j) / factorial(i + j + 2)
            assert abs(val - exact) <= 1e-13 * abs(exact) + 1e-14


def test_edge_basics():
    r = edge_rule(3)
    assert abs(np.sum(r.weights) - 1.0) < 1e-14
    assert abs(np.sum(r.weights * r.points**3) - 0.25) < 1e-14
    assert r.n_points == 2


@pytest.mark.parametrize("degree", list(range(0, 21)))
def test_edge_monomial_exactness(degree):
    r = edge_rule(degree)
    for m in range(degree + 1):
        val = np.sum(r.weights * r.points**m)
        assert abs(val - 1.0 / (m + 1)) <= 1e-13 / (m + 1) + 1e-14


def test_degree_cap():
    with pytest.raises(UnsupportedDegreeError):
        triangle_rule(21)
    with pytest.raises(UnsupportedDegreeError):
        edge_rule(-1)


def test_push_forward_identity():
    r = triangle_rule(4)
    pts, w = push_forward(r, [[0, 0], [1, 0], [0, 1]])
    assert np.allclose(pts, r.points)
    assert np.allclose(w, r.weights)


def test_push_forward_scalings():
    r = triangle_rule(2)
    _, w = push_forward(r, [[0.2, 0.1], [0.9, 0.3], [0.4, 1.0]])
    area = 0.5 * abs((0.9 - 0.2) * (1.0 - 0.1) - (0.4 - 0.2) * (0.3 - 0.1))
    assert abs(w.sum() - area) < 1e-14
    e = edge_rule(2)
    _, w = push_forward(e, [[0, 0], [3, 4]])
    assert abs(w.sum() - 5.0) < 1e-14


def test_push_forward_degenerate():
    with pytest.raises(ValueError):
        push_forward(triangle_rule(1), [[0, 0], [1, 0], [2, 0]])
    with pytest.raises(ValueError):
        push_forward(edge_rule(1), [[1, 1], [1, 1]])


def test_rules_immutable():
    r = triangle_rule(2)
    with pytest.raises(ValueError):
        r.weights[0] = 0.0
