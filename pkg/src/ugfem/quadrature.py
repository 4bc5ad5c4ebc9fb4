"""Exact-degree quadrature on the reference triangle and reference edge.

The reference triangle is {(x, y): x >= 0, y >= 0, x + y <= 1}; the
reference edge is the interval [0, 1].  Triangle rules are collapsed
Gauss-Jacobi product rules, averaged over the three rotations of the
triangle so the point set is cyclically symmetric.  All rules integrate
polynomials up to their stated degree exactly.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import roots_jacobi, roots_legendre

MAX_DEGREE = 20


class UnsupportedDegreeError(ValueError):
    """Requested exactness degree is outside the supported range."""


@dataclass(frozen=True)
class QuadratureRule:
    """Points and weights on a reference domain.

    ``points`` has shape (n, 2) for triangle rules and (n,) for edge
    rules.  Weights sum to the reference measure (1/2 or 1).
    """

    points: np.ndarray
    weights: np.ndarray
    exactness_degree: int
    domain: str  # "triangle" or "edge"

    def __post_init__(self):
        self.points.setflags(write=False)
        self.weights.setflags(write=False)

    @property
    def n_points(self):
        return self.weights.shape[0]


def _check_degree(degree):
    if not 0 <= int(degree) <= MAX_DEGREE:
        raise UnsupportedDegreeError(
            f"quadrature degree must be in [0, {MAX_DEGREE}], got {degree}"
        )
    return int(degree)


def triangle_rule(degree):
    """Rule on the reference triangle, exact for total degree <= ``degree``.

    Built by the Duffy collapse of a Gauss-Jacobi(1,0) x Gauss-Legendre
    product rule, then symmetrized over the three cyclic rotations of the
    triangle (which preserves polynomial exactness).
    """
    degree = _check_degree(degree)
    n = degree // 2 + 1
    # Jacobi weight (1-x) absorbs the Duffy Jacobian.
    xj, wj = roots_jacobi(n, 1.0, 0.0)
    xj = 0.5 * (xj + 1.0)
    wj = wj / 4.0  # [-1,1] -> [0,1] plus the (1-x) weight scaling
    xl, wl = roots_legendre(n)
    xl = 0.5 * (xl + 1.0)
    wl = 0.5 * wl

    x = np.repeat(xj, n)
    eta = np.tile(xl, n)
    y = eta * (1.0 - x)
    w = np.repeat(wj, n) * np.tile(wl, n)

    # Cyclic symmetrization: (x, y) -> (y, 1-x-y) -> (1-x-y, x).
    pts = np.concatenate(
        [
            np.stack([x, y], axis=1),
            np.stack([y, 1.0 - x - y], axis=1),
            np.stack([1.0 - x - y, x], axis=1),
        ]
    )
    wts = np.concatenate([w, w, w]) / 3.0
    return QuadratureRule(pts, wts, degree, "triangle")


def edge_rule(degree):
    """Gauss-Legendre rule on [0, 1], exact for degree <= ``degree``."""
    degree = _check_degree(degree)
    n = degree // 2 + 1
    x, w = roots_legendre(n)
    return QuadratureRule(0.5 * (x + 1.0), 0.5 * w, degree, "edge")


def push_forward(rule, geometry):
    """Map a reference rule to a physical cell or edge.

    Parameters
    ----------
    rule : QuadratureRule
    geometry : array
        Triangle rules take the 3x2 vertex array (counterclockwise);
        edge rules take the 2x2 endpoint array.

    Returns
    -------
    points, weights : physical quadrature points (n, 2) and weights
        scaled by the affine Jacobian (2*area resp. length).
    """
    geometry = np.asarray(geometry, dtype=float)
    if rule.domain == "triangle":
        if geometry.shape != (3, 2):
            raise ValueError("triangle geometry must be a 3x2 vertex array")
        v0, v1, v2 = geometry
        jac = np.stack([v1 - v0, v2 - v0], axis=1)
        det = jac[0, 0] * jac[1, 1] - jac[0, 1] * jac[1, 0]
        if det <= 0.0:
            raise ValueError("degenerate or clockwise triangle")
        pts = v0 + rule.points @ jac.T
        return pts, rule.weights * det
    if rule.domain == "edge":
        if geometry.shape != (2, 2):
            raise ValueError("edge geometry must be a 2x2 endpoint array")
        a, b = geometry
        length = float(np.hypot(*(b - a)))
        if length <= 0.0:
            raise ValueError("degenerate edge")
        pts = a + rule.points[:, None] * (b - a)
        return pts, rule.weights * length
    raise ValueError(f"unknown rule domain {rule.domain!r}")
