import numpy as np
import pytest

from ugfem.mesh import (
    MeshError,
    MeshParseError,
    _min_angle_deg,
    build_uniform,
    build_unstructured,
    load_mesh,
)
from ugfem.quadrature import edge_rule, push_forward


def test_uniform_counts(mesh1):
    assert mesh1.n_elements == 2
    assert mesh1.n_edges == 5
    assert mesh1.boundary_edges.sum() == 4
    assert len(mesh1.interior_edges) == 1


def test_uniform_n4_geometry(mesh4):
    assert mesh4.n_elements == 32
    assert np.allclose(mesh4.h_K, np.sqrt(2.0) / 4.0)


def test_uniform_n2_topology_by_hand(mesh2):
    # Enumerate the 8-triangle mesh: each cell's diagonal is interior with
    # exactly two incident elements (the cell's own pair).
    diagonals = 0
    for e in range(mesh2.n_edges):
        a, b = mesh2.edges[e]
        pa, pb = mesh2.vertices[a], mesh2.vertices[b]
        if not np.isclose(abs(pa[0] - pb[0]), 0.5) or not np.isclose(
            abs(pa[1] - pb[1]), 0.5
        ):
            continue
        diagonals += 1
        ks = mesh2.edge_to_elements[e]
        assert (ks >= 0).all()
        # the two triangles of one cell are consecutive in construction order
        assert abs(int(ks[0]) - int(ks[1])) == 1
    assert diagonals == 4
    assert mesh2.n_edges == 16
    assert (~mesh2.boundary_edges).sum() == 8


def test_invariants_validate(mesh4, mesh_unstructured):
    mesh4.validate(degree=6)
    mesh_unstructured.validate(degree=4)


def test_orientation_signs_consistent(mesh4):
    for K in range(mesh4.n_elements):
        for loc in range(3):
            e = mesh4.element_to_edges[K, loc]
            n = mesh4.element_outward_normal(K, e)
            assert np.isclose(np.linalg.norm(n), 1.0)
            sgn = mesh4.element_edge_signs[K, loc]
            assert np.allclose(n, sgn * mesh4.n_e[e])


def test_polygon_closure(mesh_unstructured):
    m = mesh_unstructured
    total = np.zeros((m.n_elements, 2))
    for loc in range(3):
        e = m.element_to_edges[:, loc]
        total += m.h_e[e, None] * m.element_edge_signs[:, loc][:, None] * m.n_e[e]
    assert np.abs(total).max() < 1e-12


def test_rejects_clockwise():
    with pytest.raises(MeshError):
        build_uniform(1).__class__(
            np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]),
            np.array([[0, 2, 1]]),
        )


def test_unstructured_element_count_scale():
    target_h = 2.0 / np.sqrt(220.0)
    m = build_unstructured(target_h, seed=3)
    assert 150 <= m.n_elements <= 330
    assert 0.5 * target_h <= m.h <= 2.0 * target_h


def test_unstructured_determinism():
    a = build_unstructured(0.13, seed=5)
    b = build_unstructured(0.13, seed=5)
    assert np.array_equal(a.vertices, b.vertices)
    assert np.array_equal(a.triangles, b.triangles)
    c = build_unstructured(0.13, seed=6)
    assert not np.array_equal(a.vertices, c.vertices)


def test_unstructured_min_angle():
    for seed in (0, 1, 2):
        m = build_unstructured(0.2, seed=seed)
        assert _min_angle_deg(m) >= 20.0


def test_unstructured_bad_target():
    with pytest.raises(ValueError):
        build_unstructured(0.0)
    with pytest.raises(ValueError):
        build_unstructured(1.5)


NODE_TEXT = "4 2 0 1\n1 0 0\n2 1 0\n3 1 1\n4 0 1\n"
ELE_TEXT = "2 3 0\n1 1 2 3\n2 1 3 4\n"


def test_load_round_trip(mesh1):
    m = load_mesh(NODE_TEXT, ELE_TEXT)
    assert m.n_elements == mesh1.n_elements
    assert m.n_edges == mesh1.n_edges
    assert np.allclose(np.sort(m.vertices, axis=0), np.sort(mesh1.vertices, axis=0))


def test_load_orientation_fix():
    ele = "2 3 0\n1 1 3 2\n2 1 3 4\n"  # first triangle clockwise
    with pytest.warns(UserWarning, match="orientation"):
        m = load_mesh(NODE_TEXT, ele)
    assert np.all(m.signed_areas() > 0)


def test_load_truncated_names_line():
    ele = "2 3 0\n1 1 2 3\n2 1 3\n"
    with pytest.raises(MeshParseError, match="line 3"):
        load_mesh(NODE_TEXT, ele)


def test_load_inconsistent_counts():
    with pytest.raises(MeshParseError):
        load_mesh("5 2 0 1\n1 0 0\n2 1 0\n3 1 1\n4 0 1\n", ELE_TEXT)


def test_load_repeated_triangle():
    ele = "2 3 0\n1 1 2 3\n2 2 3 1\n"
    with pytest.raises(MeshParseError, match="repeated"):
        load_mesh(NODE_TEXT, ele)


def test_divergence_theorem_quadrature(mesh2):
    # int_K div q = int_dK q . n_K for a polynomial field, per element
    rng = np.random.default_rng(0)
    c = rng.standard_normal(6)
    q = lambda x: np.stack(
        [c[0] + c[1] * x[..., 0] + c[2] * x[..., 1] ** 2,
         c[3] + c[4] * x[..., 1] + c[5] * x[..., 0] * x[..., 1]],
        axis=-1,
    )
    div_q = lambda x: c[1] + c[4] + c[5] * x[..., 0]
    from ugfem.quadrature import triangle_rule

    vr, er = triangle_rule(6), edge_rule(6)
    for K in range(mesh2.n_elements):
        pts, w = push_forward(vr, mesh2.vertices[mesh2.triangles[K]])
        lhs = np.sum(w * div_q(pts))
        rhs = 0.0
        for loc in range(3):
            e = mesh2.element_to_edges[K, loc]
            epts, ew = push_forward(er, mesh2.vertices[mesh2.edges[e]])
            nK = mesh2.element_edge_signs[K, loc] * mesh2.n_e[e]
            rhs += np.sum(ew * (q(epts) @ nK))
        assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(lhs))


def test_jump_telescoping_piecewise_constant(mesh4):
    # For single-valued w on edges, sum_K <w, n_K-component> telescopes:
    # the identity at the topology level with w piecewise constant.
    rng = np.random.default_rng(1)
    w_edge = rng.standard_normal(mesh4.n_edges)
    total = np.zeros(2)
    interior = ~mesh4.boundary_edges
    for K in range(mesh4.n_elements):
        for loc in range(3):
            e = mesh4.element_to_edges[K, loc]
            if not interior[e]:
                continue
            nK = mesh4.element_edge_signs[K, loc] * mesh4.n_e[e]
            total += w_edge[e] * mesh4.h_e[e] * nK
    assert np.abs(total).max() < 1e-12
