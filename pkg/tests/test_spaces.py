import numpy as np
import pytest

from ugfem.quadrature import triangle_rule
from ugfem.spaces import (
    Field,
    edge_trace,
    l2_project_edge,
    l2_project_volume,
    legendre_values,
    make_space,
)

TQ = np.linspace(0.07, 0.93, 6)


def _phys(mesh, eids, ref):
    J = mesh.jacobians()[eids]
    v0 = mesh.vertices[mesh.triangles[eids, 0]]
    return v0[:, None, :] + np.einsum("eab,qb->eqa", J, ref)


def test_dimension_counts(mesh1, mesh2):
    assert make_space("P_disc_scalar", 0, mesh1).dim == 2
    assert make_space("P_disc_scalar", 2, mesh2).dim == 8 * 6
    assert make_space("Edge_scalar", 0, mesh1, zero_boundary=True).dim == 1
    assert make_space("RT_conf", 0, mesh1).dim == 5
    assert make_space("RT_conf", 1, mesh2).dim == 16 * 2 + 8 * 2
    assert make_space("BDM_conf", 1, mesh2).dim == 16 * 2
    assert make_space("BDM_conf", 2, mesh2).dim == 16 * 3 + 8 * 3
    assert make_space("CR_nonconforming", 0, mesh2).dim == 16
    # Lagrange P2 on n=2: 9 vertices + 16 edges
    assert make_space("Lagrange_cont", 2, mesh2).dim == 25
    nbnd_v = int(mesh2.boundary_vertices.sum())
    nbnd_e = int(mesh2.boundary_edges.sum())
    assert (
        make_space("Lagrange_cont", 2, mesh2, zero_boundary=True).dim
        == 25 - nbnd_v - nbnd_e
    )


def test_family_degree_compat(mesh2):
    with pytest.raises(ValueError):
        make_space("Lagrange_cont", 0, mesh2)
    with pytest.raises(ValueError):
        make_space("CR_nonconforming", 1, mesh2)
    with pytest.raises(ValueError):
        make_space("BDM_conf", 0, mesh2)
    with pytest.raises(ValueError):
        make_space("no_such_family", 1, mesh2)


def test_lagrange_nodal_property(mesh2):
    sp = make_space("Lagrange_cont", 1, mesh2)
    vals = sp.values_at([0], np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]))[0]
    assert np.allclose(vals, np.eye(3), atol=1e-13)


def test_partition_of_unity(mesh2, rng):
    pts = rng.uniform(0.05, 0.3, (5, 2))
    for fam, k in [("Lagrange_cont", 1), ("Lagrange_cont", 3), ("CR_nonconforming", 0)]:
        sp = make_space(fam, k, mesh2)
        vals = sp.values_at(np.arange(mesh2.n_elements), pts)
        assert np.allclose(vals.sum(axis=2), 1.0, atol=1e-12)


def test_rt0_normal_trace(mesh1):
    # defining moments: normal trace is 1/h_e on the DOF's edge, 0 elsewhere
    sp = make_space("RT_conf", 0, mesh1)
    for e in range(mesh1.n_edges):
        sides = [0] if mesh1.boundary_edges[e] else [0, 1]
        for side in sides:
            vals, eids = edge_trace(sp, [e], side, TQ)
            ntr = vals[0] @ mesh1.n_e[e]
            K = int(eids[0])
            for loc in range(3):
                ge = mesh1.element_to_edges[K, loc]
                col = int(np.flatnonzero(sp.cell_dofs[K] == ge)[0])
                expect = 1.0 / mesh1.h_e[ge] if ge == e else 0.0
                assert np.allclose(ntr[:, col], expect, atol=1e-11)


@pytest.mark.parametrize("fam,k", [("RT_conf", 0), ("RT_conf", 1), ("BDM_conf", 1), ("BDM_conf", 2)])
def test_hdiv_single_valued_normal_trace(mesh_unstructured, fam, k, rng):
    m = mesh_unstructured
    sp = make_space(fam, k, m)
    f = Field(sp, rng.standard_normal(sp.dim))
    ie = m.interior_edges
    jump = np.einsum(
        "eqa,ea->eq", f.edge_trace(ie, 0, TQ) - f.edge_trace(ie, 1, TQ), m.n_e[ie]
    )
    assert np.abs(jump).max() <= 1e-12 * np.abs(f.coefs).max() * 10


@pytest.mark.parametrize("k", [1, 2, 3])
def test_lagrange_continuity(mesh_unstructured, k, rng):
    m = mesh_unstructured
    sp = make_space("Lagrange_cont", k, m)
    f = Field(sp, rng.standard_normal(sp.dim))
    ie = m.interior_edges
    jump = f.edge_trace(ie, 0, TQ) - f.edge_trace(ie, 1, TQ)
    assert np.abs(jump).max() <= 1e-12 * np.abs(f.coefs).max() * 10


CASES = [
    ("P_disc_scalar", 2, lambda x: 1 + 2 * x[:, 0] ** 2 - x[:, 0] * x[:, 1], False),
    ("P_disc_vector", 1, lambda x: np.stack([1 + x[:, 1], x[:, 0] - 2 * x[:, 1]], 1), True),
    ("RT_disc", 0, lambda x: np.stack([1 + 2 * x[:, 0], -1 + 2 * x[:, 1]], 1), True),
    (
        "RT_conf",
        1,
        lambda x: np.stack(
            [x[:, 0] * (x[:, 0] + 2 * x[:, 1]), x[:, 1] * (x[:, 0] + 2 * x[:, 1])], 1
        ),
        True,
    ),
    ("BDM_conf", 2, lambda x: np.stack([x[:, 0] ** 2, 1 + x[:, 0] * x[:, 1]], 1), True),
    ("Lagrange_cont", 3, lambda x: x[:, 0] ** 3 - x[:, 1] ** 2 + 2, False),
    ("CR_nonconforming", 0, lambda x: 1 + 2 * x[:, 0] - x[:, 1], False),
]


@pytest.mark.parametrize("fam,k,target,vector", CASES)
def test_polynomial_reproduction(mesh_unstructured, fam, k, target, vector, rng):
    m = mesh_unstructured
    sp = make_space(fam, k, m)
    f = Field(sp, l2_project_volume(sp, target))
    pts = rng.uniform(0.05, 0.28, (5, 2))
    eids = np.arange(m.n_elements)
    got = f.values(eids, pts)
    want = np.asarray(target(_phys(m, eids, pts).reshape(-1, 2))).reshape(got.shape)
    assert np.abs(got - want).max() < 1e-9


def test_projection_idempotent_and_exact(mesh2, rng):
    sp = make_space("P_disc_scalar", 2, mesh2)
    coefs = rng.standard_normal(sp.dim)
    f = Field(sp, coefs)

    def as_function(x):
        # evaluate the discrete field pointwise through its own elements
        out = np.empty(len(x))
        ref = np.zeros((1, 2))
        J = mesh2.inverse_jacobians()
        v0 = mesh2.vertices[mesh2.triangles[:, 0]]
        for i, xi in enumerate(x):
            for K in range(mesh2.n_elements):
                r = J[K] @ (xi - v0[K])
                if r.min() > -1e-12 and r.sum() < 1 + 1e-12:
                    out[i] = f.values([K], r[None, :])[0, 0]
                    break
        return out

    again = l2_project_volume(sp, as_function)
    assert np.abs(again - coefs).max() < 1e-9


def test_project_mean_of_x(mesh1):
    # P0 projection of x is the cell centroid coordinate; on the lower-left
    # reference-style triangle that is 1/3.
    sp = make_space("P_disc_scalar", 0, mesh1)
    co = l2_project_volume(sp, lambda x: x[:, 0])
    f = Field(sp, co)
    means = f.values(np.arange(2), np.array([[1 / 3, 1 / 3]]))[:, 0]
    cents = mesh1.vertices[mesh1.triangles].mean(axis=1)[:, 0]
    assert np.allclose(np.sort(means), np.sort(cents), atol=1e-13)


def test_projection_galerkin_orthogonality(mesh2, sine):
    sp = make_space("P_disc_scalar", 1, mesh2)
    co = l2_project_volume(sp, sine.u, quad_degree=12)
    rule = triangle_rule(12)
    eids = np.arange(mesh2.n_elements)
    vals = sp.values_at(eids, rule.points)
    det = 2.0 * mesh2.signed_areas()
    J = mesh2.jacobians()
    v0 = mesh2.vertices[mesh2.triangles[:, 0]]
    phys = v0[:, None, :] + np.einsum("eab,qb->eqa", J, rule.points)
    fv = sine.u(phys.reshape(-1, 2)).reshape(phys.shape[:2])
    resid = fv - np.einsum("eql,el->eq", vals, co[sp.cell_dofs])
    orth = np.einsum("eql,eq,q,e->el", vals, resid, rule.weights, det)
    assert np.abs(orth).max() < 1e-12


def test_projection_convergence_order(sine):
    # L2 projection of the sine case onto P2 converges at order 3
    from ugfem.mesh import build_uniform

    errs, hs = [], []
    for n in (2, 4, 8):
        m = build_uniform(n)
        sp = make_space("P_disc_scalar", 2, m)
        co = l2_project_volume(sp, sine.u, quad_degree=12)
        f = Field(sp, co)
        rule = triangle_rule(12)
        eids = np.arange(m.n_elements)
        phys = _phys(m, eids, rule.points)
        fv = sine.u(phys.reshape(-1, 2)).reshape(phys.shape[:2])
        det = 2.0 * m.signed_areas()
        err = np.sqrt(
            np.einsum(
                "eq,q,e->", (fv - f.values(eids, rule.points)) ** 2, rule.weights, det
            )
        )
        errs.append(err)
        hs.append(m.h)
    rate = np.log(errs[1] / errs[2]) / np.log(hs[1] / hs[2])
    assert abs(rate - 3.0) < 0.2


def test_edge_projection(mesh2):
    es = make_space("Edge_scalar", 2, mesh2)
    c1 = l2_project_edge(es, lambda t: 3 * t**2 - t + 1, 4)
    # exact for a P2 polynomial: re-projection is the identity
    c2 = l2_project_edge(es, lambda t: legendre_values(2, t) @ c1, 4)
    assert np.allclose(c1, c2, atol=1e-13)
    # projecting x (the edge parameter) onto P0 gives the midpoint mean
    es0 = make_space("Edge_scalar", 0, mesh2)
    c = l2_project_edge(es0, lambda t: t, 4)
    assert np.allclose(c, [0.5], atol=1e-14)


def test_inclusions_grad_and_div(mesh_unstructured, rng):
    # grad V^{k+1} in Q^k and div Q^{k,RT} = V^k, div Q^{k+1} in V^k:
    # transfer the derivative field and compare pointwise.
    m = mesh_unstructured
    pts = rng.uniform(0.1, 0.25, (4, 2))
    eids = np.arange(m.n_elements)
    for k in (0, 1):
        V1 = make_space("P_disc_scalar", k + 1, m)
        Qk = make_space("P_disc_vector", k, m)
        u = Field(V1, rng.standard_normal(V1.dim))
        gu = u.gradients(eids, pts)
        # project grad u onto Q^k by local L2 and compare pointwise
        co = _project_derivative(u, Qk, "grad")
        got = Field(Qk, co).values(eids, pts)
        assert np.abs(got - gu).max() < 1e-10 * max(1, np.abs(gu).max())

        QRT = make_space("RT_disc", k, m)
        Vk = make_space("P_disc_scalar", k, m)
        p = Field(QRT, rng.standard_normal(QRT.dim))
        dv = p.divergences(eids, pts)
        co = _project_derivative(p, Vk, "div")
        got = Field(Vk, co).values(eids, pts)
        assert np.abs(got - dv).max() < 1e-10 * max(1, np.abs(dv).max())

        Q1 = make_space("P_disc_vector", k + 1, m)
        p = Field(Q1, rng.standard_normal(Q1.dim))
        dv = p.divergences(eids, pts)
        co = _project_derivative(p, Vk, "div")
        got = Field(Vk, co).values(eids, pts)
        assert np.abs(got - dv).max() < 1e-10 * max(1, np.abs(dv).max())


def _project_derivative(field, target, which):
    m = target.mesh
    rule = triangle_rule(min(2 * (field.space.degree + target.degree) + 2, 20))
    det = 2.0 * m.signed_areas()
    eids = np.arange(m.n_elements)
    tv = target.values_at(eids, rule.points)
    src = field.gradients(eids, rule.points) if which == "grad" else field.divergences(
        eids, rule.points
    )
    if target.is_vector:
        mass = np.einsum("eqla,eqma,q->elm", tv, tv, rule.weights)
        rhs = np.einsum("eqla,eqa,q->el", tv, src, rule.weights)
    else:
        mass = np.einsum("eql,eqm,q->elm", tv, tv, rule.weights)
        rhs = np.einsum("eql,eq,q->el", tv, src, rule.weights)
    co = np.linalg.solve(mass * det[:, None, None], (rhs * det[:, None])[..., None])[
        ..., 0
    ]
    out = np.zeros(target.dim)
    out[target.cell_dofs] = co
    return out


def test_trace_inclusions(mesh2, rng):
    # {Q_h}|_e subset Q_hat(e) and {V_h}|_e subset V_hat(e) for the
    # configured pairs: the Legendre projection reproduces the averages.
    k = 1
    Q = make_space("P_disc_vector", k, mesh2)
    V = make_space("P_disc_scalar", k, mesh2)
    p = Field(Q, rng.standard_normal(Q.dim))
    u = Field(V, rng.standard_normal(V.dim))
    from ugfem.quadrature import edge_rule

    r = edge_rule(2 * k + 4)
    interior = mesh2.interior_edges
    for field, normal in ((p, True), (u, False)):
        tp = field.edge_trace(interior, 0, r.points)
        tm = field.edge_trace(interior, 1, r.points)
        if normal:
            avg = 0.5 * np.einsum(
                "eqa,ea->eq", tp + tm, mesh2.n_e[interior]
            )
        else:
            avg = 0.5 * (tp + tm)
        leg = legendre_values(k, r.points)
        gram = 1.0 / (2.0 * np.arange(k + 1) + 1.0)
        coef = np.einsum("qm,q,eq->em", leg, r.weights, avg) / gram[None, :]
        back = np.einsum("qm,em->eq", leg, coef)
        assert np.abs(back - avg).max() < 1e-12 * max(1, np.abs(avg).max())


def test_eval_basis_api(mesh2):
    sp = make_space("P_disc_scalar", 1, mesh2)
    vals, grads = sp.eval_basis(0, np.array([[0.2, 0.3]]))
    assert vals.shape == (1, 3) and grads.shape == (1, 3, 2)
    rt = make_space("RT_disc", 0, mesh2)
    vals, divs = rt.eval_basis(0, np.array([[0.2, 0.3]]))
    assert vals.shape == (1, 3, 2) and divs.shape == (1, 3)
