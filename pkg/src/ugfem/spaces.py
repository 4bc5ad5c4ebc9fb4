"""Local bases, global DOF maps, and L2 projections for all discrete spaces.

Families
--------
P_disc_scalar / P_disc_vector : broken P_k, orthonormal modal basis
RT_disc                       : element-wise Raviart-Thomas shapes (broken)
Lagrange_cont                 : H1-conforming nodal P_k (optional zero trace)
CR_nonconforming              : Crouzeix-Raviart (edge-midpoint continuity)
RT_conf / BDM_conf            : H(div)-conforming, edge-moment DOFs
Edge_scalar                   : P_k(e) per mesh edge (optional zero boundary)
Edge_normal_vector            : P_k(e) * n_e per mesh edge

H(div) bases are duals of globally defined functionals (edge normal
moments in the global edge parameterization plus per-element bubble
moments), so shared-edge DOFs are single-valued with no orientation
bookkeeping.  Constrained DOFs (zero-boundary spaces) appear as -1 in
the dof maps and are skipped during assembly.
"""

import numpy as np
from numpy.polynomial.legendre import legvander
from scipy import sparse
from scipy.linalg import cho_factor, cho_solve, cholesky, null_space
from scipy.sparse.linalg import spsolve

from .quadrature import edge_rule, push_forward, triangle_rule

VOLUME_FAMILIES = (
    "P_disc_scalar",
    "P_disc_vector",
    "RT_disc",
    "Lagrange_cont",
    "CR_nonconforming",
    "RT_conf",
    "BDM_conf",
)
EDGE_FAMILIES = ("Edge_scalar", "Edge_normal_vector")


def _tri_dim(k):
    return (k + 1) * (k + 2) // 2 if k >= 0 else 0


def _graded_exponents(k):
    return [(d - j, j) for d in range(k + 1) for j in range(d + 1)]


def _mono_values(exps, pts):
    pts = np.asarray(pts, dtype=float)
    x, y = pts[..., 0], pts[..., 1]
    if not exps:
        return np.zeros(x.shape + (0,))
    return np.stack([x**i * y**j for i, j in exps], axis=-1)


def _mono_gradients(exps, pts):
    pts = np.asarray(pts, dtype=float)
    x, y = pts[..., 0], pts[..., 1]
    if not exps:
        return np.zeros(x.shape + (0, 2))
    gx, gy = [], []
    for i, j in exps:
        gx.append(i * x ** max(i - 1, 0) * y**j if i else np.zeros_like(x))
        gy.append(j * x**i * y ** max(j - 1, 0) if j else np.zeros_like(x))
    return np.stack([np.stack(gx, -1), np.stack(gy, -1)], axis=-1)


def legendre_values(max_degree, t):
    """Shifted Legendre P_m(2t-1), m = 0..max_degree, at t in [0,1]."""
    return legvander(2.0 * np.asarray(t, dtype=float) - 1.0, max_degree)


def _orthonormal_modal(k):
    """Coefficients turning graded monomials into an L2(T)-orthonormal set."""
    exps = _graded_exponents(k)
    rule = triangle_rule(min(2 * k, 20) if k else 0)
    V = _mono_values(exps, rule.points)
    G = V.T @ (rule.weights[:, None] * V)
    L = cholesky(G, lower=True)
    R = np.linalg.inv(L).T  # mono @ R is orthonormal
    return exps, R


def _lagrange_lattice(k):
    """Reference lattice nodes for P_k, grouped by (vertex, edge, interior).

    Local edge i is opposite local vertex i; edge nodes are listed in the
    direction of increasing local endpoint order used by ``Mesh`` edges.
    """
    verts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    nodes = [verts[0], verts[1], verts[2]]
    edge_locals = [(1, 2), (2, 0), (0, 1)]
    edge_slots = []
    for a, b in edge_locals:
        slots = []
        for i in range(1, k):
            slots.append(len(nodes))
            nodes.append(verts[a] + (i / k) * (verts[b] - verts[a]))
        edge_slots.append(slots)
    interior_slots = []
    for i in range(1, k):
        for j in range(1, k - i):
            interior_slots.append(len(nodes))
            nodes.append(np.array([i / k, j / k]))
    return np.array(nodes), edge_locals, edge_slots, interior_slots


class FESpace:
    """A discrete space: family, degree, mesh, and a global DOF map."""

    def __init__(self, family, degree, mesh, zero_boundary=False):
        self.family = family
        self.degree = int(degree)
        self.mesh = mesh
        self.zero_boundary = bool(zero_boundary)
        self.is_vector = family in ("P_disc_vector", "RT_disc", "RT_conf", "BDM_conf")
        self.is_edge_space = family in EDGE_FAMILIES
        self._build()

    def __repr__(self):
        bc = ", zero_boundary" if self.zero_boundary else ""
        return f"FESpace({self.family}, k={self.degree}{bc}, dim={self.dim})"

    # -- construction -------------------------------------------------------

    def _build(self):
        k, mesh = self.degree, self.mesh
        fam = self.family
        if fam in ("P_disc_scalar", "P_disc_vector"):
            if k < 0:
                raise ValueError("degree must be >= 0")
            self._exps, self._modal = _orthonormal_modal(k)
            nsc = _tri_dim(k)
            self.n_local = nsc if fam == "P_disc_scalar" else 2 * nsc
            self.cell_dofs = (
                np.arange(mesh.n_elements * self.n_local)
                .reshape(mesh.n_elements, self.n_local)
            )
            self.dim = mesh.n_elements * self.n_local
        elif fam == "RT_disc":
            if k < 0:
                raise ValueError("degree must be >= 0")
            self._build_rt_span(k)
            self.n_local = self._nspan
            self._coef = None  # identity: modal Piola basis
            self.cell_dofs = (
                np.arange(mesh.n_elements * self.n_local)
                .reshape(mesh.n_elements, self.n_local)
            )
            self.dim = mesh.n_elements * self.n_local
        elif fam == "Lagrange_cont":
            if k < 1:
                raise ValueError("Lagrange degree must be >= 1")
            self._build_lagrange(k)
        elif fam == "CR_nonconforming":
            if k != 0:
                raise ValueError("the CR family is the k=0 nonconforming space")
            self._build_cr()
        elif fam in ("RT_conf", "BDM_conf"):
            if fam == "RT_conf" and k < 0:
                raise ValueError("RT degree must be >= 0")
            if fam == "BDM_conf" and k < 1:
                raise ValueError("BDM degree must be >= 1")
            self._build_hdiv_conforming()
        elif fam in EDGE_FAMILIES:
            if k < 0:
                raise ValueError("degree must be >= 0")
            self._build_edge_space()
        else:
            raise ValueError(f"unknown family {fam!r}")

    def _build_rt_span(self, k):
        """Reference RT_k span: P_k^2 plus x * homogeneous P_k, orthonormalized."""
        exps = _graded_exponents(k)
        homog = [(k - j, j) for j in range(k + 1)]
        self._rt_scalar_exps = exps
        self._rt_homog_exps = homog
        nspan = 2 * len(exps) + len(homog)
        rule = triangle_rule(min(2 * (k + 1), 20))
        vals = self._rt_span_reference(rule.points)
        G = np.einsum("qsa,q,qta->st", vals, rule.weights, vals)
        L = cholesky(G, lower=True)
        self._rt_ortho = np.linalg.inv(L).T
        self._nspan = nspan

    def _rt_span_reference(self, pts):
        """Raw RT span values on the reference triangle: (npts, nspan, 2)."""
        m = _mono_values(self._rt_scalar_exps, pts)
        h = _mono_values(self._rt_homog_exps, pts)
        npts = m.shape[0]
        nm = m.shape[1]
        out = np.zeros((npts, 2 * nm + h.shape[1], 2))
        out[:, :nm, 0] = m
        out[:, nm : 2 * nm, 1] = m
        out[:, 2 * nm :, 0] = pts[:, 0, None] * h
        out[:, 2 * nm :, 1] = pts[:, 1, None] * h
        return out

    def _rt_span_reference_div(self, pts):
        g = _mono_gradients(self._rt_scalar_exps, pts)
        h = _mono_values(self._rt_homog_exps, pts)
        gh = _mono_gradients(self._rt_homog_exps, pts)
        npts, nm = g.shape[0], g.shape[1]
        out = np.zeros((npts, 2 * nm + h.shape[1]))
        out[:, :nm] = g[..., 0]
        out[:, nm : 2 * nm] = g[..., 1]
        out[:, 2 * nm :] = (
            2.0 * h + pts[:, 0, None] * gh[..., 0] + pts[:, 1, None] * gh[..., 1]
        )
        return out

    def _build_lagrange(self, k):
        mesh = self.mesh
        nodes, edge_locals, edge_slots, interior_slots = _lagrange_lattice(k)
        exps = _graded_exponents(k)
        V = _mono_values(exps, nodes)
        self._exps = exps
        self._nodal = np.linalg.inv(V)  # mono @ _nodal is the nodal basis
        self.n_local = len(nodes)

        n_edge_nodes = k - 1
        nv, ne, nt = mesh.n_vertices, mesh.n_edges, mesh.n_elements
        vertex_ids = np.arange(nv)
        edge_base = nv
        cell_base = nv + ne * n_edge_nodes
        n_interior = len(interior_slots)
        dofs = np.zeros((nt, self.n_local), dtype=np.int64)
        dofs[:, :3] = mesh.triangles
        for loc, (a, b) in enumerate(edge_locals):
            e = mesh.element_to_edges[:, loc]
            ga, gb = mesh.triangles[:, a], mesh.triangles[:, b]
            forward = ga == mesh.edges[e, 0]
            for i, slot in enumerate(edge_slots[loc]):
                idx_fwd = edge_base + e * n_edge_nodes + i
                idx_bwd = edge_base + e * n_edge_nodes + (n_edge_nodes - 1 - i)
                dofs[:, slot] = np.where(forward, idx_fwd, idx_bwd)
        for i, slot in enumerate(interior_slots):
            dofs[:, slot] = cell_base + np.arange(nt) * n_interior + i

        total = cell_base + nt * n_interior
        if self.zero_boundary:
            drop = np.zeros(total, dtype=bool)
            drop[vertex_ids[mesh.boundary_vertices]] = True
            for e in np.flatnonzero(mesh.boundary_edges):
                drop[edge_base + e * n_edge_nodes : edge_base + (e + 1) * n_edge_nodes] = True
            renum = np.full(total, -1, dtype=np.int64)
            renum[~drop] = np.arange((~drop).sum())
            dofs = renum[dofs]
            self.dim = int((~drop).sum())
        else:
            self.dim = total
        self.cell_dofs = dofs

    def _build_cr(self):
        mesh = self.mesh
        self._exps = _graded_exponents(1)
        # CR basis in barycentric form 1 - 2*lambda_i; as monomials 1, x, y:
        # lambda = (1-x-y, x, y) for local vertices (0, 1, 2).
        self._nodal = np.array(
            [
                [-1.0, 1.0, 1.0],  # constants
                [2.0, -2.0, 0.0],  # x coefficients
                [2.0, 0.0, -2.0],  # y coefficients
            ]
        )
        self.n_local = 3
        dofs = mesh.element_to_edges.copy()
        if self.zero_boundary:
            renum = np.full(mesh.n_edges, -1, dtype=np.int64)
            keep = ~mesh.boundary_edges
            renum[keep] = np.arange(keep.sum())
            dofs = renum[dofs]
            self.dim = int(keep.sum())
        else:
            self.dim = mesh.n_edges
        self.cell_dofs = dofs

    def _build_hdiv_conforming(self):
        mesh, k = self.mesh, self.degree
        if self.family == "RT_conf":
            self._build_rt_span(k)
            edge_deg = k
        else:
            # BDM_m span is plain P_m^2; reuse the RT machinery with no
            # homogeneous tail.
            exps = _graded_exponents(k)
            self._rt_scalar_exps = exps
            self._rt_homog_exps = []
            self._nspan = 2 * len(exps)
            rule = triangle_rule(min(2 * k, 20) if k else 0)
            vals = self._rt_span_reference(rule.points)
            G = np.einsum("qsa,q,qta->st", vals, rule.weights, vals)
            self._rt_ortho = np.linalg.inv(cholesky(G, lower=True)).T
            edge_deg = k
        nspan = self._nspan
        n_edge_dofs = edge_deg + 1
        n_int = nspan - 3 * n_edge_dofs
        self.edge_moment_degree = edge_deg
        self.n_local = nspan

        nt = mesh.n_elements
        J = mesh.jacobians()
        det = 2.0 * mesh.signed_areas()
        erule = edge_rule(min(2 * (k + 1) + 2, 20))
        tq = erule.points
        leg = legendre_values(edge_deg, tq)  # (nq, n_edge_dofs)

        E = np.zeros((nt, 3 * n_edge_dofs, nspan))
        for loc in range(3):
            e = mesh.element_to_edges[:, loc]
            a, b = mesh.edges[e, 0], mesh.edges[e, 1]
            pa, pb = mesh.vertices[a], mesh.vertices[b]
            phys = pa[:, None, :] + tq[None, :, None] * (pb - pa)[:, None, :]
            vals = self._piola_values_at(np.arange(nt), self._pullback(np.arange(nt), phys))
            normal_tr = np.einsum("eqsa,ea->eqs", vals, mesh.n_e[e])
            blk = np.einsum(
                "eqs,qm,q,e->ems", normal_tr, leg, erule.weights, mesh.h_e[e]
            )
            E[:, loc * n_edge_dofs : (loc + 1) * n_edge_dofs, :] = blk

        vrule = triangle_rule(min(2 * (k + 1), 20))
        span_ref = np.einsum(
            "qsa,st->qta", self._rt_span_reference(vrule.points), self._rt_ortho
        )
        # Piola Gram on K: (1/det) J^T J contracted with the reference span.
        JtJ = np.einsum("eca,ecb->eab", J, J) / det[:, None, None]
        G_span = np.einsum(
            "qsa,eab,qtb,q->est", span_ref, JtJ, span_ref, vrule.weights
        )

        coef = np.zeros((nt, nspan, nspan))
        Vand = np.zeros((nspan, nspan))
        for K in range(nt):
            if n_int:
                bubbles = null_space(E[K])
                if bubbles.shape[1] != n_int:
                    raise RuntimeError(
                        f"unexpected bubble count on element {K}: "
                        f"{bubbles.shape[1]} != {n_int}"
                    )
                Vand[: 3 * n_edge_dofs] = E[K]
                Vand[3 * n_edge_dofs :] = bubbles.T @ G_span[K]
                coef[K] = np.linalg.inv(Vand)
            else:
                coef[K] = np.linalg.inv(E[K])
        self._coef = coef

        ne = mesh.n_edges
        dofs = np.zeros((nt, nspan), dtype=np.int64)
        for loc in range(3):
            e = mesh.element_to_edges[:, loc]
            for m in range(n_edge_dofs):
                dofs[:, loc * n_edge_dofs + m] = e * n_edge_dofs + m
        base = ne * n_edge_dofs
        for i in range(n_int):
            dofs[:, 3 * n_edge_dofs + i] = base + np.arange(nt) * n_int + i
        self.cell_dofs = dofs
        self.dim = base + nt * n_int

    def _build_edge_space(self):
        mesh, k = self.mesh, self.degree
        self.n_local = k + 1
        include = np.ones(mesh.n_edges, dtype=bool)
        if self.zero_boundary:
            include &= ~mesh.boundary_edges
        dofs = np.full((mesh.n_edges, k + 1), -1, dtype=np.int64)
        dofs[include] = np.arange(include.sum() * (k + 1)).reshape(-1, k + 1)
        self.edge_dofs = dofs
        self.included_edges = include
        self.dim = int(include.sum()) * (k + 1)

    # -- evaluation ---------------------------------------------------------

    def _pullback(self, eids, phys_pts):
        """Physical points (nE, nq, 2) to reference coordinates per element."""
        mesh = self.mesh
        v0 = mesh.vertices[mesh.triangles[eids, 0]]
        Jinv = mesh.inverse_jacobians()[eids]
        return np.einsum("eab,eqb->eqa", Jinv, phys_pts - v0[:, None, :])

    def _piola_values_at(self, eids, ref_pts):
        """Orthonormalized reference span Piola-mapped: (nE, nq, nspan, 2)."""
        mesh = self.mesh
        nE, nq = ref_pts.shape[:2]
        flat = ref_pts.reshape(-1, 2)
        span = np.einsum(
            "psa,st->pta", self._rt_span_reference(flat), self._rt_ortho
        ).reshape(nE, nq, self._nspan, 2)
        J = mesh.jacobians()[eids]
        det = 2.0 * mesh.signed_areas()[eids]
        return np.einsum("eab,eqsb->eqsa", J / det[:, None, None], span)

    def _piola_div_at(self, eids, ref_pts):
        mesh = self.mesh
        nE, nq = ref_pts.shape[:2]
        flat = ref_pts.reshape(-1, 2)
        div = (self._rt_span_reference_div(flat) @ self._rt_ortho).reshape(
            nE, nq, self._nspan
        )
        det = 2.0 * mesh.signed_areas()[eids]
        return div / det[:, None, None]

    def values_at(self, eids, ref_pts):
        """Local basis values at per-element reference points.

        ``ref_pts`` has shape (nE, nq, 2) (or (nq, 2), broadcast to all
        ``eids``).  Returns (nE, nq, n_local) for scalar families and
        (nE, nq, n_local, 2) for vector families.
        """
        eids = np.atleast_1d(np.asarray(eids, dtype=np.int64))
        ref_pts = np.asarray(ref_pts, dtype=float)
        if ref_pts.ndim == 2:
            ref_pts = np.broadcast_to(ref_pts, (len(eids),) + ref_pts.shape)
        fam = self.family
        if fam in ("P_disc_scalar", "Lagrange_cont", "CR_nonconforming"):
            coef = self._modal if fam == "P_disc_scalar" else self._nodal
            flat = ref_pts.reshape(-1, 2)
            vals = (_mono_values(self._exps, flat) @ coef).reshape(
                len(eids), ref_pts.shape[1], -1
            )
            return vals
        if fam == "P_disc_vector":
            flat = ref_pts.reshape(-1, 2)
            sc = (_mono_values(self._exps, flat) @ self._modal).reshape(
                len(eids), ref_pts.shape[1], -1
            )
            nsc = sc.shape[-1]
            out = np.zeros(sc.shape[:2] + (2 * nsc, 2))
            out[..., :nsc, 0] = sc
            out[..., nsc:, 1] = sc
            return out
        if fam == "RT_disc":
            return self._piola_values_at(eids, ref_pts)
        if fam in ("RT_conf", "BDM_conf"):
            span = self._piola_values_at(eids, ref_pts)
            return np.einsum("eqsa,esl->eqla", span, self._coef[eids])
        raise ValueError(f"values_at undefined for family {self.family!r}")

    def gradients_at(self, eids, ref_pts):
        """Physical gradients of scalar local bases: (nE, nq, n_local, 2)."""
        if self.is_vector or self.is_edge_space:
            raise ValueError("gradients are defined for scalar volume families")
        eids = np.atleast_1d(np.asarray(eids, dtype=np.int64))
        ref_pts = np.asarray(ref_pts, dtype=float)
        if ref_pts.ndim == 2:
            ref_pts = np.broadcast_to(ref_pts, (len(eids),) + ref_pts.shape)
        coef = self._modal if self.family == "P_disc_scalar" else self._nodal
        flat = ref_pts.reshape(-1, 2)
        g = np.einsum(
            "pma,ml->pla", _mono_gradients(self._exps, flat), coef
        ).reshape(len(eids), ref_pts.shape[1], self.n_local, 2)
        Jinv = self.mesh.inverse_jacobians()[eids]
        return np.einsum("eba,eqlb->eqla", Jinv, g)

    def divergences_at(self, eids, ref_pts):
        """Divergence of vector local bases: (nE, nq, n_local)."""
        if not self.is_vector:
            raise ValueError("divergence is defined for vector families")
        eids = np.atleast_1d(np.asarray(eids, dtype=np.int64))
        ref_pts = np.asarray(ref_pts, dtype=float)
        if ref_pts.ndim == 2:
            ref_pts = np.broadcast_to(ref_pts, (len(eids),) + ref_pts.shape)
        if self.family == "P_disc_vector":
            flat = ref_pts.reshape(-1, 2)
            g = np.einsum(
                "pma,ml->pla", _mono_gradients(self._exps, flat), self._modal
            ).reshape(len(eids), ref_pts.shape[1], -1, 2)
            Jinv = self.mesh.inverse_jacobians()[eids]
            phys = np.einsum("eba,eqlb->eqla", Jinv, g)
            nsc = phys.shape[2]
            out = np.zeros((len(eids), ref_pts.shape[1], 2 * nsc))
            out[..., :nsc] = phys[..., 0]
            out[..., nsc:] = phys[..., 1]
            return out
        div = self._piola_div_at(eids, ref_pts)
        if self.family == "RT_disc":
            return div
        return np.einsum("eqs,esl->eql", div, self._coef[eids])

    def eval_basis(self, element, ref_points):
        """Values plus gradients (scalar) or divergences (vector) on one cell."""
        ref_points = np.asarray(ref_points, dtype=float)
        vals = self.values_at([element], ref_points)[0]
        if self.is_vector:
            return vals, self.divergences_at([element], ref_points)[0]
        return vals, self.gradients_at([element], ref_points)[0]

    # -- edge-space evaluation ----------------------------------------------

    def edge_values(self, edge_ids, t):
        """Edge-family basis values at parameters t: (nE, nq, k+1).

        For Edge_normal_vector the scalar coefficients multiply n_e; use
        ``mesh.n_e`` to recover vector values.
        """
        if not self.is_edge_space:
            raise ValueError("edge_values is for edge families")
        t = np.asarray(t, dtype=float)
        vals = legendre_values(self.degree, t)
        return np.broadcast_to(vals, (len(np.atleast_1d(edge_ids)),) + vals.shape)


def make_space(family, degree, mesh, zero_boundary=False):
    """Construct an FESpace; raises ValueError for incompatible inputs."""
    return FESpace(family, degree, mesh, zero_boundary=zero_boundary)


def edge_trace(space, edge_ids, side, t):
    """Trace of a volume space on edges from one side.

    Parameters
    ----------
    space : volume FESpace
    edge_ids : 1d int array of edge indices
    side : 0 for K+, 1 for K-
    t : edge parameters in [0, 1] (global a->b orientation)

    Returns
    -------
    values : (nE, nq, n_local[, 2]) basis traces
    eids : (nE,) adjacent element per edge (must exist on that side)
    """
    mesh = space.mesh
    edge_ids = np.atleast_1d(np.asarray(edge_ids, dtype=np.int64))
    eids = mesh.edge_to_elements[edge_ids, side]
    if np.any(eids < 0):
        raise ValueError("requested trace from a missing element side")
    a = mesh.vertices[mesh.edges[edge_ids, 0]]
    b = mesh.vertices[mesh.edges[edge_ids, 1]]
    t = np.asarray(t, dtype=float)
    phys = a[:, None, :] + t[None, :, None] * (b - a)[:, None, :]
    ref = space._pullback(eids, phys)
    return space.values_at(eids, ref), eids


def l2_project_volume(space, f, quad_degree=None):
    """Global L2 projection of ``f`` onto a volume space.

    ``f`` maps an (n, 2) point array to (n,) scalars or (n, 2) vectors.
    Discontinuous families project element by element; conforming
    families solve the global sparse mass system.
    """
    mesh = space.mesh
    if quad_degree is None:
        quad_degree = min(2 * (space.degree + 1) + 2, 20)
    rule = triangle_rule(quad_degree)
    eids = np.arange(mesh.n_elements)
    vals = space.values_at(eids, rule.points)
    J = mesh.jacobians()
    v0 = mesh.vertices[mesh.triangles[:, 0]]
    phys = v0[:, None, :] + np.einsum("eab,qb->eqa", J, rule.points)
    det = 2.0 * mesh.signed_areas()
    fv = np.asarray(f(phys.reshape(-1, 2))).reshape(
        phys.shape[:2] + ((2,) if space.is_vector else ())
    )
    if space.is_vector:
        local_mass = np.einsum("eqla,q,eqma->elm", vals, rule.weights, vals)
        local_rhs = np.einsum("eqla,q,eqa->el", vals, rule.weights, fv)
    else:
        local_mass = np.einsum("eql,q,eqm->elm", vals, rule.weights, vals)
        local_rhs = np.einsum("eql,q,eq->el", vals, rule.weights, fv)
    local_mass *= det[:, None, None]
    local_rhs *= det[:, None]

    discontinuous = space.family in ("P_disc_scalar", "P_disc_vector", "RT_disc")
    if discontinuous:
        coefs = np.linalg.solve(local_mass, local_rhs[..., None])[..., 0]
        out = np.zeros(space.dim)
        out[space.cell_dofs] = coefs
        return out
    rows = np.repeat(space.cell_dofs, space.n_local, axis=1).ravel()
    cols = np.tile(space.cell_dofs, (1, space.n_local)).ravel()
    data = local_mass.ravel()
    keep = (rows >= 0) & (cols >= 0)
    M = sparse.coo_matrix(
        (data[keep], (rows[keep], cols[keep])), shape=(space.dim, space.dim)
    ).tocsr()
    rhs = np.zeros(space.dim)
    np.add.at(rhs, space.cell_dofs.ravel()[space.cell_dofs.ravel() >= 0],
              local_rhs.ravel()[space.cell_dofs.ravel() >= 0])
    return spsolve(M, rhs)


def l2_project_edge(space, f, edge, quad_degree=None):
    """L2-project a function of the edge parameter onto P_k(edge).

    ``f`` maps parameters t in [0,1] to values (scalar, or the normal
    component for Edge_normal_vector).  Returns the k+1 Legendre
    coefficients for that edge.
    """
    if not space.is_edge_space:
        raise ValueError("l2_project_edge needs an edge family")
    k = space.degree
    if quad_degree is None:
        quad_degree = min(2 * k + 4, 20)
    rule = edge_rule(quad_degree)
    leg = legendre_values(k, rule.points)
    h = space.mesh.h_e[edge]
    gram_diag = h / (2.0 * np.arange(k + 1) + 1.0)
    fv = np.asarray(f(rule.points), dtype=float)
    rhs = h * leg.T @ (rule.weights * fv)
    return rhs / gram_diag


class Field:
    """A coefficient vector paired with its space; evaluation helper."""

    def __init__(self, space, coefs):
        coefs = np.asarray(coefs, dtype=float)
        if coefs.shape != (space.dim,):
            raise ValueError(f"expected {space.dim} coefficients, got {coefs.shape}")
        self.space = space
        self.coefs = coefs

    def _local(self, eids):
        dofs = self.space.cell_dofs[eids]
        c = np.where(dofs >= 0, self.coefs[np.maximum(dofs, 0)], 0.0)
        return c

    def values(self, eids, ref_pts):
        vals = self.space.values_at(eids, ref_pts)
        c = self._local(np.atleast_1d(eids))
        if self.space.is_vector:
            return np.einsum("eqla,el->eqa", vals, c)
        return np.einsum("eql,el->eq", vals, c)

    def gradients(self, eids, ref_pts):
        g = self.space.gradients_at(eids, ref_pts)
        return np.einsum("eqla,el->eqa", g, self._local(np.atleast_1d(eids)))

    def divergences(self, eids, ref_pts):
        d = self.space.divergences_at(eids, ref_pts)
        return np.einsum("eql,el->eq", d, self._local(np.atleast_1d(eids)))

    def edge_trace(self, edge_ids, side, t):
        vals, eids = edge_trace(self.space, edge_ids, side, t)
        c = self._local(eids)
        if self.space.is_vector:
            return np.einsum("eqla,el->eqa", vals, c)
        return np.einsum("eql,el->eq", vals, c)


def transfer_field(source, target_space, quad_degree=None):
    """Element-local L2 projection of a Field onto another volume space.

    Exact (returns the same function) whenever the target space contains
    the source space element-wise.
    """
    mesh = target_space.mesh
    if source.space.mesh is not mesh:
        raise ValueError("transfer_field needs spaces on one mesh")
    if quad_degree is None:
        quad_degree = min(
            source.space.degree + target_space.degree + 4, 20
        )
    rule = triangle_rule(quad_degree)
    det = 2.0 * mesh.signed_areas()
    eids = np.arange(mesh.n_elements)
    tv = target_space.values_at(eids, rule.points)
    if target_space.is_vector != source.space.is_vector:
        raise ValueError("transfer_field needs matching field ranks")
    sv = source.values(eids, rule.points)
    if target_space.is_vector:
        mass = np.einsum("eqla,eqma,q->elm", tv, tv, rule.weights)
        rhs = np.einsum("eqla,eqa,q->el", tv, sv, rule.weights)
    else:
        mass = np.einsum("eql,eqm,q->elm", tv, tv, rule.weights)
        rhs = np.einsum("eql,eq,q->el", tv, sv, rule.weights)
    # conforming targets would need a global solve; restrict to broken ones
    if target_space.family not in ("P_disc_scalar", "P_disc_vector", "RT_disc"):
        raise ValueError("transfer_field targets a broken space")
    coefs = np.linalg.solve(
        mass * det[:, None, None], (rhs * det[:, None])[..., None]
    )[..., 0]
    out = np.zeros(target_space.dim)
    dofs = target_space.cell_dofs.ravel()
    keep = dofs >= 0
    out[dofs[keep]] = coefs.ravel()[keep]
    return Field(target_space, out)


class EdgeField:
    """Coefficients of an edge family (one block of k+1 per edge)."""

    def __init__(self, space, coefs):
        coefs = np.asarray(coefs, dtype=float)
        if coefs.shape != (space.dim,):
            raise ValueError(f"expected {space.dim} coefficients, got {coefs.shape}")
        self.space = space
        self.coefs = coefs

    def values(self, edge_ids, t):
        """Scalar coefficient values on edges; zero on excluded edges."""
        edge_ids = np.atleast_1d(np.asarray(edge_ids, dtype=np.int64))
        leg = legendre_values(self.space.degree, np.asarray(t, dtype=float))
        dofs = self.space.edge_dofs[edge_ids]
        c = np.where(dofs >= 0, self.coefs[np.maximum(dofs, 0)], 0.0)
        return np.einsum("qm,em->eq", leg, c)
