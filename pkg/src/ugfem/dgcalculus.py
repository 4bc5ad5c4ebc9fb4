"""DG-gradient and DG-divergence operators, jumps/averages, liftings.

The DG-gradient maps a broken scalar space V_h into the dual of the
product space Q_h x Qhat_h,

    <grad_dg u, (q, qhat)> = (grad_h u, q) - sum_K <u, qhat . n_K>_dK,

and the DG-divergence maps Q_h into the dual of V_h x Vhat_h,

    <div_dg p, (v, vhat)> = (div_h p, v) - sum_K <p . n_K, vhat>_dK.

Both are assembled once per space triple as sparse rectangular matrices
(rows = product-space DOFs, columns = primal-space DOFs) and cached on
the mesh; the dual operators of the adjoint identities are transpose
views of the same matrix, so the duality pairing holds exactly.

Scalar jumps here are oriented by the fixed edge normal n_e:
[v] = v|K+ - v|K- and [q] = (q|K+ - q|K-) . n_e on interior edges, with
the boundary conventions [v] = v, {q} = q, {{q}} = q . n.
"""

import numpy as np
from scipy import sparse

from .quadrature import edge_rule, triangle_rule
from .spaces import EdgeField, Field, edge_trace, legendre_values


class CooAccumulator:
    """Collects (row, col, value) triplets for a sparse matrix."""

    def __init__(self, shape):
        self.shape = shape
        self._rows = []
        self._cols = []
        self._data = []

    def add_blocks(self, rows, cols, blocks):
        """Add dense blocks: rows (nE, a), cols (nE, b), blocks (nE, a, b).

        Entries with a negative row or column index (constrained DOFs)
        are dropped.
        """
        nE, a = rows.shape
        b = cols.shape[1]
        r = np.repeat(rows, b, axis=1).ravel()
        c = np.tile(cols, (1, a)).ravel()
        d = blocks.reshape(nE, a * b).ravel()
        keep = (r >= 0) & (c >= 0)
        self._rows.append(r[keep])
        self._cols.append(c[keep])
        self._data.append(d[keep])

    def tocsr(self):
        if not self._data:
            return sparse.csr_matrix(self.shape)
        r = np.concatenate(self._rows)
        c = np.concatenate(self._cols)
        d = np.concatenate(self._data)
        return sparse.coo_matrix((d, (r, c)), shape=self.shape).tocsr()


def _require_same_mesh(*spaces):
    mesh = spaces[0].mesh
    for s in spaces[1:]:
        if s.mesh is not mesh:
            raise ValueError("spaces live on different meshes")
    return mesh


def volume_points(mesh, rule):
    """Physical images of a reference rule on every element: (nt, nq, 2)."""
    J = mesh.jacobians()
    v0 = mesh.vertices[mesh.triangles[:, 0]]
    return v0[:, None, :] + np.einsum("eab,qb->eqa", J, rule.points)


def edge_groups(mesh, edges=None):
    """Split an edge subset into (interior, boundary) index arrays."""
    if edges is None:
        edges = np.arange(mesh.n_edges)
    edges = np.asarray(edges, dtype=np.int64)
    bnd = mesh.boundary_edges[edges]
    return edges[~bnd], edges[bnd]


class EdgeTraces:
    """Basis traces of a volume space on a set of edges.

    For interior edges the ``jump``/``average`` arrays are laid out over
    the concatenated local DOFs [K+, K-]; for boundary edges over the
    single element.  ``dofs`` matches that layout.
    """

    def __init__(self, space, edges, t):
        self.space = space
        self.edges = np.asarray(edges, dtype=np.int64)
        mesh = space.mesh
        interior = ~mesh.boundary_edges[self.edges]
        if not np.all(interior) and not np.all(~interior):
            raise ValueError("EdgeTraces needs a single-kind edge group")
        self.is_interior = bool(np.all(interior)) and self.edges.size > 0 or (
            self.edges.size == 0
        )
        plus, ep = edge_trace(space, self.edges, 0, t)
        dp = space.cell_dofs[ep]
        if self.edges.size and interior.all():
            minus, em = edge_trace(space, self.edges, 1, t)
            dm = space.cell_dofs[em]
            self.plus, self.minus = plus, minus
            self.dofs = np.concatenate([dp, dm], axis=1)
        else:
            self.plus, self.minus = plus, None
            self.dofs = dp

    def jump_scalar(self):
        """[v] values as (nE, nq, ndofs) over the concatenated layout."""
        if self.minus is None:
            return self.plus
        return np.concatenate([self.plus, -self.minus], axis=2)

    def avg_scalar(self):
        if self.minus is None:
            return self.plus
        return 0.5 * np.concatenate([self.plus, self.minus], axis=2)

    def jump_normal(self):
        """[q] = (q+ - q-) . n_e values (nE, nq, ndofs)."""
        n = self.space.mesh.n_e[self.edges]
        p = np.einsum("eqla,ea->eql", self.plus, n)
        if self.minus is None:
            return p
        m = np.einsum("eqla,ea->eql", self.minus, n)
        return np.concatenate([p, -m], axis=2)

    def avg_normal(self):
        """{{q}} = {q} . n_e values (nE, nq, ndofs)."""
        n = self.space.mesh.n_e[self.edges]
        p = np.einsum("eqla,ea->eql", self.plus, n)
        if self.minus is None:
            return p
        m = np.einsum("eqla,ea->eql", self.minus, n)
        return 0.5 * np.concatenate([p, m], axis=2)

    def side_values(self, side):
        """One-sided traces padded to the concatenated layout with zeros."""
        if self.minus is None:
            if side == 1:
                raise ValueError("boundary edges have no minus side")
            return self.plus
        val = self.plus if side == 0 else self.minus
        zero = np.zeros_like(val)
        parts = (val, zero) if side == 0 else (zero, val)
        return np.concatenate(parts, axis=2)


class DGOperator:
    """Sparse matrix realization of a DG derivative.

    ``matrix`` has rows indexed by the product ("tilde") space DOFs and
    columns by the primal-space DOFs; ``row_partition`` holds the
    volume/trace slices.  The dual operator is the transpose view.
    """

    def __init__(self, matrix, row_partition, description):
        self.matrix = matrix.tocsr()
        self.row_partition = row_partition
        self.description = description

    @property
    def dual_matrix(self):
        """Transpose view realizing the adjoint pairing exactly."""
        return self.matrix.T

    def apply(self, primal_coefs):
        return self.matrix @ primal_coefs

    def pair(self, tilde_coefs, primal_coefs):
        """<op(primal), tilde> for coefficient vectors."""
        return float(tilde_coefs @ (self.matrix @ primal_coefs))


def _default_edge_degree(*degrees):
    return int(min(sum(max(d, 0) for d in degrees) + 2, 20))


def assemble_dg_gradient(V_h, Q_h, Q_hat, quad_degree=None):
    """DG-gradient as a sparse operator; rows = [Q_h; Q_hat] DOFs."""
    mesh = _require_same_mesh(V_h, Q_h, Q_hat)
    key = ("dg_grad", id(V_h), id(Q_h), id(Q_hat), quad_degree)
    if key in mesh._cache:
        return mesh._cache[key]
    if quad_degree is None:
        qdeg = _default_edge_degree(V_h.degree, max(Q_h.degree, Q_hat.degree))
    else:
        qdeg = quad_degree

    acc = CooAccumulator((Q_h.dim + Q_hat.dim, V_h.dim))

    vrule = triangle_rule(min(qdeg, 20))
    det = 2.0 * mesh.signed_areas()
    eids = np.arange(mesh.n_elements)
    gv = V_h.gradients_at(eids, vrule.points)
    qv = Q_h.values_at(eids, vrule.points)
    blocks = np.einsum("eqla,q,eqma->elm", qv, vrule.weights, gv) * det[:, None, None]
    acc.add_blocks(Q_h.cell_dofs, V_h.cell_dofs, blocks)

    erule = edge_rule(qdeg)
    t, w = erule.points, erule.weights
    leg = legendre_values(Q_hat.degree, t)
    for group in edge_groups(mesh):
        if group.size == 0:
            continue
        tr = EdgeTraces(V_h, group, t)
        jump = tr.jump_scalar()
        hdofs = Q_hat.edge_dofs[group]
        hvals = np.broadcast_to(leg, (len(group),) + leg.shape)
        wts = w[None, :] * mesh.h_e[group][:, None]
        blocks = -np.einsum("eqm,eq,eql->eml", hvals, wts, jump)
        acc.add_blocks(hdofs + np.where(hdofs >= 0, Q_h.dim, 0), tr.dofs, blocks)

    op = DGOperator(
        acc.tocsr(),
        {"volume": slice(0, Q_h.dim), "trace": slice(Q_h.dim, Q_h.dim + Q_hat.dim)},
        "dg_gradient",
    )
    mesh._cache[key] = op
    return op


def assemble_dg_divergence(Q_h, V_h, V_hat, quad_degree=None):
    """DG-divergence as a sparse operator; rows = [V_h; V_hat] DOFs."""
    mesh = _require_same_mesh(Q_h, V_h, V_hat)
    key = ("dg_div", id(Q_h), id(V_h), id(V_hat), quad_degree)
    if key in mesh._cache:
        return mesh._cache[key]
    if quad_degree is None:
        qdeg = _default_edge_degree(Q_h.degree + 1, max(V_h.degree, V_hat.degree))
    else:
        qdeg = quad_degree

    acc = CooAccumulator((V_h.dim + V_hat.dim, Q_h.dim))

    vrule = triangle_rule(min(qdeg, 20))
    det = 2.0 * mesh.signed_areas()
    eids = np.arange(mesh.n_elements)
    dv = Q_h.divergences_at(eids, vrule.points)
    vv = V_h.values_at(eids, vrule.points)
    blocks = np.einsum("eql,q,eqm->elm", vv, vrule.weights, dv) * det[:, None, None]
    acc.add_blocks(V_h.cell_dofs, Q_h.cell_dofs, blocks)

    erule = edge_rule(qdeg)
    t, w = erule.points, erule.weights
    leg = legendre_values(V_hat.degree, t)
    for group in edge_groups(mesh):
        if group.size == 0:
            continue
        hdofs = V_hat.edge_dofs[group]
        if np.all(hdofs < 0):
            continue
        tr = EdgeTraces(Q_h, group, t)
        jump = tr.jump_normal()
        hvals = np.broadcast_to(leg, (len(group),) + leg.shape)
        wts = w[None, :] * mesh.h_e[group][:, None]
        blocks = -np.einsum("eqm,eq,eql->eml", hvals, wts, jump)
        acc.add_blocks(hdofs + np.where(hdofs >= 0, V_h.dim, 0), tr.dofs, blocks)

    op = DGOperator(
        acc.tocsr(),
        {"volume": slice(0, V_h.dim), "trace": slice(V_h.dim, V_h.dim + V_hat.dim)},
        "dg_divergence",
    )
    mesh._cache[key] = op
    return op


JUMP_KINDS = (
    "avg_scalar",
    "avg_vector",
    "jump_scalar_vector",
    "jump_scalar",
    "jump_vector_normal",
    "avg_normal",
)


def jump_average(field, edge, kind, t):
    """Evaluate a jump or average of a discrete field on one edge.

    ``field`` is a :class:`ugfem.spaces.Field`; ``t`` holds edge
    parameters in [0, 1].  Boundary conventions: {v}=v, [v]=v,
    jump(v)=v n, {q}=q, {{q}}=q.n, [q]=q.n.
    """
    if kind not in JUMP_KINDS:
        raise ValueError(f"unknown kind {kind!r}")
    mesh = field.space.mesh
    t = np.asarray(t, dtype=float)
    boundary = bool(mesh.boundary_edges[edge])
    plus = field.edge_trace([edge], 0, t)[0]
    minus = None if boundary else field.edge_trace([edge], 1, t)[0]
    n = mesh.n_e[edge]
    if kind in ("avg_scalar", "avg_vector"):
        return plus if boundary else 0.5 * (plus + minus)
    if kind == "jump_scalar":
        return plus if boundary else plus - minus
    if kind == "jump_scalar_vector":
        j = plus if boundary else plus - minus
        return j[:, None] * n[None, :]
    if kind == "jump_vector_normal":
        return (plus if boundary else plus - minus) @ n
    # avg_normal
    return (plus if boundary else 0.5 * (plus + minus)) @ n


def _lifting(w, edge, space, quad_degree, vector):
    mesh = space.mesh
    if quad_degree is None:
        quad_degree = min(2 * (space.degree + 1) + 2, 20)
    erule = edge_rule(quad_degree)
    t = erule.points
    wvals = np.asarray(w(t), dtype=float)
    expected = (len(t), 2) if vector else (len(t),)
    if wvals.shape != expected:
        raise ValueError(f"edge datum must have shape {expected}, got {wvals.shape}")

    sides = [0] if mesh.boundary_edges[edge] else [0, 1]
    avg = 1.0 if mesh.boundary_edges[edge] else 0.5
    vrule = triangle_rule(min(2 * (space.degree + 1), 20))
    det = 2.0 * mesh.signed_areas()
    out = np.zeros(space.dim)
    for side in sides:
        vals, eids = edge_trace(space, [edge], side, t)
        K = int(eids[0])
        volvals = space.values_at([K], vrule.points)[0]
        if vector:
            M = np.einsum("qla,q,qma->lm", volvals, vrule.weights, volvals) * det[K]
            rhs = -avg * np.einsum(
                "qla,qa,q->l", vals[0], wvals, erule.weights
            ) * mesh.h_e[edge]
        else:
            M = np.einsum("ql,q,qm->lm", volvals, vrule.weights, volvals) * det[K]
            rhs = -avg * np.einsum(
                "ql,q,q->l", vals[0], wvals, erule.weights
            ) * mesh.h_e[edge]
        out[space.cell_dofs[K]] += np.linalg.solve(M, rhs)
    return out


def lifting_volume(w, edge, Q_h, quad_degree=None):
    """r_e(w) in Q_h with (r_e(w), q) = -int_e w . {q} for all q in Q_h.

    ``w`` maps edge parameters to vector values (nq, 2).  The result is
    supported on the one or two elements adjacent to ``edge``.
    """
    if not Q_h.is_vector:
        raise ValueError("lifting_volume needs a vector space")
    return _lifting(w, edge, Q_h, quad_degree, vector=True)


def lifting_scalar(w, edge, V_h, quad_degree=None):
    """Scalar lifting r_e(w) in V_h with (r_e(w), v) = -int_e w {v}."""
    if V_h.is_vector:
        raise ValueError("lifting_scalar needs a scalar space")
    return _lifting(w, edge, V_h, quad_degree, vector=False)
