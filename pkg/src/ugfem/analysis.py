"""Error norms, convergence rates, inf-sup estimation, limit distances.

Norm kinds
----------
L2_scalar, L2_vector, Hdiv_broken, H1_broken
    parameter-free norms of single fields.
WG_p_norm, WG_u_norm, WG_div_norm
    the parameter-dependent WG norms (stabilizer-weighted flux norms and
    the projected-jump norm on the scalar).
HDG_div_norm, HDG_u0_norm, HDG_u1_norm
    the HDG counterparts, with the edge projection applied to the jumps
    (divergence family) or to the volume trace (gradient family).
MDG_norm
    the mixed-DG flux norm with the jump penalty term.

All norms accept either (solution, case) differences via
:func:`error_norm`, pairs of discrete solutions via
:func:`limit_distance`, or single solutions via :func:`discrete_norm`.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from .dgcalculus import CooAccumulator, EdgeTraces, edge_groups, volume_points
from .linsolve import gen_eig_smallest
from .quadrature import edge_rule, triangle_rule
from .schemes import (
    MethodConfig,
    _div_coupling_local,
    _div_gram_local,
    _eta_edges,
    _grad_coupling_local,
    _mass_local,
    _stab_values,
    _stiffness_local,
    _wg_stabilizer,
    build_scheme_spaces,
)
from .spaces import legendre_values

NORM_KINDS = (
    "L2_scalar",
    "L2_vector",
    "div_L2",
    "Hdiv_broken",
    "H1_broken",
    "WG_p_norm",
    "WG_u_norm",
    "WG_div_norm",
    "HDG_div_norm",
    "HDG_u0_norm",
    "HDG_u1_norm",
    "MDG_norm",
)

UNDERFLOW = 1e-13


class InstabilityError(RuntimeError):
    """An inf-sup pencil produced zero eigenvalues beyond the expected kernel."""


# --------------------------------------------------------------------------
# manufactured cases
# --------------------------------------------------------------------------


@dataclass
class ManufacturedCase:
    """Exact solution bundle: u, p = -alpha grad u, load f, coefficient."""

    u: object
    grad_u: object
    f: object
    alpha: np.ndarray = None
    name: str = "case"

    def __post_init__(self):
        self.alpha = np.eye(2) if self.alpha is None else np.asarray(self.alpha, float)

    @property
    def c_matrix(self):
        return np.linalg.inv(self.alpha)

    def p(self, x):
        return -np.asarray(self.grad_u(x)) @ self.alpha.T

    def div_p(self, x):
        """div p = -div(alpha grad u) = f for the model problem."""
        return np.asarray(self.f(x), dtype=float)

    def validate(self, n_samples=200, seed=0, fd_step=1e-6, fd_tol=1e-4):
        """Check p = -alpha grad u and -div(alpha grad u) = f.

        Analytic closures are cross-checked by central finite differences
        of u (gradient) and of p (divergence).
        """
        rng = np.random.default_rng(seed)
        x = rng.uniform(0.05, 0.95, size=(n_samples, 2))
        gu = np.asarray(self.grad_u(x), dtype=float)
        step = np.array([fd_step, 0.0])
        gx = (self.u(x + step) - self.u(x - step)) / (2 * fd_step)
        step = np.array([0.0, fd_step])
        gy = (self.u(x + step) - self.u(x - step)) / (2 * fd_step)
        if np.abs(gu - np.stack([gx, gy], axis=1)).max() > fd_tol * (
            1 + np.abs(gu).max()
        ):
            raise ValueError("grad_u closure disagrees with finite differences")
        p = self.p(x)
        if np.abs(p + gu @ self.alpha.T).max() > 1e-10 * (1 + np.abs(p).max()):
            raise ValueError("p does not equal -alpha grad u")
        step = np.array([fd_step, 0.0])
        dpx = (self.p(x + step)[:, 0] - self.p(x - step)[:, 0]) / (2 * fd_step)
        step = np.array([0.0, fd_step])
        dpy = (self.p(x + step)[:, 1] - self.p(x - step)[:, 1]) / (2 * fd_step)
        fv = np.asarray(self.f(x), dtype=float)
        if np.abs(dpx + dpy - fv).max() > fd_tol * (1 + np.abs(fv).max()):
            raise ValueError("-div(alpha grad u) disagrees with f")
        return self


def sine_case():
    """u = sin(2 pi x) sin(pi y) with alpha = I, f = 5 pi^2 u."""

    def u(x):
        return np.sin(2 * np.pi * x[:, 0]) * np.sin(np.pi * x[:, 1])

    def grad_u(x):
        return np.stack(
            [
                2 * np.pi * np.cos(2 * np.pi * x[:, 0]) * np.sin(np.pi * x[:, 1]),
                np.pi * np.sin(2 * np.pi * x[:, 0]) * np.cos(np.pi * x[:, 1]),
            ],
            axis=1,
        )

    def f(x):
        return 5 * np.pi**2 * u(x)

    return ManufacturedCase(u, grad_u, f, np.eye(2), name="sine")


def bubble_case():
    """Polynomial u = x(1-x)y(1-y), degree 4, zero boundary."""

    def u(x):
        return x[:, 0] * (1 - x[:, 0]) * x[:, 1] * (1 - x[:, 1])

    def grad_u(x):
        return np.stack(
            [
                (1 - 2 * x[:, 0]) * x[:, 1] * (1 - x[:, 1]),
                x[:, 0] * (1 - x[:, 0]) * (1 - 2 * x[:, 1]),
            ],
            axis=1,
        )

    def f(x):
        return 2 * x[:, 1] * (1 - x[:, 1]) + 2 * x[:, 0] * (1 - x[:, 0])

    return ManufacturedCase(u, grad_u, f, np.eye(2), name="bubble")


def zero_case():
    """f = 0 with the zero exact solution."""
    z1 = lambda x: np.zeros(len(x))
    z2 = lambda x: np.zeros((len(x), 2))
    return ManufacturedCase(z1, z2, z1, np.eye(2), name="zero")


# --------------------------------------------------------------------------
# component adapters for norm evaluation
# --------------------------------------------------------------------------


class _Components:
    """Pointwise evaluators of the fields a norm may need.

    Each evaluator takes precomputed geometric data and returns arrays
    over (elements/edges, quadrature points).  Missing components raise
    KeyError, which error_norm turns into a clear message.
    """

    def __init__(self, mesh):
        self.mesh = mesh
        self.volume = {}  # name -> f(eids, ref, phys)
        self.trace = {}  # name -> f(edges, side, t, phys)
        self.edge = {}  # name -> f(edges, t, phys): single-valued edge data


def _solution_components(sol):
    comp = _Components(sol.mesh)
    fields = sol.fields
    if "u" in fields:
        u = fields["u"]
        comp.volume["u"] = lambda e, r, x: u.values(e, r)
        comp.volume["grad_u"] = lambda e, r, x: u.gradients(e, r)
        comp.trace["u"] = lambda ed, s, t, x: u.edge_trace(ed, s, t)
    if "p" in fields:
        p = fields["p"]
        comp.volume["p"] = lambda e, r, x: p.values(e, r)
        comp.volume["div_p"] = lambda e, r, x: p.divergences(e, r)
        comp.trace["p"] = lambda ed, s, t, x: p.edge_trace(ed, s, t)
    if "p_hat" in fields:
        ph = fields["p_hat"]
        comp.edge["p_hat_n"] = lambda ed, t, x: ph.values(ed, t)
    if "u_hat" in fields:
        uh = fields["u_hat"]
        comp.edge["u_hat"] = lambda ed, t, x: uh.values(ed, t)
    return comp


def _case_components(case, mesh):
    comp = _Components(mesh)
    comp.volume["u"] = lambda e, r, x: case.u(x.reshape(-1, 2)).reshape(x.shape[:2])
    comp.volume["grad_u"] = lambda e, r, x: case.grad_u(x.reshape(-1, 2)).reshape(
        x.shape
    )
    comp.volume["p"] = lambda e, r, x: case.p(x.reshape(-1, 2)).reshape(x.shape)
    comp.volume["div_p"] = lambda e, r, x: case.div_p(x.reshape(-1, 2)).reshape(
        x.shape[:2]
    )
    comp.trace["u"] = lambda ed, s, t, x: case.u(x.reshape(-1, 2)).reshape(
        x.shape[:2]
    )
    comp.trace["p"] = lambda ed, s, t, x: case.p(x.reshape(-1, 2)).reshape(x.shape)
    # single-valued exact traces
    comp.edge["u_hat"] = lambda ed, t, x: case.u(x.reshape(-1, 2)).reshape(
        x.shape[:2]
    )
    comp.edge["p_hat_n"] = lambda ed, t, x: np.einsum(
        "eqa,ea->eq", case.p(x.reshape(-1, 2)).reshape(x.shape), mesh.n_e[ed]
    )
    return comp


def _difference(a, b):
    comp = _Components(a.mesh)
    for group in ("volume", "trace", "edge"):
        ga, gb = getattr(a, group), getattr(b, group)
        out = getattr(comp, group)
        for name in ga:
            if name in gb:
                fa, fb = ga[name], gb[name]
                out[name] = (lambda fa, fb: lambda *args: fa(*args) - fb(*args))(
                    fa, fb
                )
    return comp


# --------------------------------------------------------------------------
# norm engine
# --------------------------------------------------------------------------


def _volume_sq(comp, names, weight, mesh, qdeg):
    rule = triangle_rule(qdeg)
    det = 2.0 * mesh.signed_areas()
    eids = np.arange(mesh.n_elements)
    phys = volume_points(mesh, rule)
    total = 0.0
    for name in names:
        vals = comp.volume[name](eids, rule.points, phys)
        if vals.ndim == 3:
            w = np.eye(2) if weight is None else weight
            sq = np.einsum("eqa,ab,eqb->eq", vals, w, vals)
        else:
            sq = vals**2
        total += float(np.einsum("eq,q,e->", sq, rule.weights, det))
    return total


def _edge_geometry(mesh, edges, t):
    a = mesh.vertices[mesh.edges[edges, 0]]
    b = mesh.vertices[mesh.edges[edges, 1]]
    return a[:, None, :] + t[None, :, None] * (b - a)[:, None, :]


def _project_t(vals, t, w, degree):
    """L2(e) projection of per-edge scalar values onto P_degree(e)."""
    leg = legendre_values(degree, t)
    gram = 1.0 / (2.0 * np.arange(degree + 1) + 1.0)
    coef = np.einsum("qm,q,eq->em", leg, w, vals) / gram[None, :]
    return np.einsum("qm,em->eq", leg, coef)


def _flux_mismatch_sq(comp, mesh, per_element_weight, qdeg):
    """sum_K w_K int_dK ((p - p_hat).n_K)^2 over all element boundaries."""
    r = edge_rule(qdeg)
    t, w = r.points, r.weights
    total = 0.0
    for group in edge_groups(mesh):
        if group.size == 0:
            continue
        boundary = bool(mesh.boundary_edges[group[0]])
        phys = _edge_geometry(mesh, group, t)
        ph = comp.edge["p_hat_n"](group, t, phys)
        for side in [0] if boundary else [0, 1]:
            ptr = comp.trace["p"](group, side, t, phys)
            pn = np.einsum("eqa,ea->eq", ptr, mesh.n_e[group])
            K = mesh.edge_to_elements[group, side]
            wts = w[None, :] * (mesh.h_e[group] * per_element_weight[K])[:, None]
            total += float(np.einsum("eq,eq->", (pn - ph) ** 2, wts))
    return total


def _trace_mismatch_sq(comp, mesh, per_element_weight, qdeg, proj_degree=None):
    """sum_K w_K int_dK (P(u) - u_hat)^2, with optional edge projection of u."""
    r = edge_rule(qdeg)
    t, w = r.points, r.weights
    total = 0.0
    for group in edge_groups(mesh):
        if group.size == 0:
            continue
        boundary = bool(mesh.boundary_edges[group[0]])
        phys = _edge_geometry(mesh, group, t)
        uh = comp.edge["u_hat"](group, t, phys)
        for side in [0] if boundary else [0, 1]:
            utr = comp.trace["u"](group, side, t, phys)
            if proj_degree is not None:
                utr = _project_t(utr, t, w, proj_degree)
            K = mesh.edge_to_elements[group, side]
            wts = w[None, :] * (mesh.h_e[group] * per_element_weight[K])[:, None]
            total += float(np.einsum("eq,eq->", (utr - uh) ** 2, wts))
    return total


def _jump_sq(comp, mesh, per_edge_weight, qdeg, which, proj_degree=None,
             interior_only=False):
    """sum_e w_e int_e (proj jump)^2 for scalar ([u]) or normal ([p]) jumps."""
    r = edge_rule(qdeg)
    t, w = r.points, r.weights
    total = 0.0
    for group in edge_groups(mesh):
        if group.size == 0:
            continue
        boundary = bool(mesh.boundary_edges[group[0]])
        if boundary and interior_only:
            continue
        phys = _edge_geometry(mesh, group, t)
        if which == "u":
            plus = comp.trace["u"](group, 0, t, phys)
            jump = plus if boundary else plus - comp.trace["u"](group, 1, t, phys)
        else:
            plus = np.einsum(
                "eqa,ea->eq", comp.trace["p"](group, 0, t, phys), mesh.n_e[group]
            )
            if boundary:
                jump = plus
            else:
                jump = plus - np.einsum(
                    "eqa,ea->eq",
                    comp.trace["p"](group, 1, t, phys),
                    mesh.n_e[group],
                )
        if proj_degree is not None:
            jump = _project_t(jump, t, w, proj_degree)
        wts = w[None, :] * (mesh.h_e[group] * per_edge_weight[group])[:, None]
        total += float(np.einsum("eq,eq->", jump**2, wts))
    return total


def _uhat_sq(comp, mesh, per_edge_weight, qdeg):
    r = edge_rule(qdeg)
    t, w = r.points, r.weights
    total = 0.0
    interior, _ = edge_groups(mesh)
    if interior.size == 0:
        return 0.0
    phys = _edge_geometry(mesh, interior, t)
    uh = comp.edge["u_hat"](interior, t, phys)
    wts = w[None, :] * (mesh.h_e[interior] * per_edge_weight[interior])[:, None]
    return float(np.einsum("eq,eq->", uh**2, wts))


def _norm_sq(comp, mesh, kind, rho, c_matrix, qdeg, opts):
    if kind == "L2_scalar":
        return _volume_sq(comp, ["u"], None, mesh, qdeg)
    if kind == "L2_vector":
        return _volume_sq(comp, ["p"], None, mesh, qdeg)
    if kind == "div_L2":
        return _volume_sq(comp, ["div_p"], None, mesh, qdeg)
    if kind == "Hdiv_broken":
        return _volume_sq(comp, ["p"], None, mesh, qdeg) + _volume_sq(
            comp, ["div_p"], None, mesh, qdeg
        )
    if kind == "H1_broken":
        return _volume_sq(comp, ["grad_u"], None, mesh, qdeg)
    if kind == "WG_p_norm":
        return _volume_sq(comp, ["p"], c_matrix, mesh, qdeg) + _flux_mismatch_sq(
            comp, mesh, rho * mesh.h_K, qdeg
        )
    if kind == "WG_u_norm":
        pj = _jump_sq(
            comp, mesh, 1.0 / (rho * mesh.h_e), qdeg, "u",
            proj_degree=opts.get("qhat_degree"),
        )
        return _volume_sq(comp, ["grad_u"], None, mesh, qdeg) + pj
    if kind == "WG_div_norm":
        return (
            _volume_sq(comp, ["p"], c_matrix, mesh, qdeg)
            + _volume_sq(comp, ["div_p"], None, mesh, qdeg)
            + _flux_mismatch_sq(comp, mesh, 1.0 / (rho * mesh.h_K), qdeg)
        )
    if kind == "HDG_div_norm":
        return (
            _volume_sq(comp, ["p"], c_matrix, mesh, qdeg)
            + _volume_sq(comp, ["div_p"], None, mesh, qdeg)
            + _jump_sq(
                comp, mesh, 1.0 / (rho * mesh.h_e), qdeg, "p",
                proj_degree=opts.get("vhat_degree"), interior_only=True,
            )
        )
    if kind == "HDG_u0_norm":
        return _volume_sq(comp, ["u"], None, mesh, qdeg) + _uhat_sq(
            comp, mesh, rho * mesh.h_e, qdeg
        )
    if kind == "HDG_u1_norm":
        return _volume_sq(comp, ["grad_u"], None, mesh, qdeg) + _trace_mismatch_sq(
            comp, mesh, 1.0 / (rho * mesh.h_K), qdeg,
            proj_degree=opts.get("vhat_degree"),
        )
    if kind == "MDG_norm":
        eta = opts.get("eta_e", 1.0)
        eta = _eta_edges(eta, mesh)
        return (
            _volume_sq(comp, ["p"], c_matrix, mesh, qdeg)
            + _volume_sq(comp, ["div_p"], None, mesh, qdeg)
            + _jump_sq(
                comp, mesh, eta / mesh.h_e, qdeg, "p", interior_only=True
            )
        )
    raise ValueError(f"unknown norm kind {kind!r}")


def _norm_options(sol):
    opts = {}
    if sol is not None:
        if "p_hat" in sol.fields:
            opts["qhat_degree"] = sol.fields["p_hat"].space.degree
        if "u_hat" in sol.fields:
            opts["vhat_degree"] = sol.fields["u_hat"].space.degree
    return opts


def _default_norm_qdeg(sol, case=None):
    degs = [f.space.degree for f in sol.fields.values() if hasattr(f, "space")]
    return min(2 * max(degs) + 4, 20)


def error_norm(solution, case, kind, rho=None, quad_degree=None, **opts):
    """Norm of (exact - discrete) in the requested norm kind."""
    if kind not in NORM_KINDS:
        raise ValueError(f"unknown norm kind {kind!r}")
    mesh = solution.mesh
    comp = _difference(_case_components(case, mesh), _solution_components(solution))
    _check_components(comp, kind)
    qdeg = quad_degree or _default_norm_qdeg(solution, case)
    merged = {**_norm_options(solution), **opts}
    return float(
        np.sqrt(
            _norm_sq(comp, mesh, kind, rho, case.c_matrix, qdeg, merged)
        )
    )


def discrete_norm(solution, kind, rho=None, c_matrix=None, quad_degree=None, **opts):
    """Norm of a discrete solution's own fields."""
    mesh = solution.mesh
    comp = _solution_components(solution)
    _check_components(comp, kind)
    qdeg = quad_degree or _default_norm_qdeg(solution)
    c = np.eye(2) if c_matrix is None else c_matrix
    merged = {**_norm_options(solution), **opts}
    return float(np.sqrt(_norm_sq(comp, mesh, kind, rho, c, qdeg, merged)))


def limit_distance(sol_a, sol_b, kind, rho=None, quad_degree=None, **opts):
    """Norm of the difference of two discrete solutions on one mesh."""
    if sol_a.mesh is not sol_b.mesh:
        raise ValueError("limit_distance needs solutions on the same mesh")
    comp = _difference(_solution_components(sol_a), _solution_components(sol_b))
    _check_components(comp, kind)
    if kind not in NORM_KINDS:
        raise ValueError(f"unknown norm kind {kind!r}")
    degs = [
        f.space.degree
        for s in (sol_a, sol_b)
        for f in s.fields.values()
        if hasattr(f, "space")
    ]
    qdeg = quad_degree or min(2 * max(degs) + 4, 20)
    merged = {**_norm_options(sol_a), **opts}
    return float(np.sqrt(_norm_sq(comp, sol_a.mesh, kind, rho, np.eye(2), qdeg, merged)))


_NEEDS = {
    "L2_scalar": ("volume", "u"),
    "L2_vector": ("volume", "p"),
    "div_L2": ("volume", "div_p"),
    "Hdiv_broken": ("volume", "p"),
    "H1_broken": ("volume", "grad_u"),
    "WG_p_norm": ("edge", "p_hat_n"),
    "WG_u_norm": ("volume", "grad_u"),
    "WG_div_norm": ("edge", "p_hat_n"),
    "HDG_div_norm": ("volume", "p"),
    "HDG_u0_norm": ("edge", "u_hat"),
    "HDG_u1_norm": ("edge", "u_hat"),
    "MDG_norm": ("volume", "p"),
}


def _check_components(comp, kind):
    group, name = _NEEDS[kind]
    if name not in getattr(comp, group):
        raise ValueError(
            f"norm {kind!r} needs the {name!r} field, absent from this solution"
        )


# --------------------------------------------------------------------------
# consistency residuals (exact-solution insertion)
# --------------------------------------------------------------------------


def consistency_residual(config, mesh, case, quad_degree=None):
    """Max-abs residual of the scheme's equations at the exact solution.

    Inserts (p, u) of the manufactured case (with single-valued exact
    traces) into the bilinear forms by quadrature and measures the
    residual against the right-hand side, row by row.  Supports the WG,
    HDG, and MixedDG families.
    """
    qdeg = min(quad_degree or (2 * config.k + 6), 20)
    spaces = build_scheme_spaces(config, mesh)
    vrule = triangle_rule(qdeg)
    erule = edge_rule(qdeg)
    det = 2.0 * mesh.signed_areas()
    eids = np.arange(mesh.n_elements)
    phys = volume_points(mesh, vrule)
    flat = phys.reshape(-1, 2)
    p_ex = case.p(flat).reshape(phys.shape)
    u_ex = case.u(flat).reshape(phys.shape[:2])
    gu_ex = case.grad_u(flat).reshape(phys.shape)
    divp_ex = case.div_p(flat).reshape(phys.shape[:2])
    f_ex = np.asarray(case.f(flat), dtype=float).reshape(phys.shape[:2])
    c = case.c_matrix
    t, w = erule.points, erule.weights

    def vol_scalar(space, values):
        vals = space.values_at(eids, vrule.points)
        cells = np.einsum("eql,eq,q->el", vals, values, vrule.weights) * det[:, None]
        out = np.zeros(space.dim)
        dofs = space.cell_dofs.ravel()
        np.add.at(out, dofs[dofs >= 0], cells.ravel()[dofs >= 0])
        return out

    def vol_vector(space, values):
        vals = space.values_at(eids, vrule.points)
        cells = np.einsum("eqla,eqa,q->el", vals, values, vrule.weights) * det[:, None]
        out = np.zeros(space.dim)
        dofs = space.cell_dofs.ravel()
        np.add.at(out, dofs[dofs >= 0], cells.ravel()[dofs >= 0])
        return out

    def vol_div(space, values):
        dv = space.divergences_at(eids, vrule.points)
        cells = np.einsum("eql,eq,q->el", dv, values, vrule.weights) * det[:, None]
        out = np.zeros(space.dim)
        dofs = space.cell_dofs.ravel()
        np.add.at(out, dofs[dofs >= 0], cells.ravel()[dofs >= 0])
        return out

    def vol_grad(space, values):
        g = space.gradients_at(eids, vrule.points)
        cells = np.einsum("eqla,eqa,q->el", g, values, vrule.weights) * det[:, None]
        out = np.zeros(space.dim)
        dofs = space.cell_dofs.ravel()
        np.add.at(out, dofs[dofs >= 0], cells.ravel()[dofs >= 0])
        return out

    def edge_exact(group):
        pe = _edge_geometry(mesh, group, t)
        fl = pe.reshape(-1, 2)
        return (
            case.u(fl).reshape(pe.shape[:2]),
            case.p(fl).reshape(pe.shape),
        )

    s = config.scheme
    if s in ("WG", "HybridPrimal"):
        # Exact traces are single-valued, so the stabilizer rows and the
        # interior-jump parts vanish pointwise; what remains is below.
        Q, Qhat, V = spaces["Q"], spaces["Qhat"], spaces["V"]
        res_q = vol_vector(Q, p_ex @ c.T) + vol_vector(Q, gu_ex)
        res_hat = np.zeros(Qhat.dim)
        res_v = vol_grad(V, p_ex) + vol_scalar(V, f_ex)
        for group in edge_groups(mesh):
            if group.size == 0:
                continue
            boundary = bool(mesh.boundary_edges[group[0]])
            ue, pe = edge_exact(group)
            pn_ex = np.einsum("eqa,ea->eq", pe, mesh.n_e[group])
            leg = legendre_values(Qhat.degree, t)
            hdofs = Qhat.edge_dofs[group]
            wts = w[None, :] * mesh.h_e[group][:, None]
            if boundary:
                # qhat rows of b_w(q~, u_ex): -int L_m u_ex on the boundary
                cells = -np.einsum("qm,eq,eq->em", leg, ue, wts)
                keep = hdofs.ravel() >= 0
                np.add.at(res_hat, hdofs.ravel()[keep], cells.ravel()[keep])
            # v rows of b_w(p_ex~, v): -sum_e int (p_ex.n_e) [v]
            tr = EdgeTraces(V, group, t)
            jv = tr.jump_scalar()
            cells = -np.einsum("eql,eq,eq->el", jv, pn_ex, wts)
            dofs = tr.dofs.ravel()
            np.add.at(res_v, dofs[dofs >= 0], cells.ravel()[dofs >= 0])
        return float(
            max(
                np.abs(res_q).max(),
                np.abs(res_hat).max() if res_hat.size else 0.0,
                np.abs(res_v).max(),
            )
        )
    if s in ("HDG", "HDG_reduced", "HybridMixed"):
        # The u_hat rows (<v_hat, [p_ex]>) and the stabilizer rows vanish
        # pointwise for the single-valued exact traces.
        Q, V, Vhat = spaces["Q"], spaces["V"], spaces["Vhat"]
        # rows q: (c p, q) - (u, div q) + sum_K <u_hat_ex, q.n_K>
        res_q = vol_vector(Q, p_ex @ c.T) - vol_div(Q, u_ex)
        res_v = -vol_scalar(V, divp_ex) + vol_scalar(V, f_ex)
        for group in edge_groups(mesh):
            if group.size == 0:
                continue
            boundary = bool(mesh.boundary_edges[group[0]])
            if boundary:
                continue  # u_hat_ex = 0 on the boundary
            ue, _ = edge_exact(group)
            wts = w[None, :] * mesh.h_e[group][:, None]
            trQ = EdgeTraces(Q, group, t)
            jn = trQ.jump_normal()  # sum_K q.n_K against a single value
            cells = np.einsum("eql,eq,eq->el", jn, ue, wts)
            dofs = trQ.dofs.ravel()
            np.add.at(res_q, dofs[dofs >= 0], cells.ravel()[dofs >= 0])
        return float(max(np.abs(res_q).max(), np.abs(res_v).max()))
    if s.startswith("MixedDG"):
        Q, V = spaces["Q"], spaces["V"]
        res_q = vol_vector(Q, p_ex @ c.T) - vol_div(Q, u_ex)
        res_v = -vol_scalar(V, divp_ex) + vol_scalar(V, f_ex)
        interior, _ = edge_groups(mesh)
        if interior.size:
            ue, pe = edge_exact(interior)
            wts = w[None, :] * mesh.h_e[interior][:, None]
            trQ = EdgeTraces(Q, interior, t)
            jn = trQ.jump_normal()
            cells = np.einsum("eql,eq,eq->el", jn, ue, wts)
            dofs = trQ.dofs.ravel()
            np.add.at(res_q, dofs[dofs >= 0], cells.ravel()[dofs >= 0])
        return float(max(np.abs(res_q).max(), np.abs(res_v).max()))
    raise ValueError(f"consistency_residual does not support scheme {s!r}")


# --------------------------------------------------------------------------
# convergence rates and reports
# --------------------------------------------------------------------------


def convergence_rates(values, errors):
    """Consecutive-row rates log(e_i/e_{i+1}) / log(v_i/v_{i+1}).

    The first entry is None; rates where an error underflows 1e-13 are
    None as well (flagged, not fabricated).
    """
    values = list(map(float, values))
    errors = list(map(float, errors))
    if len(values) != len(errors):
        raise ValueError("values and errors differ in length")
    if len(values) < 2:
        raise ValueError("need at least two rows to compute rates")
    diffs = np.diff(values)
    if not (np.all(diffs < 0) or np.all(diffs > 0)):
        raise ValueError("independent variable must be monotone")
    rates = [None]
    for i in range(1, len(values)):
        if min(errors[i - 1], errors[i]) < UNDERFLOW:
            rates.append(None)
            continue
        rates.append(
            float(np.log(errors[i - 1] / errors[i]) / np.log(values[i - 1] / values[i]))
        )
    return rates


@dataclass
class ConvergenceReport:
    """Rows of (variable, named errors) with per-column consecutive rates."""

    var_kind: str
    columns: list
    var: list = field(default_factory=list)
    errors: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        for c in self.columns:
            self.errors.setdefault(c, [])

    def add_row(self, var_value, named_errors):
        self.var.append(float(var_value))
        for c in self.columns:
            self.errors[c].append(float(named_errors[c]))

    @property
    def n_rows(self):
        return len(self.var)

    def rates(self):
        return {c: convergence_rates(self.var, self.errors[c]) for c in self.columns}


# --------------------------------------------------------------------------
# inf-sup estimation
# --------------------------------------------------------------------------


def _bw_matrix(spaces, qdeg):
    """b_w(p~, v) matrix: rows V, cols (p, p_hat)."""
    Q, Qhat, V = spaces["Q"], spaces["Qhat"], spaces["V"]
    mesh = Q.mesh
    acc = CooAccumulator((V.dim, Q.dim + Qhat.dim))
    grad = _grad_coupling_local(Q, V, qdeg)  # (q_i, grad v_j)
    acc.add_blocks(V.cell_dofs, Q.cell_dofs, np.transpose(grad, (0, 2, 1)))
    r = edge_rule(qdeg)
    t, w = r.points, r.weights
    leg = legendre_values(Qhat.degree, t)
    for group in edge_groups(mesh):
        if group.size == 0:
            continue
        tr = EdgeTraces(V, group, t)
        jump = tr.jump_scalar()
        hdofs = Qhat.edge_dofs[group]
        hvals = np.broadcast_to(leg, (len(group),) + leg.shape)
        wts = w[None, :] * mesh.h_e[group][:, None]
        blocks = -np.einsum("eql,eq,eqm->elm", jump, wts, hvals)
        acc.add_blocks(tr.dofs, np.where(hdofs >= 0, hdofs + Q.dim, -1), blocks)
    return acc.tocsr()


def _bh_matrix(spaces, qdeg):
    """b_h(q, u~) matrix: rows (u, u_hat), cols Q."""
    Q, V, Vhat = spaces["Q"], spaces["V"], spaces["Vhat"]
    mesh = Q.mesh
    acc = CooAccumulator((V.dim + Vhat.dim, Q.dim))
    div = _div_coupling_local(Q, V, qdeg)
    acc.add_blocks(V.cell_dofs, Q.cell_dofs, -np.transpose(div, (0, 2, 1)))
    r = edge_rule(qdeg)
    t, w = r.points, r.weights
    leg = legendre_values(Vhat.degree, t)
    for group in edge_groups(mesh):
        if group.size == 0:
            continue
        hdofs = Vhat.edge_dofs[group]
        if np.all(hdofs < 0):
            continue
        tr = EdgeTraces(Q, group, t)
        jump = tr.jump_normal()
        hvals = np.broadcast_to(leg, (len(group),) + leg.shape)
        wts = w[None, :] * mesh.h_e[group][:, None]
        blocks = np.einsum("eqm,eq,eql->eml", hvals, wts, jump)
        acc.add_blocks(np.where(hdofs >= 0, hdofs + V.dim, -1), tr.dofs, blocks)
    return acc.tocsr()


def _bmdg_matrix(spaces, qdeg):
    """b_MDG(q, v) matrix: rows V, cols Q."""
    Q, V = spaces["Q"], spaces["V"]
    mesh = Q.mesh
    acc = CooAccumulator((V.dim, Q.dim))
    div = _div_coupling_local(Q, V, qdeg)
    acc.add_blocks(V.cell_dofs, Q.cell_dofs, -np.transpose(div, (0, 2, 1)))
    r = edge_rule(qdeg)
    t, w = r.points, r.weights
    interior, _ = edge_groups(mesh)
    if interior.size:
        trQ = EdgeTraces(Q, interior, t)
        trV = EdgeTraces(V, interior, t)
        jn = trQ.jump_normal()
        av = trV.avg_scalar()
        wts = w[None, :] * mesh.h_e[interior][:, None]
        blocks = np.einsum("eql,eq,eqm->elm", av, wts, jn)
        acc.add_blocks(trV.dofs, trQ.dofs, blocks)
    return acc.tocsr()


def _projected_jump_gram(space, proj_degree, per_edge_weight, qdeg, normal, dim_offset=0):
    """Gram of w_e <P_r[jump], P_r[jump]> over the space's DOFs."""
    mesh = space.mesh
    acc = CooAccumulator((space.dim, space.dim))
    r = edge_rule(qdeg)
    t, w = r.points, r.weights
    leg = legendre_values(proj_degree, t)
    gram = 1.0 / (2.0 * np.arange(proj_degree + 1) + 1.0)
    for group in edge_groups(mesh):
        if group.size == 0:
            continue
        wt = per_edge_weight[group]
        active = wt != 0.0
        if not np.any(active):
            continue
        sub = group[active]
        tr = EdgeTraces(space, sub, t)
        jump = tr.jump_normal() if normal else tr.jump_scalar()
        coef = np.einsum("qm,q,eql->eml", leg, w, jump) / gram[None, :, None]
        proj = np.einsum("qm,eml->eql", leg, coef)
        wts = w[None, :] * (mesh.h_e[sub] * wt[active])[:, None]
        blocks = np.einsum("eqi,eq,eqj->eij", proj, wts, proj)
        acc.add_blocks(tr.dofs, tr.dofs, blocks)
    return acc.tocsr()


def _edge_mass(space, per_edge_weight):
    """Diagonal Gram of an edge family weighted per edge."""
    mesh = space.mesh
    rows, data = [], []
    for e in range(mesh.n_edges):
        dofs = space.edge_dofs[e]
        if np.all(dofs < 0) or per_edge_weight[e] == 0.0:
            continue
        g = mesh.h_e[e] / (2.0 * np.arange(space.degree + 1) + 1.0)
        rows.extend(int(d) for d in dofs)
        data.extend(per_edge_weight[e] * g)
    rows = np.asarray(rows, dtype=np.int64)
    data = np.asarray(data, dtype=float)
    return sparse.coo_matrix(
        (data, (rows, rows)), shape=(space.dim, space.dim)
    ).tocsr()


def infsup_estimate(which, mesh, k=0, rho=1.0, space_variant=None, eta_e=1.0,
                    trace_degree=None, alpha=None, expected_kernel=0):
    """Numerical inf-sup constant from the Schur pencil B M^-1 B^T = lam N.

    ``which`` selects the pairing and norms: "WG_grad" (Theorem-4.3
    setting), "WG_div" (Theorem 4.6), "HDG_div" (Theorem 5.4), "MDG"
    (the mixed-DG inf-sup).  Returns beta = sqrt(smallest nonzero
    eigenvalue); zero eigenvalues beyond ``expected_kernel`` raise
    InstabilityError.
    """
    variants = {
        "WG_grad": ("WG", "grad"),
        "WG_div": ("WG", "rt"),
        "HDG_div": ("HDG", "full"),
        "MDG": ("MixedDG_Jump", "full"),
    }
    if which not in variants:
        raise ValueError(f"unknown inf-sup family {which!r}")
    scheme, default_variant = variants[which]
    cfg = MethodConfig(
        scheme=scheme,
        k=k,
        rho=rho,
        eta_e=eta_e,
        space_variant=space_variant or default_variant,
        trace_degree=trace_degree,
        alpha=alpha,
    )
    spaces = build_scheme_spaces(cfg, mesh)
    qdeg = min(2 * max(s.degree for s in spaces.values()) + 2, 20)
    c = cfg.c_matrix

    if which == "WG_grad":
        Q, Qhat, V = spaces["Q"], spaces["Qhat"], spaces["V"]
        acc = CooAccumulator((Q.dim + Qhat.dim,) * 2)
        acc.add_blocks(Q.cell_dofs, Q.cell_dofs, _mass_local(Q, c, qdeg))
        _wg_stabilizer(acc, Q, Qhat, rho * mesh.h_K, qdeg, 0, Q.dim)
        M = acc.tocsr()
        N = _block_from_local(V, _stiffness_local(V, cfg.alpha_matrix, qdeg))
        N = N + _projected_jump_gram(
            V, Qhat.degree, 1.0 / (rho * mesh.h_e), qdeg, normal=False
        )
        B = _bw_matrix(spaces, qdeg)
    elif which == "WG_div":
        Q, Qhat, V = spaces["Q"], spaces["Qhat"], spaces["V"]
        acc = CooAccumulator((Q.dim + Qhat.dim,) * 2)
        acc.add_blocks(Q.cell_dofs, Q.cell_dofs, _mass_local(Q, c, qdeg))
        acc.add_blocks(Q.cell_dofs, Q.cell_dofs, _div_gram_local(Q, qdeg))
        _wg_stabilizer(acc, Q, Qhat, 1.0 / (rho * mesh.h_K), qdeg, 0, Q.dim)
        M = acc.tocsr()
        N = _block_from_local(V, _mass_local(V, None, qdeg))
        B = _bw_matrix(spaces, qdeg)
    elif which == "HDG_div":
        Q, V, Vhat = spaces["Q"], spaces["V"], spaces["Vhat"]
        acc = CooAccumulator((Q.dim, Q.dim))
        acc.add_blocks(Q.cell_dofs, Q.cell_dofs, _mass_local(Q, c, qdeg))
        acc.add_blocks(Q.cell_dofs, Q.cell_dofs, _div_gram_local(Q, qdeg))
        interior = ~mesh.boundary_edges
        M = acc.tocsr() + _projected_jump_gram(
            Q, Vhat.degree, np.where(interior, 1.0 / (rho * mesh.h_e), 0.0),
            qdeg, normal=True,
        )
        Nu = _block_from_local(V, _mass_local(V, None, qdeg))
        Nhat = _edge_mass(Vhat, np.where(interior, rho * mesh.h_e, 0.0))
        N = sparse.block_diag([Nu, Nhat]).tocsr()
        B = _bh_matrix(spaces, qdeg)  # rows (u, u_hat), cols Q
        return _schur_beta(B, M, N, expected_kernel)
    else:  # MDG
        Q, V = spaces["Q"], spaces["V"]
        acc = CooAccumulator((Q.dim, Q.dim))
        acc.add_blocks(Q.cell_dofs, Q.cell_dofs, _mass_local(Q, c, qdeg))
        acc.add_blocks(Q.cell_dofs, Q.cell_dofs, _div_gram_local(Q, qdeg))
        eta = _eta_edges(eta_e, mesh)
        interior = ~mesh.boundary_edges
        M = acc.tocsr() + _projected_jump_gram(
            Q, Q.degree, np.where(interior, eta / mesh.h_e, 0.0), qdeg, normal=True
        )
        N = _block_from_local(V, _mass_local(V, None, qdeg))
        B = _bmdg_matrix(spaces, qdeg)
    return _schur_beta(B, M, N, expected_kernel)


def _block_from_local(space, blocks):
    acc = CooAccumulator((space.dim, space.dim))
    acc.add_blocks(space.cell_dofs, space.cell_dofs, blocks)
    return acc.tocsr()


def _schur_beta(B, M, N, expected_kernel):
    lu = splu(M.tocsc())
    Bt = np.asarray(B.todense()).T
    S = B @ lu.solve(Bt)
    S = np.asarray(S)
    S = 0.5 * (S + S.T)
    vals, _ = gen_eig_smallest(sparse.csr_matrix(S), N, n_smallest=S.shape[0])
    vals = np.asarray(vals)
    tol = max(vals.max(), 1.0) * 1e-10
    nzero = int(np.sum(vals < tol))
    if nzero > expected_kernel:
        raise InstabilityError(
            f"{nzero} near-zero singular directions (expected {expected_kernel})"
        )
    return float(np.sqrt(max(vals[expected_kernel], 0.0)))
