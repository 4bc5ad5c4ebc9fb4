"""Global linear systems for every method in the unified family.

All assembled systems are symmetric: saddle blocks are written with the
second (constraint) row negated, so every scheme reads

    [[A, B^T], [B, C]] x = rhs,      rhs_u = -(f, v).

Stabilization rules follow the two parameterizations used throughout:
eta (or tau) equal to rho*h_K or to 1/(rho*h_K) per element.

The gamma=0 primal DG variants (interior penalty, lifted stabilization)
are assembled in the algebraically equivalent symmetric two-field form
obtained by eliminating {-alpha grad u} through the first equation; this
requires a constant coefficient and grad V_h contained in Q_h, both of
which hold for the supported space choices.
"""

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import sparse

from .dgcalculus import CooAccumulator, EdgeTraces, edge_groups, volume_points
from .linsolve import SingularFactorizationError, factor_solve
from .quadrature import edge_rule, triangle_rule
from .spaces import EdgeField, Field, edge_trace, legendre_values, make_space

SCHEMES = (
    "ConformingPrimal",
    "NonconformingCR",
    "MixedRT",
    "MixedBDM",
    "HybridPrimal",
    "WG",
    "PrimalWG_condensed",
    "HybridMixed",
    "HDG",
    "HDG_reduced",
    "PrimalDG_IP",
    "PrimalDG_LDG",
    "PrimalDG_Bassi",
    "PrimalDG_Brezzi",
    "MixedDG_Jump",
    "MixedDG_Lifting",
)

_DEFAULT_VARIANT = {
    "WG": "rt",
    "HybridPrimal": "grad",
    "HDG": "grad",
    "HDG_reduced": "grad",
    "HybridMixed": "rt",
    "PrimalWG_condensed": "equal",
    "MixedDG_Jump": "full",
    "MixedDG_Lifting": "full",
}


class ConfigError(ValueError):
    """Invalid method configuration."""


@dataclass
class MethodConfig:
    """Scheme selector plus every free parameter of the framework.

    ``eta_rule`` drives the WG stabilizer (eta = rho*h_K or 1/(rho h_K)),
    ``tau_rule`` the HDG one (additionally "zero" for hybrid mixed).
    ``eta_e`` is the DG penalty (scalar or per-edge array), ``beta`` the
    LDG switch vector, ``trace_degree`` the multiplier degree r where a
    choice exists, and ``space_variant`` picks the space family:

    WG/HybridPrimal: "rt" (RT_k shapes), "bdm" (full P_{k+1}), "grad"
    (V^{k+1} x Q^k); HDG-type: "grad" (Q^k x V^{k+1}), "full"
    (Q^{k+1} x V^k), "rt", "equal" (Q^k x V^k); MixedDG: "full" or "rt".
    """

    scheme: str
    k: int = 0
    rho: float = 1.0
    eta_rule: str = "inv_rho_inv_hK"
    tau_rule: str = "inv_rho_inv_hK"
    eta_e: object = 1.0
    beta: tuple = (0.0, 0.0)
    trace_degree: int = None
    space_variant: str = None
    alpha: object = None
    quad_degree: int = None

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown scheme {self.scheme!r}")
        if self.k < 0:
            raise ConfigError("polynomial degree k must be >= 0")
        if self.scheme == "NonconformingCR" and self.k != 0:
            raise ConfigError("the CR scheme is defined for k = 0")
        if self.rho <= 0:
            raise ConfigError("rho must be positive")
        if self.eta_rule not in ("rho_times_hK", "inv_rho_inv_hK"):
            raise ConfigError(f"unknown eta_rule {self.eta_rule!r}")
        if self.tau_rule not in ("rho_times_hK", "inv_rho_inv_hK", "zero"):
            raise ConfigError(f"unknown tau_rule {self.tau_rule!r}")
        if self.scheme.startswith(("MixedDG", "PrimalDG")):
            eta = np.asarray(self.eta_e, dtype=float)
            if np.any(eta <= 0):
                raise ConfigError("eta_e must be positive (coercivity)")
        beta = np.asarray(self.beta, dtype=float)
        if beta.shape != (2,):
            raise ConfigError("beta must be a 2-vector")
        if self.space_variant is None:
            object.__setattr__(self, "space_variant", _DEFAULT_VARIANT.get(self.scheme))

    @property
    def alpha_matrix(self):
        if self.alpha is None:
            return np.eye(2)
        a = np.asarray(self.alpha, dtype=float)
        if a.ndim == 0:
            return float(a) * np.eye(2)
        if a.shape != (2, 2):
            raise ConfigError("alpha must be a scalar or a 2x2 SPD matrix")
        return a

    @property
    def c_matrix(self):
        return np.linalg.inv(self.alpha_matrix)


@dataclass
class LinearSystem:
    """Assembled sparse symmetric block system with DOF partition labels."""

    matrix: sparse.csr_matrix
    rhs: np.ndarray
    partition: dict
    scheme: str
    config: MethodConfig
    spaces: dict
    mesh: object
    recover: object = None  # optional post-solve field recovery

    @property
    def dim(self):
        return self.matrix.shape[0]

    def symmetry_gap(self):
        gap = abs(self.matrix - self.matrix.T)
        return float(gap.max()) if gap.nnz else 0.0


@dataclass
class DiscreteSolution:
    """Per-field coefficient vectors of a solved system."""

    fields: dict
    config: MethodConfig
    mesh: object
    residual: float

    def __getitem__(self, name):
        return self.fields[name]

    @property
    def p(self):
        return self.fields.get("p")

    @property
    def u(self):
        return self.fields.get("u")

    @property
    def p_hat(self):
        return self.fields.get("p_hat")

    @property
    def u_hat(self):
        return self.fields.get("u_hat")


# --------------------------------------------------------------------------
# assembly helpers
# --------------------------------------------------------------------------


def _quad_degrees(config, spaces):
    degs = [s.degree for s in spaces.values()]
    top = max(degs)
    d = config.quad_degree if config.quad_degree else 2 * top + 2
    return min(d, 20)


def _stab_values(rule_name, rho, h):
    if rule_name == "rho_times_hK":
        return rho * h
    if rule_name == "inv_rho_inv_hK":
        return 1.0 / (rho * h)
    if rule_name == "zero":
        return np.zeros_like(h)
    raise ConfigError(f"unknown stabilization rule {rule_name!r}")


def _eta_edges(eta_e, mesh):
    eta = np.asarray(eta_e, dtype=float)
    if eta.ndim == 0:
        return np.full(mesh.n_edges, float(eta))
    if eta.shape != (mesh.n_edges,):
        raise ConfigError("per-edge eta_e must have one value per mesh edge")
    return eta


def _mass_local(space, weight, qdeg):
    """Local weighted mass blocks (nt, nloc, nloc)."""
    mesh = space.mesh
    rule = triangle_rule(qdeg)
    det = 2.0 * mesh.signed_areas()
    eids = np.arange(mesh.n_elements)
    vals = space.values_at(eids, rule.points)
    if space.is_vector:
        w = np.eye(2) if weight is None else np.asarray(weight, dtype=float)
        blocks = np.einsum("eqla,ab,eqmb,q->elm", vals, w, vals, rule.weights)
    else:
        blocks = np.einsum("eql,eqm,q->elm", vals, vals, rule.weights)
        if weight is not None:
            blocks = blocks * float(weight)
    return blocks * det[:, None, None]


def _div_gram_local(space, qdeg):
    mesh = space.mesh
    rule = triangle_rule(qdeg)
    det = 2.0 * mesh.signed_areas()
    dv = space.divergences_at(np.arange(mesh.n_elements), rule.points)
    return np.einsum("eql,eqm,q->elm", dv, dv, rule.weights) * det[:, None, None]


def _stiffness_local(space, alpha, qdeg):
    mesh = space.mesh
    rule = triangle_rule(qdeg)
    det = 2.0 * mesh.signed_areas()
    g = space.gradients_at(np.arange(mesh.n_elements), rule.points)
    a = np.eye(2) if alpha is None else np.asarray(alpha, dtype=float)
    return np.einsum("eqla,ab,eqmb,q->elm", g, a, g, rule.weights) * det[:, None, None]


def _grad_coupling_local(Q, V, qdeg):
    """Blocks (nt, nlocQ, nlocV) of (q_i, grad v_j)."""
    mesh = Q.mesh
    rule = triangle_rule(qdeg)
    det = 2.0 * mesh.signed_areas()
    eids = np.arange(mesh.n_elements)
    qv = Q.values_at(eids, rule.points)
    gv = V.gradients_at(eids, rule.points)
    return np.einsum("eqia,eqja,q->eij", qv, gv, rule.weights) * det[:, None, None]


def _div_coupling_local(Q, V, qdeg):
    """Blocks (nt, nlocQ, nlocV) of (div q_i, v_j)."""
    mesh = Q.mesh
    rule = triangle_rule(qdeg)
    det = 2.0 * mesh.signed_areas()
    eids = np.arange(mesh.n_elements)
    dv = Q.divergences_at(eids, rule.points)
    vv = V.values_at(eids, rule.points)
    return np.einsum("eqi,eqj,q->eij", dv, vv, rule.weights) * det[:, None, None]


def _load_vector(V, f, qdeg):
    mesh = V.mesh
    rule = triangle_rule(qdeg)
    det = 2.0 * mesh.signed_areas()
    eids = np.arange(mesh.n_elements)
    vv = V.values_at(eids, rule.points)
    phys = volume_points(mesh, rule)
    fv = np.asarray(f(phys.reshape(-1, 2)), dtype=float).reshape(phys.shape[:2])
    cells = np.einsum("eql,eq,q->el", vv, fv, rule.weights) * det[:, None]
    out = np.zeros(V.dim)
    dofs = V.cell_dofs.ravel()
    keep = dofs >= 0
    np.add.at(out, dofs[keep], cells.ravel()[keep])
    return out


def _edge_rule_t(qdeg):
    r = edge_rule(qdeg)
    return r.points, r.weights


# --------------------------------------------------------------------------
# scheme space selection
# --------------------------------------------------------------------------


def build_scheme_spaces(config, mesh):
    """Construct the spaces a scheme needs, keyed by their role."""
    k, variant = config.k, config.space_variant
    s = config.scheme
    if s in ("ConformingPrimal", "NonconformingCR"):
        if s == "ConformingPrimal":
            V = make_space("Lagrange_cont", k + 1, mesh, zero_boundary=True)
        else:
            V = make_space("CR_nonconforming", 0, mesh, zero_boundary=True)
        return {"V": V, "Q": make_space("P_disc_vector", k, mesh)}
    if s == "MixedRT":
        return {
            "Q": make_space("RT_conf", k, mesh),
            "V": make_space("P_disc_scalar", k, mesh),
        }
    if s == "MixedBDM":
        return {
            "Q": make_space("BDM_conf", k + 1, mesh),
            "V": make_space("P_disc_scalar", k, mesh),
        }
    if s in ("WG", "HybridPrimal"):
        if variant == "rt":
            return {
                "Q": make_space("RT_disc", k, mesh),
                "Qhat": make_space("Edge_normal_vector", k, mesh),
                "V": make_space("P_disc_scalar", k, mesh),
            }
        if variant == "bdm":
            return {
                "Q": make_space("P_disc_vector", k + 1, mesh),
                "Qhat": make_space("Edge_normal_vector", k + 1, mesh),
                "V": make_space("P_disc_scalar", k, mesh),
            }
        if variant == "grad":
            return {
                "Q": make_space("P_disc_vector", k, mesh),
                "Qhat": make_space("Edge_normal_vector", k, mesh),
                "V": make_space("P_disc_scalar", k + 1, mesh),
            }
        raise ConfigError(f"unknown WG space variant {variant!r}")
    if s in ("HybridMixed", "HDG", "HDG_reduced", "PrimalWG_condensed"):
        r = config.trace_degree
        if variant == "grad":
            Q = make_space("P_disc_vector", k, mesh)
            V = make_space("P_disc_scalar", k + 1, mesh)
            r = k + 1 if r is None else r
        elif variant == "full":
            Q = make_space("P_disc_vector", k + 1, mesh)
            V = make_space("P_disc_scalar", k, mesh)
            r = k + 1 if r is None else r
        elif variant == "rt":
            Q = make_space("RT_disc", k, mesh)
            V = make_space("P_disc_scalar", k, mesh)
            r = k if r is None else r
        elif variant == "equal":
            Q = make_space("P_disc_vector", k, mesh)
            V = make_space("P_disc_scalar", k, mesh)
            r = k if r is None else r
        else:
            raise ConfigError(f"unknown HDG space variant {variant!r}")
        return {
            "Q": Q,
            "V": V,
            "Vhat": make_space("Edge_scalar", r, mesh, zero_boundary=True),
        }
    if s.startswith("PrimalDG"):
        return {
            "Q": make_space("P_disc_vector", k, mesh),
            "V": make_space("P_disc_scalar", k, mesh),
        }
    if s.startswith("MixedDG"):
        if variant == "rt":
            Q = make_space("RT_disc", k, mesh)
        elif variant == "full":
            Q = make_space("P_disc_vector", k + 1, mesh)
        else:
            raise ConfigError(f"unknown MixedDG space variant {variant!r}")
        return {"Q": Q, "V": make_space("P_disc_scalar", k, mesh)}
    raise ConfigError(f"no spaces defined for scheme {s!r}")


# --------------------------------------------------------------------------
# edge-term assembly pieces
# --------------------------------------------------------------------------


def _wg_stabilizer(acc, Q, Qhat, eta_by_element, qdeg, off_p, off_phat):
    """sum_K <eta (p - phat).n_K, (q - qhat).n_K>_dK into the accumulator."""
    mesh = Q.mesh
    t, w = _edge_rule_t(qdeg)
    leg = legendre_values(Qhat.degree, t)
    for group in edge_groups(mesh):
        if group.size == 0:
            continue
        boundary = bool(mesh.boundary_edges[group[0]])
        hdofs = Qhat.edge_dofs[group]
        sides = [0] if boundary else [0, 1]
        for side in sides:
            vals, eids = edge_trace(Q, group, side, t)
            ntr = np.einsum("eqla,ea->eql", vals, mesh.n_e[group])
            hvals = -np.broadcast_to(leg, (len(group),) + leg.shape)
            comb = np.concatenate([ntr, hvals], axis=2)
            dofs = np.concatenate(
                [
                    Q.cell_dofs[eids] + off_p,
                    np.where(hdofs >= 0, hdofs + off_phat, -1),
                ],
                axis=1,
            )
            eta = eta_by_element[eids]
            wts = w[None, :] * (mesh.h_e[group] * eta)[:, None]
            blocks = np.einsum("eqi,eq,eqj->eij", comb, wts, comb)
            acc.add_blocks(dofs, dofs, blocks)


def _hdg_stabilizer(acc, V, Vhat, tau_by_element, qdeg, off_u, off_uhat, reduced):
    """-sum_K <tau (Pu - uhat), (Pv - vhat)>_dK into the accumulator."""
    mesh = V.mesh
    t, w = _edge_rule_t(qdeg)
    r = Vhat.degree
    leg = legendre_values(r, t)
    for group in edge_groups(mesh):
        if group.size == 0:
            continue
        boundary = bool(mesh.boundary_edges[group[0]])
        hdofs = Vhat.edge_dofs[group]
        for side in [0] if boundary else [0, 1]:
            vals, eids = edge_trace(V, group, side, t)
            if reduced:
                # Project the volume trace onto P_r(e) before penalizing.
                gram = 1.0 / (2.0 * np.arange(r + 1) + 1.0)
                coef = np.einsum("qm,q,eql->eml", leg, w, vals) / gram[None, :, None]
                vals = np.einsum("qm,eml->eql", leg, coef)
            hvals = -np.broadcast_to(leg, (len(group),) + leg.shape)
            comb = np.concatenate([vals, hvals], axis=2)
            dofs = np.concatenate(
                [
                    V.cell_dofs[eids] + off_u,
                    np.where(hdofs >= 0, hdofs + off_uhat, -1),
                ],
                axis=1,
            )
            tau = tau_by_element[eids]
            wts = w[None, :] * (mesh.h_e[group] * tau)[:, None]
            blocks = -np.einsum("eqi,eq,eqj->eij", comb, wts, comb)
            acc.add_blocks(dofs, dofs, blocks)


def _bw_trace_blocks(acc, V, Qhat, qdeg, off_u, off_phat):
    """-<phat . n_K, v>_dTh = -sum_e int_e s [v]; symmetric twin included."""
    mesh = V.mesh
    t, w = _edge_rule_t(qdeg)
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
        rows = tr.dofs + np.where(tr.dofs >= 0, off_u, 0)
        cols = np.where(hdofs >= 0, hdofs + off_phat, -1)
        acc.add_blocks(rows, cols, blocks)
        acc.add_blocks(cols, rows, np.transpose(blocks, (0, 2, 1)))


def _bh_trace_blocks(acc, Q, Vhat, qdeg, off_p, off_uhat):
    """<uhat, [q]> on interior edges; symmetric twin included."""
    mesh = Q.mesh
    t, w = _edge_rule_t(qdeg)
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
        blocks = np.einsum("eql,eq,eqm->elm", jump, wts, hvals)
        rows = tr.dofs + np.where(tr.dofs >= 0, off_p, 0)
        cols = np.where(hdofs >= 0, hdofs + off_uhat, -1)
        acc.add_blocks(rows, cols, blocks)
        acc.add_blocks(cols, rows, np.transpose(blocks, (0, 2, 1)))


def _jump_jump_blocks(acc, space, weights_per_edge, qdeg, off, normal_jump):
    """<w [x], [y]> over the given per-edge weights (zero-weight edges skipped)."""
    mesh = space.mesh
    t, w = _edge_rule_t(qdeg)
    for group in edge_groups(mesh):
        if group.size == 0:
            continue
        wt_edges = weights_per_edge[group]
        active = wt_edges != 0.0
        if not np.any(active):
            continue
        sub = group[active]
        tr = EdgeTraces(space, sub, t)
        jump = tr.jump_normal() if normal_jump else tr.jump_scalar()
        wts = w[None, :] * (mesh.h_e[sub] * wt_edges[active])[:, None]
        blocks = np.einsum("eqi,eq,eqj->eij", jump, wts, jump)
        dofs = tr.dofs + np.where(tr.dofs >= 0, off, 0)
        acc.add_blocks(dofs, dofs, blocks)


def _avg_jump_blocks(acc, Q, V, qdeg, off_p, off_u, beta=None, sign=-1.0):
    """sign * <jump(u), {q}> over all edges (rows q, cols u), plus twin.

    With ``beta`` given, adds <(beta.n_e)[u],[q]> on interior edges too.
    """
    mesh = Q.mesh
    t, w = _edge_rule_t(qdeg)
    for group in edge_groups(mesh):
        if group.size == 0:
            continue
        trQ = EdgeTraces(Q, group, t)
        trV = EdgeTraces(V, group, t)
        avgn = trQ.avg_normal()
        jump = trV.jump_scalar()
        wts = w[None, :] * mesh.h_e[group][:, None]
        blocks = sign * np.einsum("eqi,eq,eqj->eij", avgn, wts, jump)
        if beta is not None and not mesh.boundary_edges[group[0]]:
            bn = mesh.n_e[group] @ np.asarray(beta, dtype=float)
            jn = trQ.jump_normal()
            blocks += np.einsum(
                "eqi,eq,eqj->eij", jn, wts * bn[:, None], jump
            )
        rows = trQ.dofs + np.where(trQ.dofs >= 0, off_p, 0)
        cols = trV.dofs + np.where(trV.dofs >= 0, off_u, 0)
        acc.add_blocks(rows, cols, blocks)
        acc.add_blocks(cols, rows, np.transpose(blocks, (0, 2, 1)))


def _avg_jump_mixed_blocks(acc, Q, V, qdeg, off_p, off_u):
    """<[q], {v}> on interior edges (rows q, cols v), plus twin."""
    mesh = Q.mesh
    t, w = _edge_rule_t(qdeg)
    interior, _ = edge_groups(mesh)
    if interior.size == 0:
        return
    trQ = EdgeTraces(Q, interior, t)
    trV = EdgeTraces(V, interior, t)
    jn = trQ.jump_normal()
    av = trV.avg_scalar()
    wts = w[None, :] * mesh.h_e[interior][:, None]
    blocks = np.einsum("eqi,eq,eqj->eij", jn, wts, av)
    rows = trQ.dofs + np.where(trQ.dofs >= 0, off_p, 0)
    cols = trV.dofs + np.where(trV.dofs >= 0, off_u, 0)
    acc.add_blocks(rows, cols, blocks)
    acc.add_blocks(cols, rows, np.transpose(blocks, (0, 2, 1)))


def _lifting_penalty_blocks(
    acc, jump_space, lift_space, weight_matrix, eta_edges, qdeg, off, normal_jump,
    global_cross=False, cross_weight=None,
):
    """Penalties built from per-edge liftings of jumps.

    Adds sum_e eta_e (W r_e(j(x)), r_e(j(y))) to the (off, off) block,
    where j is the scalar jump [x] n_e (normal_jump=False, lift into a
    vector space) or the normal jump [x] (normal_jump=True, lift into a
    scalar space).  With ``global_cross`` the assembled term is instead
    (W r(j(x)), r(j(y))) with r = sum_e r_e (cross terms between edges of
    one element included), weighted by ``cross_weight``.
    """
    mesh = jump_space.mesh
    t, w = _edge_rule_t(qdeg)
    vrule = triangle_rule(qdeg)
    det = 2.0 * mesh.signed_areas()
    eids_all = np.arange(mesh.n_elements)
    vals_all = lift_space.values_at(eids_all, vrule.points)
    if lift_space.is_vector:
        mass = np.einsum(
            "eqla,eqma,q->elm", vals_all, vals_all, vrule.weights
        ) * det[:, None, None]
        wmat = np.eye(2) if weight_matrix is None else np.asarray(weight_matrix)
        wmass = np.einsum(
            "eqla,ab,eqmb,q->elm", vals_all, wmat, vals_all, vrule.weights
        ) * det[:, None, None]
    else:
        mass = np.einsum(
            "eql,eqm,q->elm", vals_all, vals_all, vrule.weights
        ) * det[:, None, None]
        wmass = mass if weight_matrix is None else mass * float(weight_matrix)
    minv = np.linalg.inv(mass)

    if global_cross:
        rmap = CooAccumulator((lift_space.dim, jump_space.dim))

    for group in edge_groups(mesh):
        if group.size == 0:
            continue
        boundary = bool(mesh.boundary_edges[group[0]])
        avg = 1.0 if boundary else 0.5
        trJ = EdgeTraces(jump_space, group, t)
        jump = trJ.jump_normal() if normal_jump else trJ.jump_scalar()
        sides = [0] if boundary else [0, 1]
        side_maps = []
        side_eids = []
        for side in sides:
            vals, eids = edge_trace(lift_space, group, side, t)
            if lift_space.is_vector:
                # lifted datum is [x] n_e: pair with q . n_e traces
                tvals = np.einsum("eqla,ea->eql", vals, mesh.n_e[group])
            else:
                tvals = vals
            wts = w[None, :] * mesh.h_e[group][:, None]
            rhs = -avg * np.einsum("eql,eq,eqj->elj", tvals, wts, jump)
            rmaps = np.einsum("elm,emj->elj", minv[eids], rhs)
            side_maps.append(rmaps)
            side_eids.append(eids)
            if global_cross:
                rows = np.broadcast_to(
                    lift_space.cell_dofs[eids][:, :, None], rmaps.shape
                ).reshape(len(group), -1)
                cols = np.broadcast_to(
                    trJ.dofs[:, None, :], rmaps.shape
                ).reshape(len(group), -1)
                keep = (rows.ravel() >= 0) & (cols.ravel() >= 0)
                rmap._rows.append(rows.ravel()[keep])
                rmap._cols.append(cols.ravel()[keep])
                rmap._data.append(rmaps.ravel()[keep])
        if eta_edges is not None:
            etas = eta_edges[group]
            jd = trJ.dofs + np.where(trJ.dofs >= 0, off, 0)
            for rmaps, eids in zip(side_maps, side_eids):
                blocks = np.einsum(
                    "eli,elm,emj->eij", rmaps, wmass[eids], rmaps
                ) * etas[:, None, None]
                acc.add_blocks(jd, jd, blocks)

    if global_cross:
        R = rmap.tocsr()
        W = _block_diag_sparse(lift_space, wmass if cross_weight is None else cross_weight)
        C = (R.T @ (W @ R)).tocoo()
        acc._rows.append(C.row + off)
        acc._cols.append(C.col + off)
        acc._data.append(C.data)
        return R
    return None


def _block_diag_sparse(space, local_blocks):
    acc = CooAccumulator((space.dim, space.dim))
    acc.add_blocks(space.cell_dofs, space.cell_dofs, local_blocks)
    return acc.tocsr()


# --------------------------------------------------------------------------
# scheme assemblers
# --------------------------------------------------------------------------


def assemble_wg(config, mesh, case):
    """Stabilized hybrid primal (WG) system in (p, p_hat, u).

    eta = 0 (HybridPrimal) gives the unstabilized hybrid primal method,
    whose factorization is singular for unstable space pairs.
    """
    if config.scheme not in ("WG", "HybridPrimal"):
        raise ConfigError("assemble_wg expects scheme WG or HybridPrimal")
    spaces = build_scheme_spaces(config, mesh)
    Q, Qhat, V = spaces["Q"], spaces["Qhat"], spaces["V"]
    qdeg = _quad_degrees(config, spaces)
    np_, nh, nu = Q.dim, Qhat.dim, V.dim
    off_p, off_phat, off_u = 0, np_, np_ + nh
    acc = CooAccumulator((np_ + nh + nu, np_ + nh + nu))

    acc.add_blocks(Q.cell_dofs, Q.cell_dofs, _mass_local(Q, config.c_matrix, qdeg))
    if config.scheme == "WG":
        eta = _stab_values(config.eta_rule, config.rho, mesh.h_K)
        _wg_stabilizer(acc, Q, Qhat, eta, qdeg, off_p, off_phat)

    grad = _grad_coupling_local(Q, V, qdeg)
    acc.add_blocks(Q.cell_dofs, V.cell_dofs + off_u, grad)
    acc.add_blocks(V.cell_dofs + off_u, Q.cell_dofs, np.transpose(grad, (0, 2, 1)))
    _bw_trace_blocks(acc, V, Qhat, qdeg, off_u, off_phat)

    rhs = np.zeros(np_ + nh + nu)
    rhs[off_u:] = -_load_vector(V, case.f, qdeg)
    return LinearSystem(
        acc.tocsr(),
        rhs,
        {"p": slice(0, np_), "p_hat": slice(np_, np_ + nh), "u": slice(off_u, off_u + nu)},
        config.scheme,
        config,
        spaces,
        mesh,
    )


def assemble_hdg(config, mesh, case):
    """Stabilized hybrid mixed (HDG) system in (p, u, u_hat).

    tau = 0 (HybridMixed) gives the hybrid mixed method; HDG_reduced
    projects the volume trace onto the multiplier space inside the
    stabilizer.
    """
    if config.scheme not in ("HDG", "HDG_reduced", "HybridMixed"):
        raise ConfigError("assemble_hdg expects an HDG-type scheme")
    spaces = build_scheme_spaces(config, mesh)
    Q, V, Vhat = spaces["Q"], spaces["V"], spaces["Vhat"]
    qdeg = _quad_degrees(config, spaces)
    np_, nu, nh = Q.dim, V.dim, Vhat.dim
    off_p, off_u, off_uhat = 0, np_, np_ + nu
    acc = CooAccumulator((np_ + nu + nh, np_ + nu + nh))

    acc.add_blocks(Q.cell_dofs, Q.cell_dofs, _mass_local(Q, config.c_matrix, qdeg))
    div = _div_coupling_local(Q, V, qdeg)  # (div q_i, v_j)
    acc.add_blocks(Q.cell_dofs, V.cell_dofs + off_u, -div)
    acc.add_blocks(V.cell_dofs + off_u, Q.cell_dofs, -np.transpose(div, (0, 2, 1)))
    _bh_trace_blocks(acc, Q, Vhat, qdeg, off_p, off_uhat)
    tau_rule = "zero" if config.scheme == "HybridMixed" else config.tau_rule
    tau = _stab_values(tau_rule, config.rho, mesh.h_K)
    if tau_rule != "zero":
        _hdg_stabilizer(
            acc, V, Vhat, tau, qdeg, off_u, off_uhat,
            reduced=(config.scheme == "HDG_reduced"),
        )

    rhs = np.zeros(np_ + nu + nh)
    rhs[off_u : off_u + nu] = -_load_vector(V, case.f, qdeg)
    return LinearSystem(
        acc.tocsr(),
        rhs,
        {
            "p": slice(0, np_),
            "u": slice(off_u, off_u + nu),
            "u_hat": slice(off_uhat, off_uhat + nh),
        },
        config.scheme,
        config,
        spaces,
        mesh,
    )


def assemble_primal_wg_condensed(config, mesh, case):
    """Schur complement of the stabilized hybrid system onto (u, u_hat).

    Valid for piecewise-constant alpha: the p-block mass is inverted
    element by element, producing the weak-gradient primal form with the
    penalty eta <u - u_hat, v - v_hat>.
    """
    if config.scheme != "PrimalWG_condensed":
        raise ConfigError("assemble_primal_wg_condensed expects PrimalWG_condensed")
    if callable(config.alpha):
        raise ConfigError("condensation needs a piecewise-constant alpha")
    full = assemble_hdg(
        replace(config, scheme="HDG", tau_rule=config.eta_rule), mesh, case
    )
    return _schur_condense_p(full, flip_sign=True)


def _schur_condense_p(system, flip_sign):
    """Eliminate the leading p-block (element-diagonal mass) by Schur."""
    sl_p = system.partition["p"]
    np_ = sl_p.stop - sl_p.start
    A = system.matrix.tocsc()
    M = A[:np_, :np_]
    B = A[np_:, :np_]
    C = A[np_:, np_:]
    Q = system.spaces["Q"]
    qdeg = _quad_degrees(system.config, system.spaces)
    mass = _mass_local(Q, system.config.c_matrix, qdeg)
    minv_acc = CooAccumulator((Q.dim, Q.dim))
    minv_acc.add_blocks(Q.cell_dofs, Q.cell_dofs, np.linalg.inv(mass))
    Minv = minv_acc.tocsr()
    S = (C - B @ (Minv @ B.T)).tocsr()
    rhs = system.rhs[np_:] - B @ (Minv @ system.rhs[:np_])
    if flip_sign:
        S = (-S).tocsr()
        rhs = -rhs
    part = {}
    for name, sl in system.partition.items():
        if name == "p":
            continue
        part[name] = slice(sl.start - np_, sl.stop - np_)
    return LinearSystem(
        S, rhs, part, "PrimalWG_condensed", system.config, system.spaces, system.mesh
    )


def assemble_mixed(config, mesh, case, g1=None, g2=None):
    """Conforming mixed method (RT or BDM) as a symmetric saddle system.

    ``g1``/``g2`` are the optional data hooks of the limit analysis
    (volume vector load in the first equation, element-boundary datum in
    the second); both default to zero for the model problem.
    """
    if config.scheme not in ("MixedRT", "MixedBDM"):
        raise ConfigError("assemble_mixed expects MixedRT or MixedBDM")
    spaces = build_scheme_spaces(config, mesh)
    Q, V = spaces["Q"], spaces["V"]
    qdeg = _quad_degrees(config, spaces)
    np_, nu = Q.dim, V.dim
    acc = CooAccumulator((np_ + nu, np_ + nu))
    acc.add_blocks(Q.cell_dofs, Q.cell_dofs, _mass_local(Q, config.c_matrix, qdeg))
    div = _div_coupling_local(Q, V, qdeg)
    acc.add_blocks(Q.cell_dofs, V.cell_dofs + np_, -div)
    acc.add_blocks(V.cell_dofs + np_, Q.cell_dofs, -np.transpose(div, (0, 2, 1)))

    rhs = np.zeros(np_ + nu)
    rhs[np_:] = -_load_vector(V, case.f, qdeg)
    if g1 is not None:
        rule = triangle_rule(qdeg)
        det = 2.0 * mesh.signed_areas()
        eids = np.arange(mesh.n_elements)
        qv = Q.values_at(eids, rule.points)
        phys = volume_points(mesh, rule)
        gv = np.asarray(g1(phys.reshape(-1, 2))).reshape(phys.shape)
        cells = np.einsum("eqla,eqa,q->el", qv, gv, rule.weights) * det[:, None]
        keep = Q.cell_dofs.ravel() >= 0
        np.add.at(rhs, Q.cell_dofs.ravel()[keep], cells.ravel()[keep])
    if g2 is not None:
        t, w = _edge_rule_t(qdeg)
        for group in edge_groups(mesh):
            if group.size == 0:
                continue
            tr = EdgeTraces(V, group, t)
            # sum_K <g2, v>_dK picks up both sides of interior edges.
            vals = (
                np.concatenate([tr.plus, tr.minus], axis=2)
                if tr.minus is not None
                else tr.plus
            )
            a = mesh.vertices[mesh.edges[group, 0]]
            b = mesh.vertices[mesh.edges[group, 1]]
            phys = a[:, None, :] + t[None, :, None] * (b - a)[:, None, :]
            g2v = np.asarray(g2(phys.reshape(-1, 2))).reshape(phys.shape[:2])
            wts = w[None, :] * mesh.h_e[group][:, None]
            cells = -np.einsum("eql,eq,eq->el", vals, g2v, wts)
            dofs = tr.dofs + np_
            keep = dofs.ravel() >= 0
            np.add.at(rhs, dofs.ravel()[keep], cells.ravel()[keep])
    return LinearSystem(
        acc.tocsr(),
        rhs,
        {"p": slice(0, np_), "u": slice(np_, np_ + nu)},
        config.scheme,
        config,
        spaces,
        mesh,
    )


def assemble_primal(config, mesh, case, g1=None, g2=None):
    """Conforming or CR primal method: stiffness system for u.

    The flux p is recovered after the solve as the weighted projection
    solving (c p, q) + (grad u, q) = (g1, q) + <g2, q.n>.
    """
    if config.scheme not in ("ConformingPrimal", "NonconformingCR"):
        raise ConfigError("assemble_primal expects a primal scheme")
    spaces = build_scheme_spaces(config, mesh)
    V, Q = spaces["V"], spaces["Q"]
    qdeg = _quad_degrees(config, spaces)
    acc = CooAccumulator((V.dim, V.dim))
    acc.add_blocks(V.cell_dofs, V.cell_dofs, _stiffness_local(V, config.alpha_matrix, qdeg))
    rhs = _load_vector(V, case.f, qdeg)

    rule = triangle_rule(qdeg)
    det = 2.0 * mesh.signed_areas()
    eids = np.arange(mesh.n_elements)
    qv = Q.values_at(eids, rule.points)
    mass_c = _mass_local(Q, config.c_matrix, qdeg)
    g_rhs_local = np.zeros((mesh.n_elements, Q.n_local))
    if g1 is not None:
        phys = volume_points(mesh, rule)
        gv = np.asarray(g1(phys.reshape(-1, 2))).reshape(phys.shape)
        g_rhs_local += np.einsum("eqla,eqa,q->el", qv, gv, rule.weights) * det[:, None]
    if g2 is not None:
        t, w = _edge_rule_t(qdeg)
        for group in edge_groups(mesh):
            if group.size == 0:
                continue
            boundary = bool(mesh.boundary_edges[group[0]])
            for side in [0] if boundary else [0, 1]:
                vals, el = edge_trace(Q, group, side, t)
                sgn = 1.0 if side == 0 else -1.0
                ntr = sgn * np.einsum("eqla,ea->eql", vals, mesh.n_e[group])
                a = mesh.vertices[mesh.edges[group, 0]]
                b = mesh.vertices[mesh.edges[group, 1]]
                phys = a[:, None, :] + t[None, :, None] * (b - a)[:, None, :]
                g2v = np.asarray(g2(phys.reshape(-1, 2))).reshape(phys.shape[:2])
                wts = w[None, :] * mesh.h_e[group][:, None]
                np.add.at(
                    g_rhs_local,
                    el,
                    np.einsum("eql,eq,eq->el", ntr, g2v, wts),
                )
    if g1 is not None or g2 is not None:
        # (alpha G1, grad v) enters the condensed right-hand side, with G1
        # the weighted Riesz representative of the g data in Q.
        gcoef = np.linalg.solve(mass_c, g_rhs_local[..., None])[..., 0]
        gv_grad = V.gradients_at(eids, rule.points)
        qvals = np.einsum("el,eqla->eqa", gcoef, qv)
        cells = np.einsum(
            "eqa,ab,eqlb,q->el", qvals, config.alpha_matrix, gv_grad, rule.weights
        ) * det[:, None]
        keep = V.cell_dofs.ravel() >= 0
        np.add.at(rhs, V.cell_dofs.ravel()[keep], cells.ravel()[keep])

    grad_blocks = _grad_coupling_local(Q, V, qdeg)

    def recover(u_coefs):
        local_u = np.where(
            V.cell_dofs >= 0, u_coefs[np.maximum(V.cell_dofs, 0)], 0.0
        )
        rhs_p = -np.einsum("eij,ej->ei", grad_blocks, local_u) + g_rhs_local
        pcoef = np.linalg.solve(mass_c, rhs_p[..., None])[..., 0]
        out = np.zeros(Q.dim)
        out[Q.cell_dofs] = pcoef
        return {"p": Field(Q, out)}

    return LinearSystem(
        acc.tocsr(),
        rhs,
        {"u": slice(0, V.dim)},
        config.scheme,
        config,
        spaces,
        mesh,
        recover=recover,
    )


def assemble_primal_dg(config, mesh, case):
    """Two-field primal DG schemes (IP, LDG, Bassi, Brezzi), symmetric form."""
    if not config.scheme.startswith("PrimalDG"):
        raise ConfigError("assemble_primal_dg expects a PrimalDG scheme")
    spaces = build_scheme_spaces(config, mesh)
    Q, V = spaces["Q"], spaces["V"]
    qdeg = _quad_degrees(config, spaces)
    np_, nu = Q.dim, V.dim
    off_u = np_
    acc = CooAccumulator((np_ + nu, np_ + nu))
    eta = _eta_edges(config.eta_e, mesh)
    variant = config.scheme.split("_", 1)[1]
    beta = np.asarray(config.beta, dtype=float)
    if variant in ("IP", "Bassi", "Brezzi") and np.any(beta != 0.0):
        raise ConfigError(f"{config.scheme} fixes beta = 0")

    acc.add_blocks(Q.cell_dofs, Q.cell_dofs, _mass_local(Q, config.c_matrix, qdeg))
    grad = _grad_coupling_local(Q, V, qdeg)
    acc.add_blocks(Q.cell_dofs, V.cell_dofs + off_u, grad)
    acc.add_blocks(V.cell_dofs + off_u, Q.cell_dofs, np.transpose(grad, (0, 2, 1)))
    _avg_jump_blocks(
        acc, Q, V, qdeg, 0, off_u,
        beta=beta if variant == "LDG" else None, sign=-1.0,
    )

    if variant in ("IP", "LDG"):
        _jump_jump_blocks(acc, V, -eta / mesh.h_e, qdeg, off_u, normal_jump=False)
    if variant in ("Bassi", "Brezzi"):
        _lifting_penalty_blocks(
            acc, V, Q, None, -eta, qdeg, off_u, normal_jump=False,
        )
    if variant in ("IP", "Bassi"):
        # gamma = 0: add the (alpha r(jump u), r(jump v)) correction that
        # symmetrizes the {-alpha grad u} flux.
        _lifting_penalty_blocks(
            acc, V, Q, config.alpha_matrix, None, qdeg, off_u,
            normal_jump=False, global_cross=True,
        )

    rhs = np.zeros(np_ + nu)
    rhs[off_u:] = -_load_vector(V, case.f, qdeg)
    return LinearSystem(
        acc.tocsr(),
        rhs,
        {"p": slice(0, np_), "u": slice(off_u, off_u + nu)},
        config.scheme,
        config,
        spaces,
        mesh,
    )


def assemble_mixed_dg(config, mesh, case):
    """Mixed DG schemes: jump penalty or lifted penalty on [p]."""
    if not config.scheme.startswith("MixedDG"):
        raise ConfigError("assemble_mixed_dg expects a MixedDG scheme")
    spaces = build_scheme_spaces(config, mesh)
    Q, V = spaces["Q"], spaces["V"]
    qdeg = _quad_degrees(config, spaces)
    np_, nu = Q.dim, V.dim
    acc = CooAccumulator((np_ + nu, np_ + nu))
    eta = _eta_edges(config.eta_e, mesh)
    interior = ~mesh.boundary_edges

    acc.add_blocks(Q.cell_dofs, Q.cell_dofs, _mass_local(Q, config.c_matrix, qdeg))
    if config.scheme == "MixedDG_Jump":
        _jump_jump_blocks(
            acc, Q, np.where(interior, eta / mesh.h_e, 0.0), qdeg, 0, normal_jump=True
        )
    else:
        _lifting_penalty_blocks(
            acc, Q, V, None, np.where(interior, eta, 0.0), qdeg, 0, normal_jump=True
        )

    div = _div_coupling_local(Q, V, qdeg)
    acc.add_blocks(Q.cell_dofs, V.cell_dofs + np_, -div)
    acc.add_blocks(V.cell_dofs + np_, Q.cell_dofs, -np.transpose(div, (0, 2, 1)))
    _avg_jump_mixed_blocks(acc, Q, V, qdeg, 0, np_)

    rhs = np.zeros(np_ + nu)
    rhs[np_:] = -_load_vector(V, case.f, qdeg)
    return LinearSystem(
        acc.tocsr(),
        rhs,
        {"p": slice(0, np_), "u": slice(np_, np_ + nu)},
        config.scheme,
        config,
        spaces,
        mesh,
    )


def assemble(config, mesh, case):
    """Dispatch to the scheme-specific assembler."""
    s = config.scheme
    if s in ("WG", "HybridPrimal"):
        return assemble_wg(config, mesh, case)
    if s in ("HDG", "HDG_reduced", "HybridMixed"):
        return assemble_hdg(config, mesh, case)
    if s == "PrimalWG_condensed":
        return assemble_primal_wg_condensed(config, mesh, case)
    if s in ("MixedRT", "MixedBDM"):
        return assemble_mixed(config, mesh, case)
    if s in ("ConformingPrimal", "NonconformingCR"):
        return assemble_primal(config, mesh, case)
    if s.startswith("PrimalDG"):
        return assemble_primal_dg(config, mesh, case)
    if s.startswith("MixedDG"):
        return assemble_mixed_dg(config, mesh, case)
    raise ConfigError(f"unknown scheme {s!r}")


# --------------------------------------------------------------------------
# trace substitution (section-7.1 bridges)
# --------------------------------------------------------------------------


def ldg_penalty_from_tau(config, mesh):
    """Per-edge LDG penalty eta_e equivalent to the HDG stabilizer.

    Interior edges: eta_e/h_e = tau+ (1/2 - beta.n_e)^2 + tau- (1/2 + beta.n_e)^2;
    boundary edges: eta_e/h_e = tau (the trace variable vanishes there).
    """
    tau = _stab_values(config.tau_rule, config.rho, mesh.h_K)
    beta = np.asarray(config.beta, dtype=float)
    bn = mesh.n_e @ beta
    kp = mesh.edge_to_elements[:, 0]
    km = np.maximum(mesh.edge_to_elements[:, 1], 0)
    interior = ~mesh.boundary_edges
    coeff = np.where(
        interior,
        tau[kp] * (0.5 - bn) ** 2 + tau[km] * (0.5 + bn) ** 2,
        tau[kp],
    )
    return coeff * mesh.h_e


def mdg_penalty_from_eta(config, mesh):
    """Per-edge MixedDG penalty equivalent to the WG stabilizer.

    Interior edges: eta_e/h_e = (eta+ + eta-)/4; the substituted boundary
    stabilizer vanishes identically.
    """
    eta = _stab_values(config.eta_rule, config.rho, mesh.h_K)
    kp = mesh.edge_to_elements[:, 0]
    km = np.maximum(mesh.edge_to_elements[:, 1], 0)
    interior = ~mesh.boundary_edges
    coeff = np.where(interior, 0.25 * (eta[kp] + eta[km]), 0.0)
    return coeff * mesh.h_e


def _trace_substitution_map(system, substitution):
    mesh = system.mesh
    cfg = system.config
    if substitution == "u_hat_eq_avg_plus_beta_jump":
        V, Vhat = system.spaces["V"], system.spaces["Vhat"]
        if Vhat.degree < V.degree:
            raise ConfigError(
                "the LDG substitution needs the trace space to contain {V_h}|_e"
            )
        beta = np.asarray(cfg.beta, dtype=float)
        source_field, hat_space = V, Vhat
        hat_name = "u_hat"
    elif substitution == "p_hat_eq_avg":
        Q, Qhat = system.spaces["Q"], system.spaces["Qhat"]
        # Normal traces of RT_k and of P_k vectors both lie in P_k(e).
        if Qhat.degree < Q.degree:
            raise ConfigError(
                "the mixed substitution needs the trace space to contain {{Q_h}}|_e"
            )
        beta = None
        source_field, hat_space = Q, Qhat
        hat_name = "p_hat"
    else:
        raise ConfigError(f"unknown substitution {substitution!r}")

    qdeg = min(2 * (source_field.degree + 2), 20)
    t, w = _edge_rule_t(qdeg)
    leg = legendre_values(hat_space.degree, t)
    gram = 1.0 / (2.0 * np.arange(hat_space.degree + 1) + 1.0)
    acc = CooAccumulator((hat_space.dim, source_field.dim))
    for group in edge_groups(mesh):
        if group.size == 0:
            continue
        hdofs = hat_space.edge_dofs[group]
        if np.all(hdofs < 0):
            continue
        tr = EdgeTraces(source_field, group, t)
        if substitution == "u_hat_eq_avg_plus_beta_jump":
            vals = tr.avg_scalar()
            if tr.minus is not None:
                bn = mesh.n_e[group] @ beta
                vals = vals + bn[:, None, None] * tr.jump_scalar()
        else:
            vals = tr.avg_normal()
        coef = np.einsum("qm,q,eql->eml", leg, w, vals) / gram[None, :, None]
        acc.add_blocks(hdofs, tr.dofs, coef)
    return acc.tocsr(), hat_name


def substitute_traces(system, substitution):
    """Eliminate the trace unknowns by an affine flux substitution.

    ``u_hat_eq_avg_plus_beta_jump`` turns an HDG system into the LDG
    two-field system; ``p_hat_eq_avg`` turns a WG system into the mixed
    DG two-field system.  The result is E^T A E with E the substitution
    embedding, over the remaining (p, u) unknowns.
    """
    if substitution == "u_hat_eq_avg_plus_beta_jump" and system.scheme not in (
        "HDG",
        "HDG_reduced",
        "HybridMixed",
    ):
        raise ConfigError("the u_hat substitution applies to HDG-type systems")
    if substitution == "p_hat_eq_avg" and system.scheme not in ("WG", "HybridPrimal"):
        raise ConfigError("the p_hat substitution applies to WG-type systems")
    T, hat_name = _trace_substitution_map(system, substitution)
    part = system.partition
    keep = [n for n in part if n != hat_name]
    sizes = {n: part[n].stop - part[n].start for n in part}
    n_keep = sum(sizes[n] for n in keep)
    E = sparse.lil_matrix((system.dim, n_keep))
    col = 0
    new_part = {}
    for name in keep:
        sl = part[name]
        E[sl, col : col + sizes[name]] = sparse.eye(sizes[name])
        new_part[name] = slice(col, col + sizes[name])
        col += sizes[name]
    src = "u" if hat_name == "u_hat" else "p"
    E[part[hat_name], new_part[src]] = T
    E = E.tocsr()
    matrix = (E.T @ system.matrix @ E).tocsr()
    rhs = E.T @ system.rhs
    return LinearSystem(
        matrix,
        rhs,
        new_part,
        system.scheme + "+" + substitution,
        system.config,
        {k: v for k, v in system.spaces.items()},
        system.mesh,
    )


# --------------------------------------------------------------------------
# solve
# --------------------------------------------------------------------------


def solve(system):
    """Direct solve of an assembled system; returns a DiscreteSolution."""
    try:
        x = factor_solve(system.matrix, system.rhs)
    except SingularFactorizationError as exc:
        raise SingularFactorizationError(
            f"{system.scheme}: {exc}", pivot=exc.pivot
        ) from exc
    resid = np.linalg.norm(system.matrix @ x - system.rhs)
    scale = np.linalg.norm(system.rhs)
    fields = {}
    for name, sl in system.partition.items():
        coefs = x[sl]
        if name in ("p_hat", "u_hat"):
            space = system.spaces["Qhat" if name == "p_hat" else "Vhat"]
            fields[name] = EdgeField(space, coefs)
        elif name == "p":
            fields[name] = Field(system.spaces["Q"], coefs)
        elif name == "u":
            fields[name] = Field(system.spaces["V"], coefs)
        else:
            fields[name] = coefs
    if system.recover is not None:
        fields.update(system.recover(x[system.partition["u"]]))
    return DiscreteSolution(
        fields, system.config, system.mesh, residual=resid / max(scale, 1e-300)
    )
