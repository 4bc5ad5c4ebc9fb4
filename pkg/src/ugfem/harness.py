"""Reproducible studies: h-convergence, rho sweeps, inf-sup maps, equivalences.

Study configuration is a plain ``key = value`` text format with ``#``
comments and dotted keys, for example::

    study = rho_sweep_wg_mixed
    scheme.name = WG
    scheme.k = 0
    scheme.variant = rt
    rho.list = 0.25,0.125,0.0625
    grid.kind = uniform
    grid.levels = 4
    out = csv

Each run writes its fully resolved configuration into the report
metadata, and identical configurations produce byte-identical output.
"""

from dataclasses import dataclass, field

import numpy as np

from .analysis import (
    ConvergenceReport,
    convergence_rates,
    error_norm,
    infsup_estimate,
    limit_distance,
    sine_case,
)
from .linsolve import SingularFactorizationError
from .mesh import build_uniform, build_unstructured, load_mesh
from .schemes import (
    ConfigError,
    MethodConfig,
    assemble,
    assemble_mixed_dg,
    assemble_primal_dg,
    ldg_penalty_from_tau,
    mdg_penalty_from_eta,
    solve,
    substitute_traces,
)

STUDY_KINDS = (
    "h_convergence",
    "rho_sweep_wg_mixed",
    "rho_sweep_hdg_primal",
    "infsup_uniformity",
    "equivalence_check",
)

_NORM_COLUMNS = {
    "u_l2": ("L2_scalar", None),
    "p_l2": ("L2_vector", None),
    "divp_l2": ("div_L2", None),
    "u_h1": ("H1_broken", None),
}

_DEFAULT_NORMS = {
    "h_convergence": ["u_l2", "p_l2", "divp_l2"],
    "rho_sweep_wg_mixed": ["u_l2", "p_l2", "divp_l2"],
    "rho_sweep_hdg_primal": ["u_l2", "u_h1"],
}


def parse_config_text(text):
    """Parse ``key = value`` lines with # comments into a flat dict."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _floats(text):
    return [float(tok) for tok in str(text).split(",") if tok.strip()]


def _ints(text):
    return [int(tok) for tok in str(text).split(",") if tok.strip()]


@dataclass
class StudyConfig:
    """A resolved study description."""

    study: str
    method: MethodConfig
    grid_kind: str = "uniform"
    levels: list = field(default_factory=lambda: [4])
    target_h: list = field(default_factory=list)
    seed: int = 0
    mesh_node: str = None
    mesh_ele: str = None
    rho_list: list = field(default_factory=list)
    norms: list = field(default_factory=list)
    out_format: str = "csv"
    reference_scheme: str = None
    infsup_which: str = "WG_div"
    infsup_h: list = field(default_factory=lambda: [2, 4, 8])
    infsup_rho: list = field(default_factory=lambda: [1.0, 0.25, 0.0625])
    equivalence_pair: str = "hdg_ldg"
    checks: dict = field(default_factory=dict)

    def validate(self):
        if self.study not in STUDY_KINDS:
            raise ConfigError(f"unknown study kind {self.study!r}")
        if self.out_format not in ("csv", "md"):
            raise ConfigError("out must be csv or md")
        for n in self.norms:
            if n not in _NORM_COLUMNS:
                raise ConfigError(f"unknown norm column {n!r}")
        if self.study == "h_convergence":
            n_levels = len(self.levels) if self.grid_kind == "uniform" else len(
                self.target_h
            )
            if self.grid_kind == "file":
                n_levels = 1
            if n_levels < 2:
                raise ConfigError("h_convergence needs at least two grid levels")
        if self.study.startswith("rho_sweep"):
            if len(self.rho_list) < 2:
                raise ConfigError("rho sweeps need at least two rho values")
            if np.any(np.diff(self.rho_list) >= 0):
                raise ConfigError("rho.list must decrease")
            if self.study == "rho_sweep_wg_mixed":
                if self.method.scheme != "WG":
                    raise ConfigError("rho_sweep_wg_mixed requires scheme WG")
                if self.method.eta_rule != "inv_rho_inv_hK":
                    raise ConfigError(
                        "the WG-to-mixed limit requires eta = 1/(rho h_K)"
                    )
            if self.study == "rho_sweep_hdg_primal":
                if self.method.scheme not in ("HDG", "HDG_reduced"):
                    raise ConfigError("rho_sweep_hdg_primal requires an HDG scheme")
                if self.method.tau_rule != "inv_rho_inv_hK":
                    raise ConfigError(
                        "the HDG-to-primal limit requires tau = 1/(rho h_K)"
                    )
        if self.study == "infsup_uniformity":
            if max(self.infsup_h) > 16:
                raise ConfigError("inf-sup meshes are capped at n = 16 (dense solve)")
        if self.study == "equivalence_check":
            if self.equivalence_pair not in ("hdg_ldg", "wg_mdg"):
                raise ConfigError("equivalence.pair must be hdg_ldg or wg_mdg")
        return self

    def resolved(self):
        """Flat, ordered key/value map of everything that shaped the run."""
        m = self.method
        out = {
            "study": self.study,
            "scheme.name": m.scheme,
            "scheme.k": m.k,
            "scheme.rho": m.rho,
            "scheme.eta_rule": m.eta_rule,
            "scheme.tau_rule": m.tau_rule,
            "scheme.eta_e": m.eta_e if np.isscalar(m.eta_e) else "per-edge",
            "scheme.beta": ",".join(f"{b:g}" for b in m.beta),
            "scheme.variant": m.space_variant,
            "scheme.trace_degree": m.trace_degree,
            "grid.kind": self.grid_kind,
            "grid.levels": ",".join(map(str, self.levels)),
            "grid.target_h": ",".join(f"{h:g}" for h in self.target_h),
            "grid.seed": self.seed,
            "rho.list": ",".join(f"{r:g}" for r in self.rho_list),
            "norms": ",".join(self.norms),
            "out": self.out_format,
        }
        if self.reference_scheme:
            out["reference.scheme"] = self.reference_scheme
        if self.study == "infsup_uniformity":
            out["infsup.which"] = self.infsup_which
            out["infsup.h_list"] = ",".join(map(str, self.infsup_h))
            out["infsup.rho_list"] = ",".join(f"{r:g}" for r in self.infsup_rho)
        if self.study == "equivalence_check":
            out["equivalence.pair"] = self.equivalence_pair
        return out


def study_from_mapping(kv):
    """Build a StudyConfig from a flat key/value mapping."""
    kv = dict(kv)
    study = kv.pop("study", None)
    if study is None:
        raise ConfigError("missing required key 'study'")
    method = MethodConfig(
        scheme=kv.pop("scheme.name", "MixedDG_Jump"),
        k=int(kv.pop("scheme.k", 0)),
        rho=float(kv.pop("scheme.rho", 1.0)),
        eta_rule=kv.pop("scheme.eta_rule", "inv_rho_inv_hK"),
        tau_rule=kv.pop("scheme.tau_rule", "inv_rho_inv_hK"),
        eta_e=float(kv.pop("scheme.eta_e", 1.0)),
        beta=tuple(_floats(kv.pop("scheme.beta", "0,0"))),
        trace_degree=(
            int(kv["scheme.trace_degree"])
            if kv.pop("scheme.trace_degree", None) is not None
            else None
        ),
        space_variant=kv.pop("scheme.variant", None),
        quad_degree=(
            int(kv.pop("quad_degree")) if "quad_degree" in kv else None
        ),
    )
    cfg = StudyConfig(
        study=study,
        method=method,
        grid_kind=kv.pop("grid.kind", "uniform"),
        levels=_ints(kv.pop("grid.levels", "4")),
        target_h=_floats(kv.pop("grid.target_h", "")),
        seed=int(kv.pop("grid.seed", 0)),
        mesh_node=kv.pop("grid.node", None),
        mesh_ele=kv.pop("grid.ele", None),
        rho_list=_floats(kv.pop("rho.list", "")),
        norms=[n.strip() for n in kv.pop("norms", "").split(",") if n.strip()],
        out_format=kv.pop("out", "csv"),
        reference_scheme=kv.pop("reference.scheme", None),
        infsup_which=kv.pop("infsup.which", "WG_div"),
        infsup_h=_ints(kv.pop("infsup.h_list", "2,4,8")),
        infsup_rho=_floats(kv.pop("infsup.rho_list", "1,0.25,0.0625")),
        equivalence_pair=kv.pop("equivalence.pair", "hdg_ldg"),
        checks={k[6:]: v for k, v in kv.items() if k.startswith("check.")},
    )
    unknown = [k for k in kv if not k.startswith("check.")]
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    if not cfg.norms:
        cfg.norms = list(_DEFAULT_NORMS.get(cfg.study, []))
    return cfg.validate()


def _meshes_for(cfg):
    if cfg.grid_kind == "uniform":
        return [build_uniform(n) for n in cfg.levels]
    if cfg.grid_kind == "unstructured":
        return [build_unstructured(h, seed=cfg.seed) for h in cfg.target_h]
    if cfg.grid_kind == "file":
        if not (cfg.mesh_node and cfg.mesh_ele):
            raise ConfigError("file grids need grid.node and grid.ele paths")
        with open(cfg.mesh_node) as fnode, open(cfg.mesh_ele) as fele:
            return [load_mesh(fnode.read(), fele.read())]
    raise ConfigError(f"unknown grid kind {cfg.grid_kind!r}")


def run_h_convergence(cfg, case=None):
    """Solve the scheme on each level and report norms plus rates."""
    case = case or sine_case()
    meshes = _meshes_for(cfg)
    if len(meshes) < 2:
        raise ConfigError("h_convergence needs at least two grid levels")
    report = ConvergenceReport("h", list(cfg.norms), metadata=cfg.resolved())
    for mesh in meshes:
        if cfg.grid_kind == "unstructured":
            h = mesh.n_elements ** -0.5
        else:
            h = mesh.h
        try:
            sol = solve(assemble(cfg.method, mesh, case))
        except SingularFactorizationError as exc:
            raise SingularFactorizationError(
                f"level with {mesh.n_elements} elements: {exc}", pivot=exc.pivot
            ) from exc
        row = {}
        for col in cfg.norms:
            kind, rho = _NORM_COLUMNS[col]
            row[col] = error_norm(sol, case, kind, rho=rho)
        report.add_row(h, row)
        report.metadata[f"n_elements.{mesh.n_elements}"] = mesh.n_elements
    return report


def _reference_config(cfg):
    if cfg.reference_scheme:
        name = cfg.reference_scheme
    elif cfg.study == "rho_sweep_wg_mixed":
        name = "MixedBDM" if cfg.method.space_variant == "bdm" else "MixedRT"
    else:
        name = "ConformingPrimal"
    return MethodConfig(
        scheme=name, k=cfg.method.k, quad_degree=cfg.method.quad_degree
    )


def run_rho_sweep(cfg, case=None):
    """Fixed-mesh rho sweep measuring distances to the limit scheme."""
    case = case or sine_case()
    mesh = _meshes_for(cfg)[0]
    ref_cfg = _reference_config(cfg)
    ref = solve(assemble(ref_cfg, mesh, case))
    report = ConvergenceReport("rho", list(cfg.norms), metadata=cfg.resolved())
    from dataclasses import replace

    for rho in cfg.rho_list:
        sol = solve(assemble(replace(cfg.method, rho=rho), mesh, case))
        row = {}
        for col in cfg.norms:
            kind, _ = _NORM_COLUMNS[col]
            row[col] = limit_distance(sol, ref, kind)
        report.add_row(rho, row)
    report.metadata["reference.scheme"] = ref_cfg.scheme
    return report


def run_infsup_uniformity(cfg):
    """beta over the (h, rho) grid plus the max/min ratio."""
    values = {}
    for n in cfg.infsup_h:
        mesh = build_uniform(n)
        for rho in cfg.infsup_rho:
            values[(n, rho)] = infsup_estimate(
                cfg.infsup_which,
                mesh,
                k=cfg.method.k,
                rho=rho,
                space_variant=cfg.method.space_variant,
                eta_e=cfg.method.eta_e if np.isscalar(cfg.method.eta_e) else 1.0,
                trace_degree=cfg.method.trace_degree,
            )
    arr = np.array(list(values.values()))
    return {
        "values": values,
        "beta_min": float(arr.min()),
        "beta_max": float(arr.max()),
        "ratio": float(arr.max() / arr.min()),
        "metadata": cfg.resolved(),
    }


def run_equivalence(cfg, case=None):
    """Entrywise comparison of a substituted hybrid system and its DG twin."""
    case = case or sine_case()
    mesh = _meshes_for(cfg)[0]
    k = cfg.method.k
    from dataclasses import replace

    if cfg.equivalence_pair == "hdg_ldg":
        hdg_cfg = replace(
            cfg.method, scheme="HDG", space_variant="equal",
            trace_degree=None if cfg.method.trace_degree is None else cfg.method.trace_degree,
        )
        source = assemble(hdg_cfg, mesh, case)
        sub = substitute_traces(source, "u_hat_eq_avg_plus_beta_jump")
        eta_edges = ldg_penalty_from_tau(hdg_cfg, mesh)
        twin = assemble_primal_dg(
            MethodConfig(
                scheme="PrimalDG_LDG", k=k, eta_e=eta_edges, beta=hdg_cfg.beta,
                quad_degree=hdg_cfg.quad_degree,
            ),
            mesh,
            case,
        )
    else:
        wg_cfg = replace(cfg.method, scheme="WG", space_variant="bdm")
        source = assemble(wg_cfg, mesh, case)
        sub = substitute_traces(source, "p_hat_eq_avg")
        eta_edges = mdg_penalty_from_eta(wg_cfg, mesh)
        eta_edges = np.where(mesh.boundary_edges, 1.0, eta_edges)
        twin = assemble_mixed_dg(
            MethodConfig(
                scheme="MixedDG_Jump", k=k, eta_e=eta_edges,
                quad_degree=wg_cfg.quad_degree,
            ),
            mesh,
            case,
        )
    dev = abs(sub.matrix - twin.matrix)
    deviation = float(dev.max()) if dev.nnz else 0.0
    rhs_dev = float(np.abs(sub.rhs - twin.rhs).max())
    deviation = max(deviation, rhs_dev)
    return {
        "pair": cfg.equivalence_pair,
        "deviation": deviation,
        "passed": deviation <= 1e-10,
        "metadata": cfg.resolved(),
    }


def run_study(cfg, case=None):
    if cfg.study == "h_convergence":
        return run_h_convergence(cfg, case)
    if cfg.study.startswith("rho_sweep"):
        return run_rho_sweep(cfg, case)
    if cfg.study == "infsup_uniformity":
        return run_infsup_uniformity(cfg)
    if cfg.study == "equivalence_check":
        return run_equivalence(cfg, case)
    raise ConfigError(f"unknown study {cfg.study!r}")


# --------------------------------------------------------------------------
# emission
# --------------------------------------------------------------------------


def _fmt_err(v):
    return f"{v:.6g}"


def _fmt_rate(r):
    return "--" if r is None else f"{r:.2f}"


def emit(report, out_format):
    """Render a ConvergenceReport as CSV or markdown text."""
    if out_format not in ("csv", "md"):
        raise ValueError("format must be csv or md")
    rates = report.rates()
    cols = report.columns
    if out_format == "csv":
        lines = [f"# {k} = {v}" for k, v in report.metadata.items()]
        header = ["var"]
        for c in cols:
            header += [c, f"rate_{c}"]
        lines.append(",".join(header))
        for i, v in enumerate(report.var):
            row = [_fmt_err(v)]
            for c in cols:
                row += [_fmt_err(report.errors[c][i]), _fmt_rate(rates[c][i])]
            lines.append(",".join(row))
        return "\n".join(lines) + "\n"
    header = ["| " + report.var_kind]
    for c in cols:
        header += [c, "rate"]
    lines = [" | ".join(header) + " |"]
    lines.append("|" + "---|" * (1 + 2 * len(cols)))
    for i, v in enumerate(report.var):
        row = ["| " + _fmt_err(v)]
        for c in cols:
            row += [_fmt_err(report.errors[c][i]), _fmt_rate(rates[c][i])]
        lines.append(" | ".join(row) + " |")
    meta = "\n".join(f"<!-- {k} = {v} -->" for k, v in report.metadata.items())
    return meta + "\n" + "\n".join(lines) + "\n"


def emit_result(result, out_format):
    """Render a non-tabular study result (inf-sup map, equivalence)."""
    if "ratio" in result:
        lines = [f"# {k} = {v}" for k, v in result["metadata"].items()]
        lines.append("n,rho,beta")
        for (n, rho), b in result["values"].items():
            lines.append(f"{n},{rho:.6g},{b:.6g}")
        lines.append(f"# ratio = {result['ratio']:.6g}")
        text = "\n".join(lines) + "\n"
    else:
        lines = [f"# {k} = {v}" for k, v in result["metadata"].items()]
        lines.append("pair,deviation,passed")
        lines.append(
            f"{result['pair']},{result['deviation']:.6g},{str(result['passed']).lower()}"
        )
        text = "\n".join(lines) + "\n"
    if out_format == "md":
        text = "```\n" + text + "```\n"
    return text


# --------------------------------------------------------------------------
# study acceptance checks (--check)
# --------------------------------------------------------------------------


def check_study(cfg, result):
    """Built-in pass/fail gates per study kind; returns a list of failures."""
    failures = []
    if cfg.study.startswith("rho_sweep"):
        rates = result.rates()
        for col in result.columns:
            errs = result.errors[col]
            if any(b >= a for a, b in zip(errs, errs[1:])):
                failures.append(f"{col}: distances not monotone decreasing")
            rs = [r for r in rates[col][1:] if r is not None]
            if cfg.study == "rho_sweep_wg_mixed":
                lo = float(cfg.checks.get("rate_min", 0.85))
                hi = float(cfg.checks.get("rate_max", 1.15))
                if not all(lo <= r <= hi for r in rs):
                    failures.append(f"{col}: rates {rs} outside [{lo}, {hi}]")
            else:
                if rs and rs[-1] < float(cfg.checks.get("final_rate_min", 0.8)):
                    failures.append(f"{col}: final rate {rs[-1]:.2f} < 0.8")
                if any(r < float(cfg.checks.get("rate_floor", 0.4)) for r in rs):
                    failures.append(f"{col}: a rate fell below the 0.4 floor")
    elif cfg.study == "infsup_uniformity":
        ratio_max = float(cfg.checks.get("ratio_max", 3.0))
        if result["ratio"] > ratio_max:
            failures.append(f"beta ratio {result['ratio']:.2f} > {ratio_max}")
    elif cfg.study == "equivalence_check":
        if not result["passed"]:
            failures.append(f"deviation {result['deviation']:.3e} > 1e-10")
    elif cfg.study == "h_convergence":
        rates = result.rates()
        for col in result.columns:
            key = f"order_{col}"
            if key in cfg.checks:
                target, tol = _floats(cfg.checks[key])
                got = rates[col][-1]
                if got is None or abs(got - target) > tol:
                    failures.append(
                        f"{col}: observed order {got} not within {tol} of {target}"
                    )
    return failures
