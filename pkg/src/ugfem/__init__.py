"""Unified conforming/DG/WG/HDG/mixed finite elements on triangles.

The package assembles and solves the whole family of methods for the
model elliptic problem -div(alpha grad u) = f on the unit square with a
homogeneous Dirichlet condition, written as first-order systems in the
flux p = -alpha grad u, and provides the studies connecting them:
manufactured-solution convergence, stabilization-limit sweeps (WG to
mixed, HDG to primal), algebraic scheme equivalences, and numerical
inf-sup uniformity.
"""

from .analysis import (
    ConvergenceReport,
    ManufacturedCase,
    bubble_case,
    consistency_residual,
    convergence_rates,
    discrete_norm,
    error_norm,
    infsup_estimate,
    limit_distance,
    sine_case,
    zero_case,
)
from .dgcalculus import (
    DGOperator,
    assemble_dg_divergence,
    assemble_dg_gradient,
    jump_average,
    lifting_scalar,
    lifting_volume,
)
from .linsolve import SingularFactorizationError, factor_solve, gen_eig_smallest
from .mesh import Mesh, MeshError, MeshParseError, build_uniform, build_unstructured, load_mesh
from .quadrature import QuadratureRule, edge_rule, push_forward, triangle_rule
from .schemes import (
    ConfigError,
    DiscreteSolution,
    LinearSystem,
    MethodConfig,
    assemble,
    solve,
    substitute_traces,
)
from .spaces import EdgeField, FESpace, Field, l2_project_edge, l2_project_volume, make_space

__version__ = "0.1.0"
