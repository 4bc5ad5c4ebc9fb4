"""Conforming triangulations of the unit square with full edge topology.

Conventions used throughout the library:

* triangles are stored counterclockwise (positive signed area);
* every edge is a sorted vertex pair (a, b) with a < b, and its unit
  normal ``n_e`` points out of the lower-indexed incident element
  (out of the domain on boundary edges);
* ``edge_to_elements[e] = (K_plus, K_minus)`` with ``K_plus`` the lower
  element index (``K_minus = -1`` on the boundary);
* the edge parameterization runs from vertex a to vertex b.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import Delaunay

from .quadrature import edge_rule, push_forward, triangle_rule


class MeshError(ValueError):
    """A mesh invariant failed to hold."""


class MeshParseError(ValueError):
    """Malformed .node/.ele input."""


@dataclass(frozen=True)
class Mesh:
    """Immutable triangulation with derived edge topology.

    Attributes
    ----------
    vertices : (nv, 2) float array
    triangles : (nt, 3) int array, counterclockwise
    edges : (ne, 2) int array, each row sorted
    edge_to_elements : (ne, 2) int array, (K+, K-), -1 for no element
    element_to_edges : (nt, 3) int array; local edge i is opposite local
        vertex i
    element_edge_signs : (nt, 3) int array; +1 where the element's outward
        normal equals n_e on that edge, -1 otherwise
    boundary_edges : (ne,) bool array
    boundary_vertices : (nv,) bool array
    n_e : (ne, 2) float array of fixed unit edge normals
    h_K : (nt,) element diameters
    h_e : (ne,) edge lengths
    """

    vertices: np.ndarray
    triangles: np.ndarray
    edges: np.ndarray = field(init=False, default=None)
    edge_to_elements: np.ndarray = field(init=False, default=None)
    element_to_edges: np.ndarray = field(init=False, default=None)
    element_edge_signs: np.ndarray = field(init=False, default=None)
    boundary_edges: np.ndarray = field(init=False, default=None)
    boundary_vertices: np.ndarray = field(init=False, default=None)
    n_e: np.ndarray = field(init=False, default=None)
    h_K: np.ndarray = field(init=False, default=None)
    h_e: np.ndarray = field(init=False, default=None)

    def __post_init__(self):
        verts = np.ascontiguousarray(np.asarray(self.vertices, dtype=float))
        tris = np.ascontiguousarray(np.asarray(self.triangles, dtype=np.int64))
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "triangles", tris)
        self._build_topology()
        for name in (
            "vertices",
            "triangles",
            "edges",
            "edge_to_elements",
            "element_to_edges",
            "element_edge_signs",
            "boundary_edges",
            "boundary_vertices",
            "n_e",
            "h_K",
            "h_e",
        ):
            getattr(self, name).setflags(write=False)
        object.__setattr__(self, "_cache", {})

    # -- derived quantities ------------------------------------------------

    @property
    def n_vertices(self):
        return self.vertices.shape[0]

    @property
    def n_elements(self):
        return self.triangles.shape[0]

    @property
    def n_edges(self):
        return self.edges.shape[0]

    @property
    def interior_edges(self):
        return np.flatnonzero(~self.boundary_edges)

    @property
    def h(self):
        return float(self.h_K.max())

    def signed_areas(self):
        p = self.vertices[self.triangles]
        return 0.5 * (
            (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
            - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1])
        )

    @property
    def areas(self):
        return self.signed_areas()

    def jacobians(self):
        """Affine maps x = v0 + J xhat: returns (nt, 2, 2) J."""
        p = self.vertices[self.triangles]
        return np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)

    def inverse_jacobians(self):
        jac = self.jacobians()
        det = 2.0 * self.signed_areas()
        inv = np.empty_like(jac)
        inv[:, 0, 0] = jac[:, 1, 1]
        inv[:, 0, 1] = -jac[:, 0, 1]
        inv[:, 1, 0] = -jac[:, 1, 0]
        inv[:, 1, 1] = jac[:, 0, 0]
        return inv / det[:, None, None]

    def element_outward_normal(self, element, edge):
        """Outward unit normal of ``element`` on ``edge`` (= +-n_e)."""
        loc = int(np.flatnonzero(self.element_to_edges[element] == edge)[0])
        return self.element_edge_signs[element, loc] * self.n_e[edge]

    # -- construction ------------------------------------------------------

    def _build_topology(self):
        verts, tris = self.vertices, self.triangles
        if tris.size and (tris.min() < 0 or tris.max() >= len(verts)):
            raise MeshError("triangle vertex index out of range")
        areas = self.signed_areas()
        if np.any(areas <= 0):
            bad = int(np.flatnonzero(areas <= 0)[0])
            raise MeshError(f"triangle {bad} is degenerate or clockwise")

        # Local edge i is opposite local vertex i.
        locals_ = [(1, 2), (2, 0), (0, 1)]
        pairs = np.concatenate([tris[:, loc] for loc in locals_])
        sorted_pairs = np.sort(pairs, axis=1)
        edges, inverse = np.unique(sorted_pairs, axis=0, return_inverse=True)
        element_to_edges = inverse.reshape(3, -1).T.copy()

        ne, nt = len(edges), len(tris)
        edge_to_elements = np.full((ne, 2), -1, dtype=np.int64)
        counts = np.zeros(ne, dtype=np.int64)
        order = np.argsort(element_to_edges.ravel(), kind="stable")
        flat_elems = np.repeat(np.arange(nt), 3)[order]
        flat_edges = element_to_edges.ravel()[order]
        for e, K in zip(flat_edges, flat_elems):
            if counts[e] == 2:
                raise MeshError(f"edge {e} has more than two incident elements")
            edge_to_elements[e, counts[e]] = K
            counts[e] += 1
        # Order (K+, K-) with K+ the lower element index.
        two = counts == 2
        swap = two & (edge_to_elements[:, 0] > edge_to_elements[:, 1])
        edge_to_elements[swap] = edge_to_elements[swap][:, ::-1]
        if np.any(counts == 0):
            raise MeshError("unreferenced edge")

        boundary_edges = counts == 1
        boundary_vertices = np.zeros(len(verts), dtype=bool)
        boundary_vertices[edges[boundary_edges].ravel()] = True

        tang = verts[edges[:, 1]] - verts[edges[:, 0]]
        h_e = np.hypot(tang[:, 0], tang[:, 1])
        if np.any(h_e <= 0):
            raise MeshError("zero-length edge")
        tang = tang / h_e[:, None]
        # Rotate the a->b tangent by -90 degrees, then orient out of K+.
        n_e = np.stack([tang[:, 1], -tang[:, 0]], axis=1)
        centroids = verts[tris].mean(axis=1)
        midpoints = 0.5 * (verts[edges[:, 0]] + verts[edges[:, 1]])
        to_mid = midpoints - centroids[edge_to_elements[:, 0]]
        flip = np.einsum("ij,ij->i", to_mid, n_e) < 0
        n_e[flip] *= -1.0

        # Orientation signs: +1 where the element's outward normal is n_e.
        signs = np.where(
            edge_to_elements[element_to_edges, 0]
            == np.arange(nt)[:, None],
            1,
            -1,
        ).astype(np.int64)

        p = verts[tris]
        sides = np.stack(
            [
                p[:, 1] - p[:, 0],
                p[:, 2] - p[:, 1],
                p[:, 0] - p[:, 2],
            ]
        )
        h_K = np.sqrt((sides**2).sum(axis=2)).max(axis=0)

        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "edge_to_elements", edge_to_elements)
        object.__setattr__(self, "element_to_edges", element_to_edges)
        object.__setattr__(self, "element_edge_signs", signs)
        object.__setattr__(self, "boundary_edges", boundary_edges)
        object.__setattr__(self, "boundary_vertices", boundary_vertices)
        object.__setattr__(self, "n_e", n_e)
        object.__setattr__(self, "h_K", h_K)
        object.__setattr__(self, "h_e", h_e)

    # -- validation --------------------------------------------------------

    def validate(self, degree=4):
        """Check the structural invariants; raise MeshError on failure.

        ``degree`` bounds the polynomial degree used for the divergence
        theorem check.
        """
        if np.any(self.signed_areas() <= 0):
            raise MeshError("non-positive element area")
        counts = (self.edge_to_elements >= 0).sum(axis=1)
        if np.any(counts[self.boundary_edges] != 1) or np.any(
            counts[~self.boundary_edges] != 2
        ):
            raise MeshError("edge incidence counts inconsistent")

        # n_K on each edge is +-n_e per the stored sign.
        verts, tris = self.vertices, self.triangles
        locals_ = [(1, 2), (2, 0), (0, 1)]
        for loc, (i, j) in enumerate(locals_):
            a, b = verts[tris[:, i]], verts[tris[:, j]]
            t = b - a
            nrm = np.stack([t[:, 1], -t[:, 0]], axis=1)
            nrm /= np.linalg.norm(nrm, axis=1)[:, None]
            stored = (
                self.element_edge_signs[:, loc][:, None]
                * self.n_e[self.element_to_edges[:, loc]]
            )
            if not np.allclose(nrm, stored, atol=1e-12):
                raise MeshError("edge normal orientation inconsistent")

        # Closed polygon: sum of length * outward normal vanishes.
        closure = np.zeros((self.n_elements, 2))
        for loc in range(3):
            e = self.element_to_edges[:, loc]
            closure += (
                self.h_e[e, None]
                * self.element_edge_signs[:, loc][:, None]
                * self.n_e[e]
            )
        if np.abs(closure).max() > 1e-12:
            raise MeshError("polygon closure failed")

        self._check_divergence_theorem(degree)

    def _check_divergence_theorem(self, degree):
        rng = np.random.default_rng(1234)
        vol = triangle_rule(min(2 * degree, 20))
        edg = edge_rule(min(2 * degree, 20))
        exps = [(i, j) for i in range(degree + 1) for j in range(degree + 1 - i)]
        cx = rng.standard_normal(len(exps))
        cy = rng.standard_normal(len(exps))

        def q(x):
            mono = np.stack([x[..., 0] ** i * x[..., 1] ** j for i, j in exps], -1)
            return np.stack([mono @ cx, mono @ cy], axis=-1)

        def div_q(x):
            out = np.zeros(x.shape[:-1])
            for (i, j), a, b in zip(exps, cx, cy):
                if i > 0:
                    out += a * i * x[..., 0] ** (i - 1) * x[..., 1] ** j
                if j > 0:
                    out += b * j * x[..., 0] ** i * x[..., 1] ** (j - 1)
            return out

        for K in rng.choice(self.n_elements, size=min(8, self.n_elements), replace=False):
            pts, w = push_forward(vol, self.vertices[self.triangles[K]])
            lhs = np.sum(w * div_q(pts))
            rhs = 0.0
            for loc in range(3):
                e = self.element_to_edges[K, loc]
                a, b = self.edges[e]
                epts, ew = push_forward(edg, self.vertices[[a, b]])
                nK = self.element_edge_signs[K, loc] * self.n_e[e]
                rhs += np.sum(ew * (q(epts) @ nK))
            scale = max(abs(lhs), abs(rhs), 1.0)
            if abs(lhs - rhs) > 1e-12 * scale:
                raise MeshError(
                    f"divergence theorem failed on element {K}: {lhs} vs {rhs}"
                )


def build_uniform(n, pattern="lower_left"):
    """Uniform n x n grid of the unit square, each cell split into two.

    ``pattern`` selects the split diagonal: "lower_left" (default) runs
    lower-left to upper-right, "upper_left" the other way.
    """
    if int(n) < 1:
        raise ValueError(f"subdivision count must be >= 1, got {n}")
    n = int(n)
    if pattern not in ("lower_left", "upper_left"):
        raise ValueError(f"unknown split pattern {pattern!r}")
    idx = lambda i, j: i + j * (n + 1)
    xs = np.linspace(0.0, 1.0, n + 1)
    verts = np.array([[x, y] for y in xs for x in xs])
    tris = []
    for j in range(n):
        for i in range(n):
            a, b = idx(i, j), idx(i + 1, j)
            c, d = idx(i + 1, j + 1), idx(i, j + 1)
            if pattern == "lower_left":
                tris.append((a, b, c))
                tris.append((a, c, d))
            else:
                tris.append((a, b, d))
                tris.append((b, c, d))
    return Mesh(verts, np.array(tris))


def _min_angle_deg(mesh):
    p = mesh.vertices[mesh.triangles]
    angles = []
    for i in range(3):
        u = p[:, (i + 1) % 3] - p[:, i]
        v = p[:, (i + 2) % 3] - p[:, i]
        cosang = np.einsum("ij,ij->i", u, v) / (
            np.linalg.norm(u, axis=1) * np.linalg.norm(v, axis=1)
        )
        angles.append(np.degrees(np.arccos(np.clip(cosang, -1, 1))))
    return float(np.min(angles))


def build_unstructured(target_h, seed=0, min_angle=20.0):
    """Quasi-uniform unstructured Delaunay mesh of the unit square.

    Deterministic for a fixed ``seed``; the maximum element diameter lies
    in [0.5, 2] * target_h and all angles are at least ``min_angle``
    degrees.  Built from a seeded jitter of a structured point set so
    successive ``target_h`` values give non-nested grids.
    """
    if not 0.0 < target_h < 1.0:
        raise ValueError(f"target_h must lie in (0, 1), got {target_h}")
    m = max(2, round(np.sqrt(2.0) / target_h))
    s = 1.0 / m
    rng = np.random.default_rng(seed)
    base = np.stack(
        np.meshgrid(np.linspace(0, 1, m + 1), np.linspace(0, 1, m + 1)), axis=-1
    ).reshape(-1, 2)
    interior = np.all((base > 1e-12) & (base < 1 - 1e-12), axis=1)
    jitter_full = rng.uniform(-1.0, 1.0, size=base.shape)

    amplitude = 0.25
    for _ in range(10):
        pts = base.copy()
        pts[interior] += amplitude * s * jitter_full[interior]
        tri = Delaunay(pts)
        tris = tri.simplices.copy()
        p = pts[tris]
        areas = 0.5 * (
            (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
            - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1])
        )
        tris[areas < 0] = tris[areas < 0][:, [0, 2, 1]]
        keep = np.abs(areas) > 1e-14
        mesh = Mesh(pts, tris[keep])
        if (
            _min_angle_deg(mesh) >= min_angle
            and 0.5 * target_h <= mesh.h <= 2.0 * target_h
        ):
            mesh.validate(degree=2)
            return mesh
        amplitude *= 0.7
    raise MeshError(
        f"could not build an unstructured mesh at target_h={target_h} "
        f"meeting the {min_angle} degree angle bound"
    )


def load_mesh(node_text, ele_text):
    """Build a Mesh from Triangle-style .node/.ele file contents.

    Formats: .node starts with a header "N 2 0 B" followed by
    "idx x y [bmark]" lines; .ele starts with "M 3 0" followed by
    "idx v1 v2 v3" lines with 1-based vertex indices.  Clockwise
    triangles are fixed by a vertex swap (with a warning); repeated
    triangles or inconsistent counts raise MeshParseError.
    """

    def rows(text, what):
        out = []
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if line:
                out.append((lineno, line.split()))
        if not out:
            raise MeshParseError(f"empty {what} input")
        return out

    nrows = rows(node_text, ".node")
    header = nrows[0][1]
    try:
        nv = int(header[0])
    except (ValueError, IndexError):
        raise MeshParseError(f".node line {nrows[0][0]}: malformed header")
    body = nrows[1:]
    if len(body) != nv:
        raise MeshParseError(
            f".node header promises {nv} vertices but {len(body)} rows follow"
        )
    verts = np.zeros((nv, 2))
    base_index = None
    for lineno, tok in body:
        try:
            idx, x, y = int(tok[0]), float(tok[1]), float(tok[2])
        except (ValueError, IndexError):
            raise MeshParseError(f".node line {lineno}: malformed vertex row")
        if base_index is None:
            base_index = idx
        k = idx - base_index
        if not 0 <= k < nv:
            raise MeshParseError(f".node line {lineno}: vertex index {idx} out of range")
        verts[k] = (x, y)

    erows = rows(ele_text, ".ele")
    try:
        nt = int(erows[0][1][0])
    except (ValueError, IndexError):
        raise MeshParseError(f".ele line {erows[0][0]}: malformed header")
    ebody = erows[1:]
    if len(ebody) != nt:
        raise MeshParseError(
            f".ele header promises {nt} triangles but {len(ebody)} rows follow"
        )
    tris = np.zeros((nt, 3), dtype=np.int64)
    for row, (lineno, tok) in enumerate(ebody):
        if len(tok) < 4:
            raise MeshParseError(f".ele line {lineno}: truncated triangle row")
        try:
            tris[row] = [int(t) - base_index for t in tok[1:4]]
        except ValueError:
            raise MeshParseError(f".ele line {lineno}: malformed triangle row")
    if np.any(tris < 0) or np.any(tris >= nv):
        raise MeshParseError("triangle vertex index out of range")
    seen = set()
    for row, t in enumerate(map(tuple, np.sort(tris, axis=1))):
        if t in seen:
            raise MeshParseError(f"repeated triangle at row {row}")
        seen.add(t)

    p = verts[tris]
    areas = 0.5 * (
        (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
        - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1])
    )
    flipped = np.flatnonzero(areas < 0)
    if flipped.size:
        warnings.warn(
            f"fixed orientation of {flipped.size} clockwise triangle(s) by vertex swap",
            stacklevel=2,
        )
        tris[flipped] = tris[flipped][:, [0, 2, 1]]
    mesh = Mesh(verts, tris)
    mesh.validate(degree=2)
    return mesh
