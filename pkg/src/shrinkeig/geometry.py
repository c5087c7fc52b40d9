"""Discretized self-shrinkers and the ambient domains they split.

A shrinker is a hypersurface with ``H = <x, nu> / 2``.  The canonical examples
built here are the round sphere of radius ``sqrt(2n)``, the cylinder
``S^1(sqrt 2) x R`` and hyperplanes through the origin.  Orientation
convention: ``nu`` points out of the region ``Omega`` and ``H`` is the
divergence of ``nu``, so the sphere with outward normal has ``H = n / r > 0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import triangle
from scipy.spatial import cKDTree

OMEGA = 0
OMEGA_TILDE = 1
REGION_NAMES = {"omega": OMEGA, "omega_tilde": OMEGA_TILDE}

CANONICAL_KINDS = ("sphere", "cylinder", "plane")
DEFAULT_TRUNCATION = 8.0


class MeshError(ValueError):
    """Raised for invalid or degenerate meshes."""


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


def simplex_volumes(vertices: np.ndarray, simplices: np.ndarray) -> np.ndarray:
    """k-dimensional volume of each simplex, embedded in any ambient dimension."""
    X = vertices[simplices]
    E = X[:, 1:] - X[:, :1]
    k = E.shape[1]
    G = np.einsum("tid,tjd->tij", E, E)
    det = np.linalg.det(G) if k > 1 else G[:, 0, 0]
    return np.sqrt(np.clip(det, 0.0, None)) / math.factorial(k)


def simplex_normals(vertices: np.ndarray, simplices: np.ndarray) -> np.ndarray:
    """Oriented unit normal of each codimension-one simplex.

    For segments in the plane the normal is the tangent rotated clockwise, for
    triangles in space it is the right-handed cross product.
    """
    X = vertices[simplices]
    if simplices.shape[1] == 2:
        t = X[:, 1] - X[:, 0]
        nrm = np.stack([t[:, 1], -t[:, 0]], axis=1)
    elif simplices.shape[1] == 3:
        nrm = np.cross(X[:, 1] - X[:, 0], X[:, 2] - X[:, 0])
    else:
        raise MeshError("normals only defined for curves and surfaces")
    return nrm / np.linalg.norm(nrm, axis=1, keepdims=True)


def _facet_counts(simplices: np.ndarray):
    """Map each sorted (n-1)-facet to the number of simplices containing it."""
    k = simplices.shape[1]
    facets = []
    for drop in range(k):
        facets.append(np.delete(simplices, drop, axis=1))
    F = np.sort(np.concatenate(facets), axis=1)
    uniq, counts = np.unique(F, axis=0, return_counts=True)
    return uniq, counts


@dataclass(frozen=True)
class ProfileGeometry:
    """Parameters of a canonical shrinker.

    ``sphere``: radius ``sqrt(2n)``.  ``cylinder``: ``S^k(sqrt(2k)) x [-L, L]^(n-k)``.
    ``plane``: a disc of radius ``R`` through the origin.
    """

    kind: str
    n: int
    k: int = 0
    half_length: float = 0.0
    disc_radius: float = 0.0

    @property
    def radius(self) -> float:
        if self.kind == "sphere":
            return math.sqrt(2 * self.n)
        if self.kind == "cylinder":
            return math.sqrt(2 * self.k)
        return math.inf

    def mean_curvature(self) -> float:
        """Continuum mean curvature; equals <x, nu>/2 on the profile."""
        if self.kind == "sphere":
            return self.n / self.radius
        if self.kind == "cylinder":
            return self.k / self.radius
        return 0.0


@dataclass(frozen=True)
class ShrinkerMesh:
    """Simplicial hypersurface in R^(n+1) with per-vertex unit normals."""

    dim_n: int
    vertices: np.ndarray
    simplices: np.ndarray
    normals: np.ndarray
    kind: str = "custom"
    truncation_radius: Optional[float] = None
    profile: Optional[ProfileGeometry] = field(default=None, compare=False)

    def __post_init__(self):
        V = np.asarray(self.vertices, dtype=float)
        S = np.asarray(self.simplices, dtype=np.int64)
        N = np.asarray(self.normals, dtype=float)
        n = int(self.dim_n)
        if n < 1:
            raise MeshError(f"intrinsic dimension must be >= 1, got {n}")
        if V.ndim != 2 or V.shape[1] != n + 1:
            raise MeshError(f"vertices must have shape (N, {n + 1})")
        if S.ndim != 2 or S.shape[1] != n + 1:
            raise MeshError(f"simplices must have shape (T, {n + 1})")
        if N.shape != V.shape:
            raise MeshError("normals must match vertices in shape")
        if S.size and (S.min() < 0 or S.max() >= len(V)):
            raise MeshError("simplex index out of range")
        object.__setattr__(self, "vertices", _readonly(V))
        object.__setattr__(self, "simplices", _readonly(S))
        object.__setattr__(self, "normals", _readonly(N))
        self.validate()

    # -- validation -------------------------------------------------------
    def validate(self) -> None:
        vols = simplex_volumes(self.vertices, self.simplices)
        scale = max(self.max_edge_length, 1e-300) ** self.dim_n
        if np.any(vols <= 1e-12 * scale):
            bad = int(np.argmin(vols))
            raise MeshError(f"degenerate simplex {bad} (volume {vols[bad]:.3e})")
        unit_err = np.abs(np.linalg.norm(self.normals, axis=1) - 1.0)
        if unit_err.max() > 1e-12:
            raise MeshError(f"normals not unit length (max error {unit_err.max():.2e})")
        if self.dim_n > 2:
            return
        # each simplex normal must agree with the vertex normals it carries
        fn = simplex_normals(self.vertices, self.simplices)
        vn = self.normals[self.simplices].mean(axis=1)
        if np.any(np.einsum("td,td->t", fn, vn) <= 0):
            raise MeshError("simplex orientation disagrees with vertex normals")
        _, counts = _facet_counts(self.simplices)
        if np.any(counts > 2):
            raise MeshError("non-manifold facet shared by more than two simplices")
        if self.dim_n == 2:
            # shared edges must be traversed in opposite directions
            e = np.concatenate([self.simplices[:, [0, 1]], self.simplices[:, [1, 2]],
                                self.simplices[:, [2, 0]]])
            _, c = np.unique(e, axis=0, return_counts=True)
            if np.any(c > 1):
                raise MeshError("inconsistent orientation across shared edges")

    # -- derived quantities -----------------------------------------------
    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def ambient_dim(self) -> int:
        return self.dim_n + 1

    def edges(self) -> np.ndarray:
        k = self.simplices.shape[1]
        pairs = [self.simplices[:, [a, b]] for a in range(k) for b in range(a + 1, k)]
        return np.unique(np.sort(np.concatenate(pairs), axis=1), axis=0)

    @property
    def max_edge_length(self) -> float:
        e = self.edges()
        return float(np.linalg.norm(self.vertices[e[:, 0]] - self.vertices[e[:, 1]], axis=1).max())

    def boundary_facets(self) -> np.ndarray:
        uniq, counts = _facet_counts(self.simplices)
        return uniq[counts == 1]

    def boundary_vertices(self) -> np.ndarray:
        return np.unique(self.boundary_facets())

    @property
    def is_closed(self) -> bool:
        return len(self.boundary_facets()) == 0

    def flipped(self) -> "ShrinkerMesh":
        """Same surface with the opposite choice of unit normal."""
        S = self.simplices.copy()
        S[:, [0, 1]] = S[:, [1, 0]]
        return ShrinkerMesh(self.dim_n, self.vertices, S, -self.normals, self.kind,
                            self.truncation_radius, self.profile)

    def transformed(self, Q: np.ndarray) -> "ShrinkerMesh":
        """Apply an orthogonal map to vertices and normals."""
        Q = np.asarray(Q, dtype=float)
        if np.linalg.det(Q) < 0:
            # reflections reverse the orientation of the simplices
            S = self.simplices.copy()
            S[:, [0, 1]] = S[:, [1, 0]]
        else:
            S = self.simplices
        N = self.normals @ Q.T
        N /= np.linalg.norm(N, axis=1, keepdims=True)
        return ShrinkerMesh(self.dim_n, self.vertices @ Q.T, S, N, self.kind,
                            self.truncation_radius, self.profile)


# -- canonical meshes ------------------------------------------------------

def _circle(radius: float, segments: int) -> ShrinkerMesh:
    t = 2 * np.pi * np.arange(segments) / segments
    nrm = np.stack([np.cos(t), np.sin(t)], axis=1)
    S = np.stack([np.arange(segments), (np.arange(segments) + 1) % segments], axis=1)
    return nrm * radius, S, nrm


def _icosahedron():
    p = (1 + math.sqrt(5)) / 2
    V = np.array([[-1, p, 0], [1, p, 0], [-1, -p, 0], [1, -p, 0],
                  [0, -1, p], [0, 1, p], [0, -1, -p], [0, 1, -p],
                  [p, 0, -1], [p, 0, 1], [-p, 0, -1], [-p, 0, 1]], dtype=float)
    F = np.array([[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
                  [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
                  [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
                  [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]])
    return V / np.linalg.norm(V, axis=1, keepdims=True), F


def _subdivide(V: np.ndarray, F: np.ndarray):
    """Loop-style 1-to-4 split with midpoints pushed to the unit sphere."""
    edges = np.sort(np.concatenate([F[:, [0, 1]], F[:, [1, 2]], F[:, [2, 0]]]), axis=1)
    uniq, inv = np.unique(edges, axis=0, return_inverse=True)
    inv = inv.ravel()
    mid = V[uniq[:, 0]] + V[uniq[:, 1]]
    mid /= np.linalg.norm(mid, axis=1, keepdims=True)
    nV = len(V)
    m01, m12, m20 = (inv[i * len(F):(i + 1) * len(F)] + nV for i in range(3))
    a, b, c = F.T
    F2 = np.concatenate([
        np.stack([a, m01, m20], 1), np.stack([b, m12, m01], 1),
        np.stack([c, m20, m12], 1), np.stack([m01, m12, m20], 1)])
    return np.vstack([V, mid]), F2


def icosphere(refine: int):
    """Unit icosphere with ``10 * 4**refine + 2`` vertices, outward oriented."""
    V, F = _icosahedron()
    for _ in range(refine):
        V, F = _subdivide(V, F)
    return V, F


def make_sphere(n: int, refine: int = 0, segments: Optional[int] = None) -> ShrinkerMesh:
    """Round shrinker of radius ``sqrt(2n)`` centred at the origin.

    For ``n = 1`` the circle is a regular polygon with ``16 * 2**refine``
    segments unless ``segments`` is given.  For ``n = 2`` the mesh is the
    icosphere subdivided ``refine`` times.
    """
    if n not in (1, 2):
        raise MeshError(f"sphere meshes support n in {{1, 2}}, got n={n}")
    if refine < 0:
        raise MeshError("refine must be >= 0")
    profile = ProfileGeometry("sphere", n)
    r = profile.radius
    if n == 1:
        N = int(segments) if segments is not None else 16 * 2 ** refine
        if N < 3:
            raise MeshError("a circle needs at least 3 segments")
        V, S, nrm = _circle(r, N)
        return ShrinkerMesh(1, V, S, nrm, "sphere", None, profile)
    U, F = icosphere(refine)
    return ShrinkerMesh(2, U * r, F, U, "sphere", None, profile)


def make_cylinder(k: int = 1, n: int = 2, half_length: float = DEFAULT_TRUNCATION,
                  refine: int = 2, axial_segments: Optional[int] = None) -> ShrinkerMesh:
    """Truncated cylinder ``S^k(sqrt(2k)) x [-L, L]`` in R^(n+1).

    The circle carries ``16 * 2**refine`` segments; the axial spacing matches
    the arc spacing unless ``axial_segments`` is given.
    """
    if not (1 <= k < n <= 2):
        raise MeshError(f"cylinder needs 1 <= k < n <= 2, got k={k}, n={n}")
    if half_length <= 0:
        raise MeshError(f"half_length must be positive, got {half_length}")
    if refine < 0:
        raise MeshError("refine must be >= 0")
    profile = ProfileGeometry("cylinder", n, k=k, half_length=float(half_length))
    r = profile.radius
    nt = 16 * 2 ** refine
    ds = 2 * np.pi * r / nt
    nz = int(axial_segments) if axial_segments else max(1, int(round(2 * half_length / ds)))
    theta = 2 * np.pi * np.arange(nt) / nt
    z = np.linspace(-half_length, half_length, nz + 1)
    T, Z = np.meshgrid(theta, z, indexing="xy")  # rows: z index
    V = np.stack([r * np.cos(T).ravel(), r * np.sin(T).ravel(), Z.ravel()], axis=1)
    nrm = np.stack([np.cos(T).ravel(), np.sin(T).ravel(), np.zeros(T.size)], axis=1)
    idx = np.arange((nz + 1) * nt).reshape(nz + 1, nt)
    a = idx[:-1, :]
    b = np.roll(idx[:-1, :], -1, axis=1)
    c = np.roll(idx[1:, :], -1, axis=1)
    d = idx[1:, :]
    F = np.concatenate([np.stack([a, b, c], -1).reshape(-1, 3),
                        np.stack([a, c, d], -1).reshape(-1, 3)])
    trunc = math.hypot(r, half_length)
    return ShrinkerMesh(2, V, F, nrm, "cylinder", trunc, profile)


def make_plane(n: int, disc_radius: float = DEFAULT_TRUNCATION, refine: int = 3) -> ShrinkerMesh:
    """Hyperplane ``x_{n+1} = 0`` truncated to the disc of radius ``R``.

    ``n = 1``: the segment ``[-R, R]`` with ``16 * 2**refine`` pieces.
    ``n = 2``: a quality Delaunay disc with boundary spacing ``R / (4 * 2**refine)``.
    The normal is ``+e_{n+1}``.
    """
    if n not in (1, 2):
        raise MeshError(f"plane meshes support n in {{1, 2}}, got n={n}")
    if disc_radius <= 0:
        raise MeshError(f"disc radius must be positive, got {disc_radius}")
    if refine < 0:
        raise MeshError("refine must be >= 0")
    R = float(disc_radius)
    profile = ProfileGeometry("plane", n, disc_radius=R)
    if n == 1:
        N = 16 * 2 ** refine
        x = np.linspace(-R, R, N + 1)
        V = np.stack([x, np.zeros_like(x)], axis=1)
        # traversed right to left so that the clockwise-rotated tangent is +e_2
        S = np.stack([np.arange(1, N + 1), np.arange(N)], axis=1)
        nrm = np.tile([0.0, 1.0], (N + 1, 1))
        return ShrinkerMesh(1, V, S, nrm, "plane", R, profile)
    h = R / (4 * 2 ** refine)
    nb = max(8, int(math.ceil(2 * np.pi * R / h)))
    t = 2 * np.pi * np.arange(nb) / nb
    pts = np.stack([R * np.cos(t), R * np.sin(t)], axis=1)
    segs = np.stack([np.arange(nb), (np.arange(nb) + 1) % nb], axis=1)
    area = math.sqrt(3) / 4 * h * h
    tri = triangle.triangulate({"vertices": pts, "segments": segs}, f"pq30Ya{area:.12f}Q")
    P = tri["vertices"]
    F = tri["triangles"].astype(np.int64)
    cr = (P[F[:, 1]] - P[F[:, 0]])[:, 0] * (P[F[:, 2]] - P[F[:, 0]])[:, 1] - \
         (P[F[:, 1]] - P[F[:, 0]])[:, 1] * (P[F[:, 2]] - P[F[:, 0]])[:, 0]
    F[cr < 0] = F[cr < 0][:, [0, 2, 1]]
    V = np.column_stack([P, np.zeros(len(P))])
    nrm = np.tile([0.0, 0.0, 1.0], (len(P), 1))
    return ShrinkerMesh(2, V, F, nrm, "plane", R, profile)


def make_ellipse(a: float, b: float, segments: int = 256) -> ShrinkerMesh:
    """Ellipse with semi-axes ``a``, ``b``; not a shrinker unless ``a = b = sqrt 2``."""
    t = 2 * np.pi * np.arange(segments) / segments
    V = np.stack([a * np.cos(t), b * np.sin(t)], axis=1)
    g = np.stack([V[:, 0] / a ** 2, V[:, 1] / b ** 2], axis=1)
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    S = np.stack([np.arange(segments), (np.arange(segments) + 1) % segments], axis=1)
    return ShrinkerMesh(1, V, S, g, "custom", None, None)


# -- shrinker equation -----------------------------------------------------

def discrete_mean_curvature(mesh: ShrinkerMesh) -> np.ndarray:
    """Vertex mean curvature w.r.t. the mesh normals (NaN on boundary vertices).

    Curves use the turning angle divided by the dual length; surfaces use the
    area gradient divided by the mixed Voronoi vertex area.
    """
    V, S, N = mesh.vertices, mesh.simplices, mesh.normals
    nv = len(V)
    H = np.full(nv, np.nan)
    if mesh.dim_n == 1:
        t = V[S[:, 1]] - V[S[:, 0]]
        ln = np.linalg.norm(t, axis=1)
        t = t / ln[:, None]
        t_in = np.full((nv, 2), np.nan)
        t_out = np.full((nv, 2), np.nan)
        l_in = np.full(nv, np.nan)
        l_out = np.full(nv, np.nan)
        t_in[S[:, 1]] = t
        l_in[S[:, 1]] = ln
        t_out[S[:, 0]] = t
        l_out[S[:, 0]] = ln
        ok = ~np.isnan(l_in) & ~np.isnan(l_out)
        cross = t_in[ok, 0] * t_out[ok, 1] - t_in[ok, 1] * t_out[ok, 0]
        dot = np.einsum("id,id->i", t_in[ok], t_out[ok])
        angle = np.abs(np.arctan2(cross, dot))
        bend = -np.einsum("id,id->i", t_out[ok] - t_in[ok], N[ok])
        H[ok] = np.sign(bend) * angle / (0.5 * (l_in[ok] + l_out[ok]))
        return H
    if mesh.dim_n == 2:
        X = V[S]
        fn = np.cross(X[:, 1] - X[:, 0], X[:, 2] - X[:, 0])
        area = 0.5 * np.linalg.norm(fn, axis=1)
        fn /= (2 * area)[:, None]
        grad = np.zeros_like(V)
        cots = np.empty((len(S), 3))
        for a in range(3):
            b, c = (a + 1) % 3, (a + 2) % 3
            np.add.at(grad, S[:, a], 0.5 * np.cross(fn, X[:, c] - X[:, b]))
            u, w = X[:, b] - X[:, a], X[:, c] - X[:, a]
            cots[:, a] = np.einsum("ij,ij->i", u, w) / (2 * area)
        vert_area = np.zeros(nv)
        obtuse = cots < 0
        for a in range(3):
            b, c = (a + 1) % 3, (a + 2) % 3
            # Voronoi share of vertex a: edges ab (angle at c) and ac (angle at b)
            lab = np.sum((X[:, b] - X[:, a]) ** 2, axis=1)
            lac = np.sum((X[:, c] - X[:, a]) ** 2, axis=1)
            share = (cots[:, c] * lab + cots[:, b] * lac) / 8
            share = np.where(obtuse.any(axis=1),
                             np.where(obtuse[:, a], area / 2, area / 4), share)
            np.add.at(vert_area, S[:, a], share)
        H = np.einsum("id,id->i", grad, N) / vert_area
        H[mesh.boundary_vertices()] = np.nan
        return H
    raise MeshError("mean curvature implemented for n in {1, 2}")


def shrinker_residual(mesh: ShrinkerMesh) -> np.ndarray:
    """Per-vertex ``H - <x, nu>/2``; NaN at truncation-boundary vertices."""
    H = discrete_mean_curvature(mesh)
    return H - 0.5 * np.einsum("id,id->i", mesh.vertices, mesh.normals)


def max_residual(mesh: ShrinkerMesh) -> float:
    r = shrinker_residual(mesh)
    if np.all(np.isnan(r)):
        return 0.0
    return float(np.nanmax(np.abs(r)))


def is_residual_clean(mesh: ShrinkerMesh, constant: float = 1.0) -> bool:
    """True when ``max |H - <x,nu>/2| <= constant * h``, h the longest edge."""
    return max_residual(mesh) <= constant * mesh.max_edge_length


def tangential_part(x: np.ndarray, nu: np.ndarray) -> np.ndarray:
    """``x - <x, nu> nu``; accepts single vectors or row stacks."""
    x = np.asarray(x, dtype=float)
    nu = np.asarray(nu, dtype=float)
    return x - np.sum(x * nu, axis=-1, keepdims=True) * nu


# -- ambient meshes --------------------------------------------------------

@dataclass(frozen=True)
class AmbientMesh:
    """Conforming simplicial mesh of the ball ``B_R(0)`` split by a surface.

    ``interface_map[i]`` is the ambient vertex carrying surface vertex ``i``.
    ``region_label`` holds ``OMEGA`` (the side ``nu`` points away from) or
    ``OMEGA_TILDE`` for each cell.
    """

    vertices: np.ndarray
    cells: np.ndarray
    region_label: np.ndarray
    interface_map: np.ndarray
    outer_boundary: np.ndarray
    radius: float
    surface: ShrinkerMesh = field(compare=False)

    def __post_init__(self):
        for name in ("vertices", "cells", "region_label", "interface_map", "outer_boundary"):
            object.__setattr__(self, name, _readonly(getattr(self, name)))

    @property
    def dim(self) -> int:
        return self.vertices.shape[1]

    def region_cells(self, region) -> np.ndarray:
        if region in ("both", None):
            return self.cells
        code = REGION_NAMES[region] if isinstance(region, str) else int(region)
        if code not in (OMEGA, OMEGA_TILDE):
            raise MeshError(f"unknown region {region!r}")
        return self.cells[self.region_label == code]

    def region_vertices(self, region) -> np.ndarray:
        return np.unique(self.region_cells(region))

    def interface_facets(self) -> np.ndarray:
        """Facets (ambient indices) across which the region label changes."""
        d = self.cells.shape[1]
        facets = np.concatenate([np.delete(self.cells, i, axis=1) for i in range(d)])
        owner = np.tile(np.arange(len(self.cells)), d)
        key = np.sort(facets, axis=1)
        order = np.lexsort(key.T[::-1])
        key, owner = key[order], owner[order]
        same = np.all(key[1:] == key[:-1], axis=1)
        i = np.nonzero(same)[0]
        lab = self.region_label
        jump = lab[owner[i]] != lab[owner[i + 1]]
        return key[i[jump]]


def _check_conforming(amb: AmbientMesh) -> None:
    surf = amb.surface
    want = np.sort(amb.interface_map[surf.simplices], axis=1)
    have = amb.interface_facets()
    w = {tuple(r) for r in want.tolist()}
    h = {tuple(r) for r in have.tolist()}
    if w != h:
        missing = len(w - h)
        extra = len(h - w)
        raise MeshError(f"ambient mesh not conforming: {missing} surface facets missing, "
                        f"{extra} label jumps away from the surface")
    if np.any(np.linalg.norm(amb.vertices, axis=1) > amb.radius * (1 + 1e-12)):
        raise MeshError("ambient vertex outside the ball")


def build_ambient_mesh(surface: ShrinkerMesh, ball_radius: float = 6.0,
                       grading: float = 1.0, max_size: Optional[float] = None) -> AmbientMesh:
    """Mesh ``B_R(0)`` so that the surface mesh appears as interface facets.

    Curves in the plane go through constrained Delaunay refinement whose cell
    size is ``h_s * (1 + grading * dist(x, M))`` with ``h_s`` the surface
    spacing.  Closed surfaces in space that are star-shaped about the origin
    are meshed with radial prism layers split into tetrahedra.
    """
    R = float(ball_radius)
    if R <= 0:
        raise MeshError("ball radius must be positive")
    rmax = np.linalg.norm(surface.vertices, axis=1).max()
    if rmax > R * (1 + 1e-12):
        raise MeshError(f"surface not contained in B_{R:g}(0) (max |x| = {rmax:.4g})")
    if not surface.is_closed:
        bv = surface.boundary_vertices()
        rb = np.linalg.norm(surface.vertices[bv], axis=1)
        if np.any(np.abs(rb - R) > 1e-9 * R):
            raise MeshError("open surface must have its truncation boundary on the sphere |x| = R")
    if surface.dim_n == 1:
        amb = _ambient_planar(surface, R, grading, max_size)
    elif surface.dim_n == 2:
        amb = _ambient_radial(surface, R)
    else:
        raise MeshError("ambient meshing supports n in {1, 2}")
    _check_conforming(amb)
    return amb


def _outer_circle(R: float, spacing: float, fixed_angles: np.ndarray) -> np.ndarray:
    """Angles on the outer circle including the given ones, near-uniform spacing."""
    fixed = np.sort(np.mod(fixed_angles, 2 * np.pi))
    if len(fixed) == 0:
        m = max(16, int(math.ceil(2 * np.pi * R / spacing)))
        return 2 * np.pi * np.arange(m) / m
    out = []
    gaps = np.diff(np.concatenate([fixed, [fixed[0] + 2 * np.pi]]))
    for a, g in zip(fixed, gaps):
        m = max(2, int(math.ceil(g * R / spacing)))
        out.append(a + g * np.arange(m) / m)
    return np.concatenate(out)


def _surface_distance(V: np.ndarray, S: np.ndarray):
    """Approximate distance to a polyline via a KD-tree over dense samples."""
    t = np.linspace(0.0, 1.0, 5)[:-1]
    samples = (V[S[:, 0], None, :] * (1 - t)[None, :, None]
               + V[S[:, 1], None, :] * t[None, :, None]).reshape(-1, V.shape[1])
    tree = cKDTree(samples)
    return lambda P: tree.query(P)[0]


def _ambient_planar(surface: ShrinkerMesh, R: float, grading: float,
                    max_size: Optional[float]) -> AmbientMesh:
    V, S = surface.vertices, surface.simplices
    nsurf = len(V)
    seglen = np.linalg.norm(V[S[:, 1]] - V[S[:, 0]], axis=1)
    hs = float(seglen.mean())
    hmax = max_size if max_size is not None else R / 8

    surface_dist = _surface_distance(V, S)

    def size(P):
        return np.minimum(hs * (1 + grading * surface_dist(P)), hmax)

    if surface.is_closed:
        fixed = np.array([])
        outer_spacing = float(size(np.array([[R, 0.0]]))[0])
    else:
        bv = surface.boundary_vertices()
        fixed = np.arctan2(V[bv, 1], V[bv, 0])
        probe = np.array([[0.0, R], [0.0, -R], [R, 0.0], [-R, 0.0]])
        outer_spacing = float(size(probe).min())
    ang = _outer_circle(R, outer_spacing, fixed)
    outer = np.stack([R * np.cos(ang), R * np.sin(ang)], axis=1)
    pts = [V]
    outer_ids = []
    segs = [S]
    if surface.is_closed:
        base = nsurf
        pts.append(outer)
        outer_ids = base + np.arange(len(outer))
        segs.append(np.stack([outer_ids, np.roll(outer_ids, -1)], axis=1))
    else:
        # reuse the surface endpoints as outer-circle vertices
        bv = surface.boundary_vertices()
        ids = []
        extra = []
        for p in outer:
            dist = np.linalg.norm(V[bv] - p, axis=1)
            if dist.min() < 1e-9 * R:
                ids.append(int(bv[np.argmin(dist)]))
            else:
                ids.append(nsurf + len(extra))
                extra.append(p)
        pts.append(np.array(extra).reshape(-1, 2))
        outer_ids = np.array(ids)
        segs.append(np.stack([outer_ids, np.roll(outer_ids, -1)], axis=1))
    P = np.vstack(pts)
    SEG = np.vstack(segs)
    eps = 0.25 * float(seglen.min())
    mid = 0.5 * (V[S[:, 0]] + V[S[:, 1]])
    nrm = simplex_normals(V, S)
    probe = len(S) // 3
    seed_in = mid[probe] - eps * nrm[probe]
    seed_out = mid[probe] + eps * nrm[probe]
    regions = np.array([[*seed_in, OMEGA, 0.0], [*seed_out, OMEGA_TILDE, 0.0]])
    area0 = math.sqrt(3) / 4 * hmax ** 2
    tri = triangle.triangulate({"vertices": P, "segments": SEG, "regions": regions},
                               f"pq30YAa{area0:.12f}Q")
    previous = -1
    for _ in range(60):
        X = tri["vertices"]
        F = tri["triangles"]
        cen = X[F].mean(axis=1)
        target = math.sqrt(3) / 4 * size(cen) ** 2
        e1 = X[F[:, 1]] - X[F[:, 0]]
        e2 = X[F[:, 2]] - X[F[:, 0]]
        area = 0.5 * np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
        # triangles resting on a fixed segment cannot always be split further
        if np.all(area <= 1.5 * target) or len(F) == previous:
            break
        previous = len(F)
        tri = triangle.triangulate({**tri, "triangle_max_area": target}, "rpq30YAaQ")
    X = tri["vertices"]
    F = tri["triangles"].astype(np.int64)
    if not np.allclose(X[:nsurf], V, atol=0, rtol=0):
        raise MeshError("constrained Delaunay moved surface vertices")
    labels = tri["triangle_attributes"].ravel().round().astype(np.int8)
    e1 = X[F[:, 1]] - X[F[:, 0]]
    e2 = X[F[:, 2]] - X[F[:, 0]]
    cr = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    F[cr < 0] = F[cr < 0][:, [0, 2, 1]]
    # outer boundary = vertices on the circle
    on_outer = np.nonzero(np.abs(np.linalg.norm(X, axis=1) - R) < 1e-9 * R)[0]
    X[on_outer] *= (R / np.linalg.norm(X[on_outer], axis=1))[:, None]
    return AmbientMesh(X, F, labels, np.arange(nsurf), on_outer, R, surface)


def _ambient_radial(surface: ShrinkerMesh, R: float) -> AmbientMesh:
    V, F = surface.vertices, surface.simplices
    if not surface.is_closed:
        raise MeshError("radial-layer meshing needs a closed surface")
    radial = np.einsum("id,id->i", V, surface.normals)
    if np.all(radial > 0):
        inside_label, outside_label = OMEGA, OMEGA_TILDE
    elif np.all(radial < 0):
        inside_label, outside_label = OMEGA_TILDE, OMEGA
    else:
        raise MeshError("surface is not star-shaped about the origin; radial meshing failed")
    nv = len(V)
    r = np.linalg.norm(V, axis=1)
    h = surface.max_edge_length
    # interior layers, uniform in the radial fraction
    k_in = max(2, int(math.ceil(r.max() / h)))
    fr_in = np.arange(1, k_in) / k_in
    # exterior layers: geometric growth from h to the outer sphere
    gap = R - r.max()
    steps = [0.0]
    dr = h
    while steps[-1] + dr < gap - 0.5 * dr:
        steps.append(steps[-1] + dr)
        dr *= 1.2
    steps = np.array(steps[1:] + [gap]) / gap
    layers = [V * f for f in fr_in] + [V]
    for tau in steps:
        layers.append(V * ((1 - tau) + tau * (R / r))[:, None])
    P = np.vstack([np.zeros((1, 3))] + layers)
    offset = lambda k: 1 + k * nv  # layer k starts here (k=0 innermost)
    surf_layer = len(fr_in)
    cells = []
    labels = []
    Fs = np.sort(F, axis=1)
    # cone from the centre to the innermost layer
    cells.append(np.column_stack([np.zeros(len(F), dtype=np.int64), Fs + offset(0)]))
    labels.append(np.full(len(F), inside_label))
    a, b, c = Fs.T
    for k in range(len(layers) - 1):
        lo, hi = offset(k), offset(k + 1)
        prism = np.concatenate([
            np.stack([a + lo, b + lo, c + lo, c + hi], 1),
            np.stack([a + lo, b + lo, b + hi, c + hi], 1),
            np.stack([a + lo, a + hi, b + hi, c + hi], 1)])
        cells.append(prism)
        labels.append(np.full(len(prism), inside_label if k < surf_layer else outside_label))
    C = np.vstack(cells).astype(np.int64)
    L = np.concatenate(labels).astype(np.int8)
    X = P[C]
    vol = np.einsum("ij,ij->i", np.cross(X[:, 1] - X[:, 0], X[:, 2] - X[:, 0]), X[:, 3] - X[:, 0])
    C[vol < 0] = C[vol < 0][:, [0, 2, 1, 3]]
    if np.any(np.abs(vol) < 1e-14 * h ** 3):
        raise MeshError("radial meshing produced degenerate tetrahedra")
    outer = offset(len(layers) - 1) + np.arange(nv)
    imap = offset(surf_layer) + np.arange(nv)
    return AmbientMesh(P, C, L, imap, outer, R, surface)


# -- serialization ---------------------------------------------------------

def _fmt(x: float) -> str:
    if not math.isfinite(x):
        raise MeshError("cannot serialize non-finite coordinates")
    return "%.17g" % x


def _json_rows(a: np.ndarray, integer: bool = False) -> str:
    a = np.asarray(a)
    if a.ndim == 1:
        return "[" + ", ".join(str(int(v)) if integer else _fmt(float(v)) for v in a) + "]"
    return "[\n    " + ",\n    ".join(_json_rows(r, integer) for r in a) + "\n  ]"


def _json_document(entries: list[tuple[str, str]]) -> str:
    body = ",\n".join(f'  "{k}": {v}' for k, v in entries)
    return "{\n" + body + "\n}\n"


def _json_scalar(v) -> str:
    if v is None:
        return "null"
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return _fmt(float(v))


def _fields_entry(fields: Optional[dict]) -> list[tuple[str, str]]:
    if not fields:
        return []
    inner = ",\n  ".join(f'"{k}": {_json_rows(np.asarray(v, dtype=float))}'
                         for k, v in sorted(fields.items()))
    return [("fields", "{\n  " + inner + "\n  }")]


def mesh_to_json(mesh: ShrinkerMesh, fields: Optional[dict] = None) -> str:
    """Mesh document with every float written to 17 significant digits.

    ``fields`` maps names to per-vertex arrays and is stored under ``fields``.
    """
    entries = [("dim_n", str(mesh.dim_n)), ("kind", _json_scalar(mesh.kind)),
               ("truncation_radius", _json_scalar(mesh.truncation_radius)),
               ("vertices", _json_rows(mesh.vertices)),
               ("simplices", _json_rows(mesh.simplices, integer=True)),
               ("normals", _json_rows(mesh.normals))]
    return _json_document(entries + _fields_entry(fields))


def mesh_from_dict(doc: dict) -> ShrinkerMesh:
    missing = {"dim_n", "vertices", "simplices", "normals"} - set(doc)
    if missing:
        raise MeshError(f"mesh document lacks {sorted(missing)}")
    kind = doc.get("kind", "custom")
    if kind not in CANONICAL_KINDS + ("custom",):
        raise MeshError(f"unknown mesh kind {kind!r}")
    mesh = ShrinkerMesh(int(doc["dim_n"]), np.asarray(doc["vertices"], dtype=float),
                        np.asarray(doc["simplices"], dtype=np.int64),
                        np.asarray(doc["normals"], dtype=float), kind,
                        doc.get("truncation_radius"))
    return mesh


def ambient_to_json(amb: AmbientMesh, fields: Optional[dict] = None) -> str:
    """Ambient mesh document; the surface is nested under ``surface``."""
    surf = mesh_to_json(amb.surface).strip().replace("\n", "\n  ")
    entries = [("dim", str(amb.dim)), ("radius", _fmt(amb.radius)),
               ("vertices", _json_rows(amb.vertices)),
               ("cells", _json_rows(amb.cells, integer=True)),
               ("region_label", _json_rows(amb.region_label, integer=True)),
               ("interface_map", _json_rows(amb.interface_map, integer=True)),
               ("outer_boundary", _json_rows(amb.outer_boundary, integer=True)),
               ("surface", surf)]
    return _json_document(entries + _fields_entry(fields))
