"""Gaussian-weighted P1 finite element forms, areas and the cutoff family.

Every integral carries the weight ``rho(x) = exp(-|x|^2 / 4)``.  The drift
Laplacian is never discretized in strong form; it enters only through the
symmetric Dirichlet form ``int rho <grad f, grad g>``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Iterable, Optional

import numpy as np
import scipy.sparse as sp
from scipy.io import mmwrite
from scipy.special import roots_jacobi

from .geometry import AmbientMesh, MeshError, ShrinkerMesh, simplex_normals

DEFAULT_QUAD_ORDER = 4


def gaussian_weight(x: np.ndarray) -> np.ndarray:
    """``exp(-|x|^2/4)`` along the last axis."""
    x = np.asarray(x, dtype=float)
    return np.exp(-0.25 * np.sum(x * x, axis=-1))


def unit_weight(x: np.ndarray) -> np.ndarray:
    return np.ones(np.shape(x)[:-1])


# -- quadrature ------------------------------------------------------------

@lru_cache(maxsize=None)
def simplex_quadrature(dim: int, order: int):
    """Positive-weight rule on the reference ``dim``-simplex, exact to ``order``.

    Collapsed-coordinate (conical product) Gauss-Jacobi construction.
    Returns barycentric points of shape (Q, dim+1) and weights summing to 1.
    """
    if order < 1:
        raise ValueError(f"quadrature order must be >= 1, got {order}")
    if dim < 1:
        raise ValueError("simplex dimension must be >= 1")
    m = (order + 2) // 2
    nodes, weights = [], []
    for k in range(dim):
        a = dim - 1 - k  # Jacobian exponent of the k-th collapsed coordinate
        x, w = roots_jacobi(m, a, 0)
        nodes.append((1 + x) / 2)
        weights.append(w / 2 ** (a + 1))
    grids = np.meshgrid(*nodes, indexing="ij")
    wgrid = np.meshgrid(*weights, indexing="ij")
    U = np.stack([g.ravel() for g in grids], axis=1)
    W = np.prod(np.stack([g.ravel() for g in wgrid], axis=1), axis=1)
    lam = np.empty((len(U), dim + 1))
    rest = np.ones(len(U))
    for k in range(dim):
        lam[:, k + 1] = rest * U[:, k]
        rest = rest * (1 - U[:, k])
    lam[:, 0] = rest
    W = W * math.factorial(dim)
    lam.setflags(write=False)
    W.setflags(write=False)
    return lam, W


# -- per-simplex geometry --------------------------------------------------

@dataclass(frozen=True)
class SimplexGeometry:
    """Volumes, barycentric gradients and quadrature points of a simplex list."""

    volumes: np.ndarray      # (T,)
    gradients: np.ndarray    # (T, k+1, D) tangential gradients of the hat functions
    points: np.ndarray       # (T, Q, D) quadrature points
    bary: np.ndarray         # (Q, k+1)
    weights: np.ndarray      # (Q,)

    @classmethod
    def build(cls, vertices: np.ndarray, simplices: np.ndarray,
              quad_order: int = DEFAULT_QUAD_ORDER) -> "SimplexGeometry":
        X = vertices[simplices]
        E = X[:, 1:] - X[:, :1]
        k = E.shape[1]
        G = np.einsum("tid,tjd->tij", E, E)
        det = np.linalg.det(G)
        if np.any(det <= 0):
            raise MeshError(f"degenerate simplex {int(np.argmin(det))}")
        vol = np.sqrt(det) / math.factorial(k)
        g_rest = np.linalg.solve(G, E)
        grads = np.concatenate([-g_rest.sum(axis=1, keepdims=True), g_rest], axis=1)
        lam, w = simplex_quadrature(k, quad_order)
        pts = np.einsum("qa,tad->tqd", lam, X)
        return cls(vol, grads, pts, lam, w)

    def field_gradient(self, simplices: np.ndarray, f: np.ndarray) -> np.ndarray:
        """Constant gradient of the P1 interpolant of nodal values ``f``."""
        return np.einsum("ta,tad->td", f[simplices], self.gradients)

    def integrate(self, values: np.ndarray) -> float:
        """Sum over simplices of the quadrature of ``values`` shaped (T, Q)."""
        return float(np.sum(self.volumes * (values @ self.weights)))

    def interpolate(self, simplices: np.ndarray, f: np.ndarray) -> np.ndarray:
        """P1 interpolant evaluated at the quadrature points, shape (T, Q)."""
        return f[simplices] @ self.bary.T


@dataclass(frozen=True)
class WeightedOperatorSet:
    """Weighted stiffness ``K``, mass ``M`` and mean vector ``m``.

    ``dofs`` lists the global vertex index of each row (identity for surfaces).
    """

    K: sp.csr_matrix
    M: sp.csr_matrix
    m: np.ndarray
    domain_tag: str
    dofs: np.ndarray
    simplices: np.ndarray = field(repr=False)
    geometry: SimplexGeometry = field(repr=False)

    @property
    def size(self) -> int:
        return self.K.shape[0]

    @property
    def total_weight(self) -> float:
        return float(self.m.sum())


def assemble_forms(vertices: np.ndarray, simplices: np.ndarray,
                   quad_order: int = DEFAULT_QUAD_ORDER,
                   weight: Callable[[np.ndarray], np.ndarray] = gaussian_weight,
                   domain_tag: str = "surface") -> WeightedOperatorSet:
    """P1 weighted forms on any simplex list in any ambient dimension.

    Vertices not touched by a simplex are dropped; ``dofs`` records the
    original indices of the kept ones.
    """
    if quad_order < 1:
        raise ValueError(f"quadrature order must be >= 1, got {quad_order}")
    simplices = np.asarray(simplices, dtype=np.int64)
    dofs, local = np.unique(simplices, return_inverse=True)
    local = local.reshape(simplices.shape)
    V = np.asarray(vertices, dtype=float)[dofs]
    geo = SimplexGeometry.build(V, local, quad_order)
    rho = weight(geo.points)                       # (T, Q)
    wrho = rho * geo.weights                       # (T, Q)
    rho_int = geo.volumes * wrho.sum(axis=1)       # int_T rho
    k1 = local.shape[1]
    Kloc = rho_int[:, None, None] * np.einsum("tad,tbd->tab", geo.gradients, geo.gradients)
    Mloc = geo.volumes[:, None, None] * np.einsum("tq,qa,qb->tab", wrho, geo.bary, geo.bary)
    mloc = geo.volumes[:, None] * (wrho @ geo.bary)
    rows = np.repeat(local, k1, axis=1).ravel()
    cols = np.tile(local, (1, k1)).ravel()
    n = len(dofs)
    K = sp.csr_matrix((Kloc.ravel(), (rows, cols)), shape=(n, n))
    M = sp.csr_matrix((Mloc.ravel(), (rows, cols)), shape=(n, n))
    m = np.bincount(local.ravel(), weights=mloc.ravel(), minlength=n)
    K.sum_duplicates()
    M.sum_duplicates()
    return WeightedOperatorSet(K, M, m, domain_tag, dofs, local, geo)


def assemble_surface_forms(mesh: ShrinkerMesh, quad_order: int = DEFAULT_QUAD_ORDER,
                           weight=gaussian_weight) -> WeightedOperatorSet:
    """Weighted forms of the surface; rows follow the mesh vertex order."""
    ops = assemble_forms(mesh.vertices, mesh.simplices, quad_order, weight, "surface")
    if len(ops.dofs) != mesh.n_vertices:
        raise MeshError("surface mesh has vertices not used by any simplex")
    return ops


def assemble_ambient_forms(mesh: AmbientMesh, region: str = "both",
                           quad_order: int = DEFAULT_QUAD_ORDER,
                           weight=gaussian_weight) -> WeightedOperatorSet:
    """Weighted forms over the cells of ``region`` ("omega", "omega_tilde", "both")."""
    if region not in ("omega", "omega_tilde", "both"):
        raise MeshError(f"unknown region tag {region!r}")
    cells = mesh.region_cells(region)
    tag = "ambient" if region == "both" else f"ambient-{region}"
    return assemble_forms(mesh.vertices, cells, quad_order, weight, tag)


def weighted_area(mesh: ShrinkerMesh, quad_order: int = DEFAULT_QUAD_ORDER) -> float:
    """``int_M exp(-|x|^2/4)``."""
    return assemble_surface_forms(mesh, quad_order).total_weight


# -- area growth -----------------------------------------------------------

def _clipped_segment_lengths(A: np.ndarray, B: np.ndarray, r: float) -> np.ndarray:
    d = B - A
    a = np.einsum("id,id->i", d, d)
    b = 2 * np.einsum("id,id->i", A, d)
    c = np.einsum("id,id->i", A, A) - r * r
    disc = b * b - 4 * a * c
    out = np.zeros(len(A))
    ok = disc > 0
    sq = np.sqrt(disc[ok])
    t1 = np.clip((-b[ok] - sq) / (2 * a[ok]), 0, 1)
    t2 = np.clip((-b[ok] + sq) / (2 * a[ok]), 0, 1)
    out[ok] = np.sqrt(a[ok]) * np.maximum(t2 - t1, 0)
    return out


def _disc_triangle_area(P: np.ndarray, Q: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Signed area of disc(0, r) intersected with the triangle (0, P, Q), in 2D."""
    d = Q - P
    a = np.einsum("id,id->i", d, d)
    b = 2 * np.einsum("id,id->i", P, d)
    c = np.einsum("id,id->i", P, P) - r * r
    disc = np.maximum(b * b - 4 * a * c, 0)
    sq = np.sqrt(disc)
    t1 = np.clip((-b - sq) / (2 * a), 0, 1)
    t2 = np.clip((-b + sq) / (2 * a), 0, 1)
    ts = np.stack([np.zeros_like(a), t1, t2, np.ones_like(a)], axis=1)
    total = np.zeros(len(P))
    for k in range(3):
        s0, s1 = ts[:, k], ts[:, k + 1]
        X0 = P + s0[:, None] * d
        X1 = P + s1[:, None] * d
        Xm = P + (0.5 * (s0 + s1))[:, None] * d
        cross = X0[:, 0] * X1[:, 1] - X0[:, 1] * X1[:, 0]
        dot = np.einsum("id,id->i", X0, X1)
        inside = np.einsum("id,id->i", Xm, Xm) <= r * r
        piece = np.where(inside, 0.5 * cross, 0.5 * r * r * np.arctan2(cross, dot))
        total += np.where(s1 > s0, piece, 0.0)
    return total


def clipped_area(mesh: ShrinkerMesh, r: float) -> float:
    """Exact n-volume of ``M cap B_r(0)`` for the piecewise-linear surface."""
    if r <= 0:
        raise ValueError(f"radius must be positive, got {r}")
    V, S = mesh.vertices, mesh.simplices
    if mesh.dim_n == 1:
        return float(_clipped_segment_lengths(V[S[:, 0]], V[S[:, 1]], r).sum())
    if mesh.dim_n != 2:
        raise MeshError("clipped areas implemented for n in {1, 2}")
    X = V[S]
    nrm = simplex_normals(V, S)
    off = np.einsum("id,id->i", X[:, 0], nrm)
    keep = np.abs(off) < r
    X, nrm, off = X[keep], nrm[keep], off[keep]
    rad = np.sqrt(r * r - off * off)
    foot = off[:, None] * nrm
    e1 = X[:, 1] - X[:, 0]
    e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
    e2 = np.cross(nrm, e1)
    P = np.stack([np.einsum("tad,td->ta", X - foot[:, None], e) for e in (e1, e2)], axis=-1)
    area = np.zeros(len(X))
    for a in range(3):
        area += _disc_triangle_area(P[:, a], P[:, (a + 1) % 3], rad)
    return float(np.abs(area).sum())


def area_growth_ratio(mesh: ShrinkerMesh, radii: Iterable[float]) -> list[tuple[float, float]]:
    """Rows ``(r, area(M cap B_r) / r^n)`` for increasing radii."""
    radii = sorted(float(r) for r in radii)
    if any(r <= 0 for r in radii):
        raise ValueError("radii must be positive")
    return [(r, clipped_area(mesh, r) / r ** mesh.dim_n) for r in radii]


def write_area_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["r", "value"])
        for r, v in rows:
            w.writerow([repr(float(r)), repr(float(v))])


def export_operators(ops: WeightedOperatorSet, prefix: str) -> list[str]:
    """Write K and M in Matrix Market coordinate format and m as plain text."""
    paths = [f"{prefix}_K.mtx", f"{prefix}_M.mtx", f"{prefix}_m.txt"]
    mmwrite(paths[0], ops.K, precision=17, symmetry="symmetric")
    mmwrite(paths[1], ops.M, precision=17, symmetry="symmetric")
    np.savetxt(paths[2], ops.m, fmt="%.17g")
    return paths


# -- cutoff ----------------------------------------------------------------

@dataclass(frozen=True)
class CutoffFamily:
    """``eta_j(x) = beta(|x|^2 / j^2)`` with a quintic smoothstep profile.

    ``beta = 1`` on [0, 1], ``beta = 1 - s^3 (6 s^2 - 15 s + 10)`` with
    ``s = (t - 1)/3`` on [1, 4], and 0 beyond.  It is C^2 and nonincreasing.
    """

    j: float

    def __post_init__(self):
        if self.j < 1:
            raise ValueError(f"cutoff scale must be >= 1, got {self.j}")

    @staticmethod
    def beta(t):
        t = np.asarray(t, dtype=float)
        s = np.clip((t - 1) / 3, 0, 1)
        return 1 - s ** 3 * (6 * s * s - 15 * s + 10)

    @staticmethod
    def dbeta(t):
        t = np.asarray(t, dtype=float)
        s = np.clip((t - 1) / 3, 0, 1)
        return -10 * s * s * (s - 1) ** 2

    def value(self, x: np.ndarray) -> np.ndarray:
        return self.beta(np.sum(np.asarray(x) ** 2, axis=-1) / self.j ** 2)

    def gradient(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        t = np.sum(x * x, axis=-1) / self.j ** 2
        return (2 / self.j ** 2) * self.dbeta(t)[..., None] * x

    def support_radius(self) -> float:
        return 2.0 * self.j


def cutoff_values(j: float, mesh: ShrinkerMesh | AmbientMesh):
    """Vertex values of ``eta_j`` and per-simplex gradients at the centroids.

    On surfaces the gradient is projected to the simplex tangent space.
    """
    eta = CutoffFamily(j)
    V = mesh.vertices
    S = mesh.simplices if isinstance(mesh, ShrinkerMesh) else mesh.cells
    cen = V[S].mean(axis=1)
    g = eta.gradient(cen)
    if isinstance(mesh, ShrinkerMesh):
        nrm = simplex_normals(V, S)
        g = g - np.einsum("td,td->t", g, nrm)[:, None] * nrm
    return eta.value(V), g
