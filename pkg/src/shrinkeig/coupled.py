"""Surface-plus-ambient coupled minimization and drift-harmonic extensions.

For ``alpha > 0`` the coupled quotient is

    Q(f, w) = f^T K_M f + alpha * w^T (K_Omega + K_Omega~) w,   w|_M = f,

minimized over ``m^T f = 0`` and ``f^T M_M f = 1``.  Interface unknowns are
shared between the surface and the ambient mesh, so the trace condition is
exact.  For fixed ``f`` the ambient part is minimized by the weighted
harmonic extension in each region; eliminating the interior unknowns gives
the Schur complement ``S`` on the surface and the definite pencil
``(K_M + alpha S, M_M)``.
"""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as sla
from scipy.special import erfi

from .geometry import AmbientMesh, MeshError, ShrinkerMesh
from .spectrum import EigenResult, first_eigenpair, solve_constrained
from .weighted_forms import (DEFAULT_QUAD_ORDER, WeightedOperatorSet, assemble_ambient_forms,
                             assemble_forms, assemble_surface_forms)

log = logging.getLogger(__name__)

REGIONS = ("omega", "omega_tilde")
DEFAULT_ALPHAS = (1.0, 1e-1, 1e-2, 1e-3)
SCHUR_CHUNK = 128     # right-hand sides per interior solve; bounds peak memory


@dataclass
class _RegionBlock:
    """Interior elimination data for one region."""

    ops: WeightedOperatorSet
    iface_local: np.ndarray      # local rows of the interface, ordered like surface vertices
    surf_index: np.ndarray       # surface vertex index of each interface row
    inner_local: np.ndarray
    lu: Optional[object]
    A_EI: sp.csr_matrix
    schur: np.ndarray            # (N_surface, N_surface), dense

    def extend(self, f: np.ndarray) -> np.ndarray:
        """Local nodal values of the weighted harmonic extension of ``f``."""
        u = np.empty(self.ops.size)
        u[self.iface_local] = f[self.surf_index]
        if len(self.inner_local):
            u[self.inner_local] = -self.lu.solve(self.A_EI @ f[self.surf_index])
        return u


def _region_block(ambient: AmbientMesh, ops: WeightedOperatorSet,
                  fixed_outer: bool = False) -> _RegionBlock:
    n_surf = len(ambient.interface_map)
    where = -np.ones(len(ambient.vertices), dtype=np.int64)
    where[ops.dofs] = np.arange(ops.size)
    loc = where[ambient.interface_map]
    present = loc >= 0
    if not present.any():
        raise MeshError(f"region {ops.domain_tag} has no interface vertices")
    iface = loc[present]
    surf_index = np.nonzero(present)[0]
    mask = np.ones(ops.size, dtype=bool)
    mask[iface] = False
    if fixed_outer:
        outer = where[ambient.outer_boundary]
        mask[outer[outer >= 0]] = False
    inner = np.nonzero(mask)[0]
    A = ops.K.tocsr()
    A_II = A[iface][:, iface].toarray()
    A_EI = A[inner][:, iface].tocsr()
    lu = None
    S_loc = A_II
    if len(inner):
        lu = sla.splu(A[inner][:, inner].tocsc())
        S_loc = A_II.copy()
        A_EIc = A_EI.tocsc()
        A_IE = A_EI.T.tocsr()
        for c0 in range(0, len(iface), SCHUR_CHUNK):
            cols = slice(c0, c0 + SCHUR_CHUNK)
            S_loc[:, cols] -= A_IE @ lu.solve(A_EIc[:, cols].toarray())
    S = np.zeros((n_surf, n_surf))
    S[np.ix_(surf_index, surf_index)] = (S_loc + S_loc.T) / 2
    return _RegionBlock(ops, iface, surf_index, inner, lu, A_EI, S)


@dataclass
class CoupledSystem:
    """Discrete coupled problem on a surface and its conforming ambient mesh.

    ``combined_K`` and ``combined_B`` live on the ambient vertex numbering;
    surface vertex ``i`` is ambient vertex ``trace_map[i]``.
    """

    surface: ShrinkerMesh
    ambient: AmbientMesh
    alpha: float
    surface_ops: WeightedOperatorSet
    ambient_ops: dict
    trace_map: np.ndarray
    combined_K: sp.csr_matrix = field(repr=False)
    combined_B: sp.csr_matrix = field(repr=False)
    mean_vector: np.ndarray = field(repr=False)
    blocks: dict = field(repr=False, default_factory=dict)

    @property
    def n_joint(self) -> int:
        return len(self.ambient.vertices)

    @property
    def schur(self) -> np.ndarray:
        """``S = S_Omega + S_Omega~`` on surface unknowns (alpha independent)."""
        return sum(b.schur for b in self.blocks.values())

    def with_alpha(self, alpha: float) -> "CoupledSystem":
        """Same meshes and eliminations, new coupling weight."""
        _check_alpha(alpha)
        Ka = _ambient_sum(self)
        K = (self.combined_K - self.alpha * Ka + alpha * Ka).tocsr()
        return replace(self, alpha=float(alpha), combined_K=K)

    def restrict(self, w: np.ndarray) -> np.ndarray:
        return np.asarray(w)[self.trace_map]

    def extend(self, f: np.ndarray) -> np.ndarray:
        """Joint vector equal to ``f`` on ``M`` and harmonic in each region."""
        f = np.asarray(f, dtype=float)
        w = np.zeros(self.n_joint)
        for b in self.blocks.values():
            w[b.ops.dofs] = b.extend(f)
        w[self.trace_map] = f
        return w

    def ambient_energy(self, w: np.ndarray) -> float:
        return float(sum(w[b.ops.dofs] @ (b.ops.K @ w[b.ops.dofs]) for b in self.blocks.values()))


def _check_alpha(alpha) -> None:
    if not np.isfinite(alpha) or alpha <= 0:
        raise ValueError(f"alpha must be a positive real, got {alpha!r}")


def _lift(ops: WeightedOperatorSet, index: np.ndarray, n: int) -> sp.csr_matrix:
    P = sp.csr_matrix((np.ones(ops.size), (index, np.arange(ops.size))), shape=(n, ops.size))
    return (P @ ops.K @ P.T).tocsr(), (P @ ops.M @ P.T).tocsr(), P


def _ambient_sum(system: CoupledSystem) -> sp.csr_matrix:
    n = system.n_joint
    out = sp.csr_matrix((n, n))
    for ops in system.ambient_ops.values():
        Kr, _, _ = _lift(ops, ops.dofs, n)
        out = out + Kr
    return out


def assemble_coupled(surface: ShrinkerMesh, ambient: AmbientMesh, alpha: float,
                     quad_order: int = DEFAULT_QUAD_ORDER, parallel: bool = False) -> CoupledSystem:
    """Joint forms ``lift(K_M) + alpha (K_Omega + K_Omega~)`` and ``lift(M_M)``.

    ``parallel`` computes the two Schur complements in separate threads;
    results are keyed by region so the output does not depend on the order
    in which they finish.
    """
    _check_alpha(alpha)
    if ambient.surface is not surface and (
            ambient.surface.vertices.shape != surface.vertices.shape
            or not np.array_equal(ambient.surface.vertices, surface.vertices)):
        raise MeshError("ambient mesh was built for a different surface")
    tm = np.asarray(ambient.interface_map, dtype=np.int64)
    if len(tm) != surface.n_vertices or not np.allclose(ambient.vertices[tm], surface.vertices,
                                                          atol=1e-12, rtol=0):
        raise MeshError("interface map does not reproduce the surface vertices")
    n = len(ambient.vertices)
    sops = assemble_surface_forms(surface, quad_order)
    aops = {r: assemble_ambient_forms(ambient, r, quad_order) for r in REGIONS}
    Ks, Ms, Ps = _lift(sops, tm, n)
    K = Ks
    for ops in aops.values():
        K = K + alpha * _lift(ops, ops.dofs, n)[0]
    K = ((K + K.T) / 2).tocsr()
    if parallel:
        with ThreadPoolExecutor(max_workers=2) as ex:
            futs = {r: ex.submit(_region_block, ambient, aops[r]) for r in REGIONS}
            blocks = {r: futs[r].result() for r in REGIONS}
    else:
        blocks = {r: _region_block(ambient, aops[r]) for r in REGIONS}
    return CoupledSystem(surface, ambient, float(alpha), sops, aops, tm, K, Ms.tocsr(),
                         Ps @ sops.m, blocks)


@dataclass
class CoupledSolution:
    mu: float
    f: np.ndarray
    w: np.ndarray
    alpha: float
    eig: EigenResult

    @property
    def u(self) -> np.ndarray:
        return self.w


def mu_of_alpha(system: CoupledSystem, k: int = 1) -> CoupledSolution:
    """Minimum of the coupled quotient and its minimizing pair ``(f, w)``.

    ``k > 1`` also computes the next eigenvalues of the reduced pencil (kept
    in ``eig``) so clusters can be reported.
    """
    sops = system.surface_ops
    A = sops.K.toarray() + system.alpha * system.schur
    eig = solve_constrained((A + A.T) / 2, sops.M, sops.m, k, True, method="dense")
    f = eig.vector(0).copy()
    w = system.extend(f)
    return CoupledSolution(float(eig.eigenvalues[0]), f, w, system.alpha, eig)


def euler_lagrange_residual(system: CoupledSystem, f: np.ndarray, w: np.ndarray,
                            mu: float) -> float:
    """Normalized residual of the weak optimality system over all joint test pairs.

    For every joint basis vector ``chi`` (restricting to ``phi`` on ``M``)
    this measures ``a_M(f, phi) + alpha a_amb(w, chi) - mu <f, phi>_M`` after
    removing the component along the mean constraint, divided by the same
    projection of ``B w``.
    """
    f = np.asarray(f, dtype=float)
    w = np.asarray(w, dtype=float)
    if f.shape != (system.surface.n_vertices,) or w.shape != (system.n_joint,):
        raise ValueError(f"dimension mismatch: f {f.shape}, w {w.shape}, "
                         f"expected ({system.surface.n_vertices},), ({system.n_joint},)")
    if not np.array_equal(w[system.trace_map], f):
        raise ValueError("w does not restrict to f on the surface")
    mhat = system.mean_vector
    mm = float(mhat @ mhat)

    def proj(v):
        return v - mhat * (mhat @ v) / mm

    Bw = proj(system.combined_B @ w)
    r = proj(system.combined_K @ w - mu * (system.combined_B @ w))
    scale = np.abs(Bw).max()
    if scale == 0:
        raise ValueError("B w has no component off the mean constraint")
    return float(np.abs(r).max() / scale)


@dataclass
class DriftHarmonicSolution:
    region: str
    values: np.ndarray           # ambient-length, NaN outside the region
    boundary_data: np.ndarray
    residual: float
    energy: float
    outer_bc: str


def drift_harmonic_solve(ambient: AmbientMesh, region: str, g: np.ndarray,
                         outer_bc: str = "natural", outer_value: float = 0.0,
                         ops: Optional[WeightedOperatorSet] = None,
                         quad_order: int = DEFAULT_QUAD_ORDER) -> DriftHarmonicSolution:
    """Minimize the weighted Dirichlet energy in ``region`` with trace ``g`` on ``M``.

    ``outer_bc`` is "natural" (zero weighted flux on the ball boundary) or
    "fixed" (value ``outer_value`` there).  Vertices shared with the surface
    always carry the trace condition.
    """
    if region not in REGIONS:
        raise ValueError(f"region must be one of {REGIONS}, got {region!r}")
    if outer_bc not in ("natural", "fixed"):
        raise ValueError(f"outer_bc must be 'natural' or 'fixed', got {outer_bc!r}")
    g = np.asarray(g, dtype=float)
    if g.shape != (len(ambient.interface_map),):
        raise ValueError("boundary data must have one value per surface vertex")
    if ops is None:
        ops = assemble_ambient_forms(ambient, region, quad_order)
    where = -np.ones(len(ambient.vertices), dtype=np.int64)
    where[ops.dofs] = np.arange(ops.size)
    loc = where[ambient.interface_map]
    present = loc >= 0
    if not present.any():
        raise MeshError(f"region {region} has no interface vertices")
    u = np.full(ops.size, np.nan)
    fixed = np.zeros(ops.size, dtype=bool)
    u[loc[present]] = g[present]
    fixed[loc[present]] = True
    if outer_bc == "fixed":
        outer = where[ambient.outer_boundary]
        outer = outer[(outer >= 0) & ~fixed[np.maximum(outer, 0)]]
        u[outer] = outer_value
        fixed[outer] = True
    free = ~fixed
    A = ops.K.tocsr()
    if free.any():
        rhs = -(A[free][:, fixed] @ u[fixed])
        u[free] = sla.spsolve(A[free][:, free].tocsc(), rhs)
        r = A[free] @ u
        scale = np.abs(A[free][:, fixed]).sum(axis=1).max() * max(np.abs(u[fixed]).max(), 1e-300)
        resid = float(np.abs(r).max() / scale) if scale > 0 else float(np.abs(r).max())
    else:
        resid = 0.0
    values = np.full(len(ambient.vertices), np.nan)
    values[ops.dofs] = u
    return DriftHarmonicSolution(region, values, g, resid, float(u @ (A @ u)), outer_bc)


def extension_energy(ambient: AmbientMesh, f: np.ndarray, outer_bc: str = "natural") -> float:
    """``E_ext(f)``: summed weighted energy of the two drift-harmonic extensions."""
    return sum(drift_harmonic_solve(ambient, r, f, outer_bc).energy for r in REGIONS)


@dataclass(frozen=True)
class IntervalCheck:
    max_error: float
    weak_residual: float
    n_nodes: int


def drift_harmonic_interval(a: float = -3.0, b: float = 3.0, n_nodes: int = 2001) -> IntervalCheck:
    """One-dimensional check of ``u'' - x u'/2 = 0`` with ``u' = exp(x^2/4)``.

    The exact solution is ``u = sqrt(pi) erfi(x/2)``.  Reports the nodal error
    of the P1 solve with exact end values and the weak residual of the exact
    interpolant relative to the size of its flux terms.
    """
    if not b > a or n_nodes < 3:
        raise ValueError("need b > a and at least three nodes")
    x = np.linspace(a, b, n_nodes)
    exact = np.sqrt(np.pi) * erfi(x / 2)
    segs = np.column_stack([np.arange(n_nodes - 1), np.arange(1, n_nodes)])
    ops = assemble_forms(x[:, None], segs, 6, domain_tag="interval")
    K = ops.K.tocsr()
    inner = np.arange(1, n_nodes - 1)
    ends = np.array([0, n_nodes - 1])
    u = exact.copy()
    u[inner] = sla.spsolve(K[inner][:, inner].tocsc(), -(K[inner][:, ends] @ exact[ends]))
    r = K[inner] @ exact
    flux = np.abs(K[inner]).multiply(np.abs(exact)[None, :]).sum(axis=1).A.ravel()
    return IntervalCheck(float(np.abs(u - exact).max() / np.abs(exact).max()),
                         float(np.abs(r).max() / flux.max()), n_nodes)


@dataclass(frozen=True)
class SweepRow:
    alpha: float
    mu: float
    gap: float
    ambient_energy: float


@dataclass
class SweepResult:
    lambda1: float
    rows: list
    solutions: list = field(repr=False, default_factory=list)

    def monotone(self) -> bool:
        mus = [r.mu for r in self.rows]
        return all(b <= a for a, b in zip(mus, mus[1:]))


def alpha_sweep(surface: ShrinkerMesh, ambient: AmbientMesh,
                alphas: Sequence[float] = DEFAULT_ALPHAS,
                system: Optional[CoupledSystem] = None) -> SweepResult:
    """``mu(alpha)`` along a descending list, with ``E_ext`` of the surface minimizer.

    ``ambient_energy`` is computed from fresh drift-harmonic solves on both
    regions with data ``f_1`` (the surface-only minimizer), independent of
    the Schur complement used for ``mu``.
    """
    alphas = [float(a) for a in alphas]
    if not alphas:
        raise ValueError("empty alpha list")
    for a in alphas:
        _check_alpha(a)
    if any(b >= a for a, b in zip(alphas, alphas[1:])):
        raise ValueError("alphas must be strictly descending")
    if system is None:
        system = assemble_coupled(surface, ambient, alphas[0])
    lam = first_eigenpair(system.surface_ops, method="dense"
                          if system.surface_ops.size <= 4000 else "auto")
    e_ext = extension_energy(ambient, lam.vector(0))
    rows, sols = [], []
    for a in alphas:
        sol = mu_of_alpha(system.with_alpha(a))
        rows.append(SweepRow(a, sol.mu, sol.mu - lam.first, e_ext))
        sols.append(sol)
    return SweepResult(lam.first, rows, sols)


SWEEP_COLUMNS = ("alpha", "mu", "gap", "ambient_energy")


def write_sweep_csv(result: SweepResult, target) -> None:
    """Write the sweep table to a path or an open text handle."""
    if isinstance(target, (str, bytes)) or hasattr(target, "__fspath__"):
        with open(target, "w", newline="") as fh:
            write_sweep_csv(result, fh)
        return
    wr = csv.writer(target, lineterminator="\n")
    wr.writerow(SWEEP_COLUMNS)
    for r in result.rows:
        wr.writerow([f"{r.alpha:.17g}", f"{r.mu:.17g}", f"{r.gap:.17g}", f"{r.ambient_energy:.17g}"])
