"""Constrained generalized eigenproblem for the weighted Rayleigh quotient.

Minimize ``f^T K f / f^T M f`` over nodal vectors with ``m^T f = 0``.  With
``m = M 1`` and ``K 1 = 0`` the constrained spectrum is the nonzero part of
the pencil ``(K, M)``; the solvers below never rely on that and instead
project onto the constraint explicitly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as sla

from .weighted_forms import WeightedOperatorSet, cutoff_values

log = logging.getLogger(__name__)

DENSE_LIMIT = 2000
EIG_TOL = 1e-10
RESIDUAL_TOL = 1e-8
CLUSTER_RTOL = 1e-6
LAMBDA1_LOWER_BOUND = 0.25


class EigensolverError(RuntimeError):
    """Raised when an eigensolver fails to reach the requested residual."""

    def __init__(self, message: str, iterations: int = 0, residual: float = float("nan")):
        super().__init__(f"{message} (iterations={iterations}, last residual={residual:.3e})")
        self.iterations = iterations
        self.residual = residual


@dataclass
class EigenResult:
    """Eigenpairs of the mean-zero constrained problem with diagnostics."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray          # columns
    residuals: np.ndarray
    multipliers: np.ndarray
    mean_violation: np.ndarray
    norm_violation: np.ndarray
    method: str = "dense"
    constrained: bool = True
    iterations: int = 0
    info: dict = field(default_factory=dict)

    @property
    def k(self) -> int:
        return len(self.eigenvalues)

    @property
    def first(self) -> float:
        return float(self.eigenvalues[0])

    def vector(self, i: int = 0) -> np.ndarray:
        return self.eigenvectors[:, i]

    def clusters(self, rtol: float = CLUSTER_RTOL) -> list[tuple[float, int]]:
        """Group eigenvalues within ``rtol`` relative; returns (mean, multiplicity)."""
        out: list[list[float]] = []
        for lam in self.eigenvalues:
            if out and abs(lam - out[-1][-1]) <= rtol * max(abs(lam), 1e-300):
                out[-1].append(lam)
            else:
                out.append([lam])
        return [(float(np.mean(c)), len(c)) for c in out]

    def rows(self):
        for i, lam in enumerate(self.eigenvalues):
            yield i, float(lam), float(self.residuals[i]), float(self.mean_violation[i])


def _constraint_basis(m: np.ndarray) -> np.ndarray:
    """Orthonormal basis of ``{f : m^T f = 0}`` via one Householder reflector."""
    n = len(m)
    v = m / np.linalg.norm(m)
    e = np.zeros(n)
    e[0] = 1.0
    u = v + np.sign(v[0] if v[0] != 0 else 1.0) * e
    u /= np.linalg.norm(u)
    H = np.eye(n) - 2 * np.outer(u, u)
    return H[:, 1:]


def _finalize(K, M, m, vals, vecs, method, constrained, iterations=0) -> EigenResult:
    order = np.argsort(vals, kind="stable")
    vals = np.asarray(vals, dtype=float)[order]
    vecs = np.asarray(vecs, dtype=float)[:, order]
    Mv = M @ vecs
    norms = np.sqrt(np.einsum("ij,ij->j", vecs, Mv))
    vecs = vecs / norms
    Mv = Mv / norms
    # deterministic sign: largest-magnitude entry positive
    idx = np.argmax(np.abs(vecs), axis=0)
    sgn = np.sign(vecs[idx, np.arange(vecs.shape[1])])
    sgn[sgn == 0] = 1
    vecs = vecs * sgn
    Mv = Mv * sgn
    Kv = K @ vecs
    # Rayleigh quotients are exact for the returned vectors; re-sort since
    # they may swap order within a cluster by rounding
    vals = np.einsum("ij,ij->j", vecs, Kv)
    order = np.argsort(vals, kind="stable")
    vals, vecs, Mv, Kv = vals[order], vecs[:, order], Mv[:, order], Kv[:, order]
    R = Kv - Mv * vals
    if constrained:
        theta = (m @ R) / (m @ m)
        R = R - np.outer(m, theta)
    else:
        theta = np.zeros(len(vals))
    res = np.linalg.norm(R, axis=0) / np.linalg.norm(Mv, axis=0)
    mean_v = np.abs(m @ vecs)
    norm_v = np.abs(np.einsum("ij,ij->j", vecs, Mv) - 1.0)
    return EigenResult(vals, vecs, res, theta, mean_v, norm_v, method, constrained, iterations)


def _dense(K, M, m, k, constrained):
    Kd = K.toarray() if sp.issparse(K) else np.asarray(K)
    Md = M.toarray() if sp.issparse(M) else np.asarray(M)
    if constrained:
        Q = _constraint_basis(m)
        Kr = Q.T @ Kd @ Q
        Mr = Q.T @ Md @ Q
        w, y = la.eigh((Kr + Kr.T) / 2, (Mr + Mr.T) / 2, subset_by_index=[0, k - 1])
        return w, Q @ y
    w, y = la.eigh((Kd + Kd.T) / 2, (Md + Md.T) / 2, subset_by_index=[0, k - 1])
    return w, y


def _projector(M, m):
    lu = sla.splu(sp.csc_matrix(M))
    y = lu.solve(m)
    my = float(m @ y)

    def P(v):  # M-orthogonal projection onto {m^T f = 0}
        return v - np.outer(y, m @ v) / my if v.ndim == 2 else v - y * (m @ v) / my

    def PT(v):
        return v - np.outer(m, y @ v) / my if v.ndim == 2 else v - m * (y @ v) / my

    return y, P, PT


def _lobpcg(K, M, m, k, constrained, tol, maxiter, seed):
    n = K.shape[0]
    shift = sla.splu(sp.csc_matrix(K + M))
    prec = sla.LinearOperator((n, n), matvec=shift.solve, matmat=shift.solve, dtype=float)
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, k + 2))
    Y = None
    if constrained:
        y, P, _ = _projector(M, m)
        Y = y[:, None]
        X = P(X)
    w, v, hist = sla.lobpcg(K, X, B=M, M=prec, Y=Y, tol=tol, maxiter=maxiter,
                            largest=False, retResidualNormsHistory=True)
    return w[:k], v[:, :k], len(hist)


def _shift_invert(K, M, m, k, constrained, sigma=-0.1):
    n = K.shape[0]
    lu = sla.splu(sp.csc_matrix(K - sigma * M))
    if constrained:
        _, P, PT = _projector(M, m)
        op = sla.LinearOperator((n, n), matvec=lambda z: P(lu.solve(PT(z))), dtype=float)
    else:
        op = sla.LinearOperator((n, n), matvec=lu.solve, dtype=float)
    v0 = np.ones(n) + np.linspace(0, 1, n)
    w, v = sla.eigsh(K, k=k, M=M, sigma=sigma, which="LM", OPinv=op, v0=v0, tol=0)
    return w, v


def solve_constrained(K, M, m, k: int = 1, constrained: bool = True, method: str = "auto",
                      tol: float = RESIDUAL_TOL, maxiter: int = 500, seed: int = 0,
                      shift_invert: bool = False) -> EigenResult:
    """Lowest ``k`` eigenpairs of ``K f = lam M f`` restricted to ``m^T f = 0``.

    ``method`` is "dense", "lobpcg", "shift-invert" or "auto" (dense below
    ``DENSE_LIMIT`` unknowns, otherwise LOBPCG with a shift-invert fallback
    when the residual target is missed).
    """
    n = K.shape[0]
    if k < 1 or k >= n:
        raise ValueError(f"k must satisfy 1 <= k < {n}, got {k}")
    if method == "auto":
        method = "dense" if n <= DENSE_LIMIT else ("shift-invert" if shift_invert else "lobpcg")
    if method == "dense":
        try:
            w, v = _dense(K, M, m, k, constrained)
        except la.LinAlgError as exc:
            raise EigensolverError(f"dense eigensolve failed: {exc}") from exc
        res = _finalize(K, M, m, w, v, "dense", constrained)
    elif method == "lobpcg":
        w, v, its = _lobpcg(K, M, m, k, constrained, tol * 1e-2, maxiter, seed)
        res = _finalize(K, M, m, w, v, "lobpcg", constrained, its)
        if res.residuals.max() > tol:
            log.info("lobpcg residual %.2e above %.1e; switching to shift-invert Lanczos",
                     res.residuals.max(), tol)
            w, v = _shift_invert(K, M, m, k, constrained)
            res = _finalize(K, M, m, w, v, "shift-invert", constrained, its)
    elif method == "shift-invert":
        w, v = _shift_invert(K, M, m, k, constrained)
        res = _finalize(K, M, m, w, v, "shift-invert", constrained)
    else:
        raise ValueError(f"unknown method {method!r}")
    if res.residuals.max() > tol:
        raise EigensolverError("eigensolver missed the residual target",
                               res.iterations, float(res.residuals.max()))
    return res


def spectrum_k(ops: WeightedOperatorSet, k: int, constrained: bool = True,
               **kwargs) -> EigenResult:
    """The ``k`` lowest (mean-zero constrained) eigenpairs of the weighted pencil."""
    return solve_constrained(ops.K, ops.M, ops.m, k, constrained, **kwargs)


def first_eigenpair(ops: WeightedOperatorSet, **kwargs) -> EigenResult:
    """``lambda_1 = min_{m^T f = 0} f^T K f / f^T M f`` and its minimizer."""
    return spectrum_k(ops, 1, True, **kwargs)


def rayleigh_quotient(ops: WeightedOperatorSet, f: np.ndarray) -> float:
    f = np.asarray(f, dtype=float)
    den = float(f @ (ops.M @ f))
    if den <= 0:
        raise ValueError("Rayleigh quotient of the zero vector")
    return float(f @ (ops.K @ f)) / den


def mean_zero_project(ops: WeightedOperatorSet, f: np.ndarray) -> np.ndarray:
    """Subtract the weighted mean: ``f - (m^T f / m^T 1) 1``."""
    total = ops.total_weight
    if total <= 0:
        raise ValueError("total weight must be positive")
    f = np.asarray(f, dtype=float)
    return f - float(ops.m @ f) / total


@dataclass(frozen=True)
class TruncationRow:
    j: float
    mean_shift: float       # a_j
    energy: float           # int rho |grad(eta_j g)|^2
    l2: float               # int rho (eta_j g - a_j)^2
    quotient: float


def truncation_study(mesh, ops: WeightedOperatorSet, g: np.ndarray,
                     j_values: Sequence[float]) -> list[TruncationRow]:
    """Rayleigh quotients of the mean-adjusted truncations ``eta_j g - a_j``."""
    js = list(j_values)
    if any(b < a for a, b in zip(js, js[1:])):
        raise ValueError("j_values must be ascending")
    g = np.asarray(g, dtype=float)
    rows = []
    for j in js:
        eta, _ = cutoff_values(j, mesh)
        h = eta * g
        a = float(ops.m @ h) / ops.total_weight
        hp = h - a
        energy = float(h @ (ops.K @ h))
        l2 = float(hp @ (ops.M @ hp))
        rows.append(TruncationRow(float(j), a, energy, l2, energy / l2))
    return rows
