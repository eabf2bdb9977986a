"""Dense nodewise linear algebra: least-norm solves for underdetermined row
systems, Gram determinants, orthogonal complements, a pivot-reporting Cholesky,
and the perturbed simplicial cone frame with its interior test.

Everything is written for stacked inputs: an array of shape (..., k, q) is a
batch of k x q row systems solved independently (k, q <= 100, direct dense)."""

from __future__ import annotations

import numpy as np

RANK_TOL = 1e-12
COEFF_TOL = 1e-10
RESIDUAL_TOL = 1e-10


class RankDeficiencyError(ValueError):
    """A nodewise row family fell below the relative Gram determinant floor."""

    def __init__(self, message: str, batch_index=None, rel_det=None):
        super().__init__(message)
        self.batch_index = batch_index
        self.rel_det = rel_det


def gram_matrix(A: np.ndarray) -> np.ndarray:
    return A @ np.swapaxes(A, -1, -2)


def gram_det(A: np.ndarray) -> np.ndarray | float:
    """Determinant of the Gram matrix of the rows of A (batched)."""
    A = np.asarray(A, dtype=float)
    out = np.linalg.det(gram_matrix(A))
    return float(out) if out.ndim == 0 else out


def _relative_gram_det(A: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gram det normalized by the product of squared row norms (Hadamard scale)."""
    G = gram_matrix(A)
    det = np.linalg.det(G)
    diag = np.diagonal(G, axis1=-2, axis2=-1)
    scale = np.prod(np.where(diag > 0.0, diag, 1.0), axis=-1)
    return det, det / scale


def least_norm_solve(
    A: np.ndarray, b: np.ndarray, rank_tol: float = RANK_TOL
) -> np.ndarray:
    """Minimum-norm solution x = A^T (A A^T)^{-1} b of the underdetermined
    system A x = b, batched over leading axes.

    Raises RankDeficiencyError when the relative Gram determinant of the rows
    drops to rank_tol or below; verifies the residual |A x - b| <= 1e-10 (1+|b|)."""
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    G = gram_matrix(A)
    det, rel = _relative_gram_det(A)
    bad = ~(rel > rank_tol)
    if np.any(bad):
        idx = np.argwhere(np.atleast_1d(bad))
        first = tuple(idx[0]) if idx.size else None
        raise RankDeficiencyError(
            f"row family rank-deficient at batch index {first} "
            f"(relative Gram det {np.atleast_1d(rel)[tuple(np.atleast_1d(bad).nonzero())][0]:.3e})",
            batch_index=first,
            rel_det=float(np.min(rel)),
        )
    lam = np.linalg.solve(G, b[..., None])[..., 0]
    x = np.einsum("...kq,...k->...q", A, lam)
    resid = np.linalg.norm(np.einsum("...kq,...q->...k", A, x) - b, axis=-1)
    bound = RESIDUAL_TOL * (1.0 + np.linalg.norm(b, axis=-1))
    if np.any(resid > bound):
        worst = float(np.max(resid / bound))
        raise FloatingPointError(
            f"least-norm residual check failed (worst ratio {worst:.3e})"
        )
    return x


def project_complement(z: np.ndarray, span: np.ndarray) -> np.ndarray:
    """Component of z orthogonal to the row span of ``span`` (batched).

    Rows of ``span`` must be linearly independent."""
    z = np.asarray(z, dtype=float)
    A = np.asarray(span, dtype=float)
    G = gram_matrix(A)
    rhs = np.einsum("...kq,...q->...k", A, z)
    lam = np.linalg.solve(G, rhs[..., None])[..., 0]
    return z - np.einsum("...kq,...k->...q", A, lam)


def cholesky_upper(Z: np.ndarray) -> np.ndarray:
    """Upper-triangular C with Z = C^T C for a single symmetric matrix Z.

    Raises ValueError naming the 1-based pivot where positivity fails."""
    Z = np.asarray(Z, dtype=float)
    if Z.ndim != 2 or Z.shape[0] != Z.shape[1]:
        raise ValueError("Z must be a square matrix")
    if not np.allclose(Z, Z.T, atol=1e-12 * max(1.0, float(np.abs(Z).max()))):
        raise ValueError("Z must be symmetric")
    k = Z.shape[0]
    C = np.zeros_like(Z)
    scale = float(np.abs(np.diagonal(Z)).max()) or 1.0
    for i in range(k):
        pivot = Z[i, i] - C[:i, i] @ C[:i, i]
        if pivot <= 1e-14 * scale:
            raise ValueError(f"matrix is not positive definite: pivot {i + 1} failed")
        C[i, i] = np.sqrt(pivot)
        if i + 1 < k:
            C[i, i + 1 :] = (Z[i, i + 1 :] - C[:i, i].T @ C[:i, i + 1 :]) / C[i, i]
    err = float(np.abs(C.T @ C - Z).max())
    if err > 1e-12 * max(scale, 1.0):
        raise FloatingPointError(f"cholesky round-trip error {err:.3e}")
    return C


def cone_interior_test(
    frame: np.ndarray, z: np.ndarray, coeff_tol: float = COEFF_TOL
) -> tuple[bool, np.ndarray]:
    """Solve frame coefficients lambda with sum_i lambda_i v_i = z, where the
    v_i are the COLUMNS of ``frame``; z is interior iff every lambda_i exceeds
    coeff_tol."""
    frame = np.asarray(frame, dtype=float)
    z = np.asarray(z, dtype=float)
    lam = np.linalg.solve(frame, z)
    return bool(np.all(lam > coeff_tol)), lam


def perturbed_cone_frame(z: np.ndarray, eps: float) -> np.ndarray:
    """Simplicial frame of q vectors spanning a cone with z in its interior:
    v_i = z + (eps/2) H e_i, with H the reflection exchanging z-hat and the
    all-ones direction.  Columns of the returned (q, q) matrix are the v_i."""
    z = np.asarray(z, dtype=float)
    q = z.shape[0]
    nz = float(np.linalg.norm(z))
    if nz == 0.0:
        raise ValueError("z must be nonzero")
    if eps <= 0.0:
        raise ValueError("eps must be positive")
    zhat = z / nz
    ones = np.full(q, 1.0 / np.sqrt(q))
    w = zhat - ones
    H = np.eye(q)
    wn2 = float(w @ w)
    if wn2 > 1e-28:
        H -= 2.0 * np.outer(w, w) / wn2
    V = z[:, None] + 0.5 * eps * H
    if gram_det(V.T) <= 0.0:
        raise ValueError("perturbed frame degenerate; increase eps")
    return V
