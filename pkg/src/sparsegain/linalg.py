"""Dense matrix kernels: eigen/SVD factorizations, Lyapunov and Riccati
solvers, cone and fixed-rank projections.

Everything here is a pure function of its inputs and safe to call
concurrently on distinct data.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg

# Relative numerical-rank threshold on singular values.  Used everywhere a
# rank is inspected.
RANK_TOL = 1e-9

# Dimension above which the Lyapunov solver switches from the Kronecker
# direct solve to the Schur-form (Bartels-Stewart) path.
_KRON_MAX_DIM = 30


class NoUniqueSolution(Exception):
    """Lyapunov operator is singular: a_cl and -a_cl^T share an eigenvalue."""


class NotStabilizable(Exception):
    """No stabilizing Riccati solution exists for the given (A, B)."""


class NotHurwitz(Exception):
    """A closed-loop matrix that must be Hurwitz is not."""


def symmetrize(m):
    """Return (M + M^T)/2."""
    m = np.asarray(m, dtype=float)
    return 0.5 * (m + m.T)


@dataclass(frozen=True)
class SpectralFactor:
    """Eigendecomposition of a symmetric matrix, eigenvalues descending."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    def reconstruct(self):
        v, w = self.eigenvectors, self.eigenvalues
        return (v * w) @ v.T


def spectral_factor(m) -> SpectralFactor:
    """Symmetric eigendecomposition with descending eigenvalue order."""
    w, v = np.linalg.eigh(symmetrize(m))
    order = np.argsort(w)[::-1]
    return SpectralFactor(eigenvalues=w[order], eigenvectors=v[:, order])


def solve_lyapunov(a_cl, rhs):
    """Solve a_cl X + X a_cl^T + rhs = 0 for symmetric X.

    Uses the Kronecker-vectorized direct solve for small systems and the
    Schur-form path above dimension 30.  Raises NoUniqueSolution when the
    spectra of a_cl and -a_cl^T overlap (within 1e-10 relative).
    """
    a_cl = np.asarray(a_cl, dtype=float)
    rhs = np.asarray(rhs, dtype=float)
    n = a_cl.shape[0]
    if a_cl.shape != (n, n) or rhs.shape != (n, n):
        raise ValueError("a_cl and rhs must be square matrices of equal size")
    eigs = np.linalg.eigvals(a_cl)
    scale = 1.0 + np.max(np.abs(eigs)) if n else 1.0
    pair_sums = np.abs(eigs[:, None] + eigs[None, :])
    if np.min(pair_sums) <= 1e-10 * scale:
        raise NoUniqueSolution(
            "a_cl and -a_cl^T share an eigenvalue; Lyapunov solution not unique"
        )
    if n <= _KRON_MAX_DIM:
        eye = np.eye(n)
        op = np.kron(eye, a_cl) + np.kron(a_cl, eye)
        x = np.linalg.solve(op, -rhs.ravel(order="F")).reshape((n, n), order="F")
    else:
        x = scipy.linalg.solve_continuous_lyapunov(a_cl, -rhs)
    return symmetrize(x)


def solve_care(a, b, q, r):
    """Stabilizing solution of A^T P + P A - P B R^-1 B^T P + Q = 0.

    Returns (p_matrix, k_lqr) with k_lqr = -R^-1 B^T P and A + B k_lqr
    Hurwitz.  The solution from the Hamiltonian deflating-subspace method is
    polished with Kleinman-Newton iterations until the residual is below
    1e-9 * (1 + ||Q||_F).
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    q = symmetrize(q)
    r = symmetrize(r)
    n = a.shape[0]
    m = b.shape[1] if b.ndim == 2 else 1

    if not np.any(b):
        # No actuation: the ARE collapses to A^T P + P A + Q = 0, which has a
        # stabilizing solution only when A is already Hurwitz.
        if hurwitz_margin(a) >= 0:
            raise NotStabilizable("B = 0 and A is not Hurwitz")
        p = solve_lyapunov(a.T, q)
        return p, np.zeros((m, n))

    try:
        p = scipy.linalg.solve_continuous_are(a, b, q, r)
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError, ValueError) as exc:
        raise NotStabilizable(f"Riccati solve failed: {exc}") from exc
    p = symmetrize(p)

    res_tol = 1e-9 * (1.0 + np.linalg.norm(q))
    for _ in range(5):
        k = np.linalg.solve(r, b.T @ p)
        residual = a.T @ p + p @ a - p @ b @ k + q
        if np.linalg.norm(residual) <= res_tol:
            break
        a_cl = a - b @ k
        if hurwitz_margin(a_cl) >= 0:
            break
        # Kleinman step: solve the closed-loop Lyapunov equation afresh.
        p = solve_lyapunov(a_cl.T, q + k.T @ r @ k)

    k_lqr = -np.linalg.solve(r, b.T @ p)
    if hurwitz_margin(a + b @ k_lqr) >= 0:
        raise NotStabilizable("no stabilizing Riccati solution found")
    return p, k_lqr


def project_psd(m):
    """Frobenius-nearest positive semidefinite matrix (eigenvalue clamping)."""
    s = symmetrize(m)
    w, v = np.linalg.eigh(s)
    w = np.maximum(w, 0.0)
    return symmetrize((v * w) @ v.T)


def project_rank(m, r):
    """Frobenius-nearest matrix of rank <= r (truncated SVD).

    Symmetric input goes through (M + M^T)/2 first so the output stays
    exactly symmetric; ties among singular values are broken in SVD order.
    """
    m = np.asarray(m, dtype=float)
    if r >= min(m.shape):
        return m.copy()
    if m.shape[0] == m.shape[1] and np.allclose(m, m.T, atol=1e-12 * (1 + np.abs(m).max())):
        s = symmetrize(m)
        w, v = np.linalg.eigh(s)
        order = np.argsort(np.abs(w))[::-1]
        keep = order[:r]
        return symmetrize((v[:, keep] * w[keep]) @ v[:, keep].T)
    u, sv, vt = np.linalg.svd(m, full_matrices=False)
    return (u[:, :r] * sv[:r]) @ vt[:r]


def hurwitz_margin(m):
    """Spectral abscissa: max real part of the eigenvalues (Hurwitz iff < 0)."""
    return float(np.max(np.linalg.eigvals(np.asarray(m, dtype=float)).real))


def sum_smallest_eigs(m, k):
    """Sum of the k algebraically smallest eigenvalues of a symmetric matrix."""
    w = np.linalg.eigvalsh(symmetrize(m))
    return float(np.sum(w[:k]))


def numerical_rank(m, tol=RANK_TOL):
    """Number of singular values above tol * sigma_max."""
    sv = np.linalg.svd(np.asarray(m, dtype=float), compute_uv=False)
    if sv.size == 0 or sv[0] == 0.0:
        return 0
    return int(np.sum(sv > tol * sv[0]))


def verify_lemma1(u, y, w_perturbation=0.0):
    """Numerical rank of the stacked block matrix built from (U, Y).

    Builds M = [[U, UY^T], [YU, YUY^T], [I, Y^T]] for positive definite U,
    whose rank equals dim(U) whenever the blocks are consistent.  An
    optional multiple of the identity is added to the YUY^T block to probe
    how the rank count reacts to inconsistency.

    Returns (rank_estimate, singular_values).
    """
    u = symmetrize(u)
    y = np.asarray(y, dtype=float)
    n = u.shape[0]
    m = y.shape[0]
    v = u @ y.T
    w = y @ u @ y.T + w_perturbation * np.eye(m)
    top = np.hstack([u, v])
    mid = np.hstack([v.T, w])
    bot = np.hstack([np.eye(n), y.T])
    stacked = np.vstack([top, mid, bot])
    sv = np.linalg.svd(stacked, compute_uv=False)
    rank = int(np.sum(sv > RANK_TOL * sv[0])) if sv[0] > 0 else 0
    return rank, sv
