"""Lifted-matrix construction and decomposition.

The synthesis variables (X11, X12, X22, K, Z) embed into one symmetric
(2n+m) x (2n+m) matrix whose fixed blocks carry the identity and K*C; the
input-bounded variant appends a fourth block row [gamma*I, Y, W].  This
module assembles those matrices, recovers structured blocks from arbitrary
matrices, and provides the structure-consistency projection the inner
solver is built on.
"""

from dataclasses import dataclass

import numpy as np

from .linalg import symmetrize


@dataclass(frozen=True)
class LiftedVariable:
    """Structured blocks of the lifted synthesis matrix."""

    x11: np.ndarray
    x12: np.ndarray
    x22: np.ndarray
    k_gain: np.ndarray
    z_block: np.ndarray

    @property
    def n(self):
        return self.x11.shape[0]

    @property
    def m(self):
        return self.x12.shape[1]


@dataclass(frozen=True)
class AugmentedLifted:
    """Lifted blocks plus the input-bound row (gamma, Y, W) and P3' diagonal."""

    base: LiftedVariable
    gamma: float
    w_inv: np.ndarray
    y_aux: np.ndarray
    v_diag: np.ndarray = None


def assemble(v, c_matrix):
    """Symmetric lifted matrix [[X11, X12, I], [., X22, KC], [., ., Z]]."""
    n, m = v.n, v.m
    kc = v.k_gain @ np.asarray(c_matrix, dtype=float)
    eye = np.eye(n)
    return np.block([
        [symmetrize(v.x11), v.x12, eye],
        [v.x12.T, symmetrize(v.x22), kc],
        [eye, kc.T, symmetrize(v.z_block)],
    ])


def recover_gain(block, c_matrix, pattern):
    """Masked least-squares recovery of K from a candidate K*C block.

    Solves min ||K C - block||_F row by row over the entries the pattern
    allows; rows of C that are linearly dependent get the minimum-norm
    coefficient vector.
    """
    block = np.asarray(block, dtype=float)
    c = np.asarray(c_matrix, dtype=float)
    mask = pattern.mask
    m = mask.shape[0]
    k = np.zeros(mask.shape)
    for i in range(m):
        support = np.flatnonzero(mask[i])
        if support.size == 0:
            continue
        sol, *_ = np.linalg.lstsq(c[support].T, block[i], rcond=None)
        k[i, support] = sol
    return k


def decompose(m_matrix, c_matrix, pattern):
    """Frobenius-nearest LiftedVariable consistent with the block structure.

    Symmetrizes the diagonal blocks, averages the paired off-diagonal
    blocks, pins the (1,3) block to the identity, and recovers K from the
    averaged (2,3) block by masked least squares against the rows of C.
    """
    m_matrix = np.asarray(m_matrix, dtype=float)
    p = pattern.mask.shape[1]
    n = np.asarray(c_matrix).shape[1]
    m = m_matrix.shape[0] - 2 * n
    if m < 0 or m_matrix.shape != (2 * n + m, 2 * n + m):
        raise ValueError("matrix size does not match 2n+m for the given C")
    i1, i2, i3 = slice(0, n), slice(n, n + m), slice(n + m, 2 * n + m)
    x11 = symmetrize(m_matrix[i1, i1])
    x22 = symmetrize(m_matrix[i2, i2])
    z = symmetrize(m_matrix[i3, i3])
    x12 = 0.5 * (m_matrix[i1, i2] + m_matrix[i2, i1].T)
    kc_block = 0.5 * (m_matrix[i2, i3] + m_matrix[i3, i2].T)
    k = recover_gain(kc_block, c_matrix, pattern)
    return LiftedVariable(x11=x11, x12=x12, x22=x22, k_gain=k, z_block=z)


def consistency_project(m_matrix, c_matrix, pattern):
    """Project a matrix onto the lifted structure subspace (assemble o decompose)."""
    return assemble(decompose(m_matrix, c_matrix, pattern), c_matrix)


def consistent_from_gain(system, k_gain, x11, gamma=None):
    """Exact lifted point for a gain and its Lyapunov matrix.

    Fills X12 = X11 (KC)^T, X22 = (KC) X11 (KC)^T, Z = X11^{-1}; with a
    gamma, also the input-bound row (W = gamma X11^{-1}, Y = W X12).
    """
    kc = np.asarray(k_gain) @ system.c_matrix
    x11 = symmetrize(x11)
    x12 = x11 @ kc.T
    x22 = kc @ x11 @ kc.T
    z = np.linalg.inv(x11)
    base = LiftedVariable(x11=x11, x12=x12, x22=symmetrize(x22), k_gain=np.asarray(k_gain, dtype=float), z_block=symmetrize(z))
    if gamma is None:
        return base
    w = gamma * z
    return AugmentedLifted(base=base, gamma=float(gamma), w_inv=symmetrize(w), y_aux=w @ x12)


def assemble_augmented(v, c_matrix, kind="l2"):
    """Rectangular (3n+m) x (2n+m) matrix with the appended [gamma*I, Y, W] row.

    The same matrix serves both input-bound variants; `kind` only checks
    that the infinity-norm variant carries its diagonal slack block.
    """
    if kind not in ("l2", "inf"):
        raise ValueError("kind must be 'l2' or 'inf'")
    if kind == "inf" and v.v_diag is None:
        raise ValueError("infinity-norm variant requires v_diag")
    base = v.base
    n = base.n
    square = assemble(base, c_matrix)
    bottom = np.hstack([v.gamma * np.eye(n), v.y_aux, symmetrize(v.w_inv)])
    return np.vstack([square, bottom])


def decompose_augmented(m_matrix, c_matrix, pattern):
    """Inverse of assemble_augmented (v_diag is not represented and stays None)."""
    m_matrix = np.asarray(m_matrix, dtype=float)
    n = np.asarray(c_matrix).shape[1]
    m = m_matrix.shape[1] - 2 * n
    if m_matrix.shape[0] != 3 * n + m:
        raise ValueError("matrix size does not match (3n+m) x (2n+m)")
    base = decompose(m_matrix[: 2 * n + m], c_matrix, pattern)
    bottom = m_matrix[2 * n + m:]
    gamma = float(np.trace(bottom[:, :n]) / n)
    y_aux = bottom[:, n:n + m]
    w = symmetrize(bottom[:, n + m:])
    return AugmentedLifted(base=base, gamma=gamma, w_inv=w, y_aux=y_aux)
