"""Dense real linear algebra kernels.

Every vectorization in this package is row-major: entry (i, j) of an
``r x c`` matrix lands at index ``i * c + j``.  Under that convention
``vec(A @ X @ B.T) == kron(A, B) @ vec(X)``, which is the identity all the
constraint assembly relies on.
"""
from __future__ import annotations

import math
from typing import NamedTuple, Sequence

import numpy as np


class NumericalError(ArithmeticError):
    """An iterative routine failed to converge."""


def _as_matrix(a) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim == 0:
        m = m.reshape(1, 1)
    elif m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def kron(a, b) -> np.ndarray:
    """Kronecker product, ``out[i*p+k, j*q+l] = a[i, j] * b[k, l]``."""
    return np.kron(_as_matrix(a), _as_matrix(b))


def vec(m) -> np.ndarray:
    """Row-major vectorization of a matrix into a flat vector."""
    return _as_matrix(m).reshape(-1).copy()


def unvec(v, rows: int, cols: int) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if v.size != rows * cols:
        raise ValueError(f"cannot unvec {v.size} entries into {rows}x{cols}")
    return v.reshape(rows, cols).copy()


def direct_sum(blocks: Sequence) -> np.ndarray:
    """Block-diagonal matrix with ``blocks`` placed in order."""
    if len(blocks) == 0:
        raise ValueError("direct_sum needs at least one block")
    mats = [_as_matrix(b) for b in blocks]
    rows = sum(m.shape[0] for m in mats)
    cols = sum(m.shape[1] for m in mats)
    out = np.zeros((rows, cols))
    r = c = 0
    for m in mats:
        out[r:r + m.shape[0], c:c + m.shape[1]] = m
        r += m.shape[0]
        c += m.shape[1]
    return out


def kron_sum(a, b) -> np.ndarray:
    """Kronecker sum ``a (x) I_b + I_a (x) b`` of two square matrices.

    This is the infinitesimal action on a tensor product space: for a
    row-major ``vec``, ``kron_sum(a, b) @ vec(X) == vec(a @ X + X @ b.T)``.
    """
    a = _as_matrix(a)
    b = _as_matrix(b)
    if a.shape[0] != a.shape[1] or b.shape[0] != b.shape[1]:
        raise ValueError("kron_sum requires square matrices")
    return np.kron(a, np.eye(b.shape[0])) + np.kron(np.eye(a.shape[0]), b)


def sym_eig(s, tol: float = 1e-12, max_sweeps: int = 100):
    """Eigendecomposition of a real symmetric matrix by cyclic Jacobi.

    Returns ``(eigenvalues, eigenvectors)`` with eigenvalues sorted in
    descending order and eigenvectors stored as columns.  Sweeps stop once
    the off-diagonal Frobenius norm drops below ``tol * ||s||_F``.

    Raises ``ValueError`` for non-square or asymmetric input and
    ``NumericalError`` if ``max_sweeps`` sweeps do not converge.
    """
    a = _as_matrix(s).copy()
    n = a.shape[0]
    if a.shape[1] != n:
        raise ValueError(f"sym_eig requires a square matrix, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("sym_eig input contains non-finite entries")
    fro = np.linalg.norm(a)
    if np.linalg.norm(a - a.T) > 1e-10 * fro:
        raise ValueError("sym_eig requires a symmetric matrix")
    a = 0.5 * (a + a.T)
    v = np.eye(n)
    target = tol * fro

    def off_norm() -> float:
        off = a - np.diag(np.diag(a))
        return float(np.sqrt(np.sum(off * off)))

    for _ in range(max_sweeps):
        if off_norm() <= target:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                # negligible next to both diagonal entries: drop it
                small = 100.0 * abs(apq)
                if abs(a[p, p]) + small == abs(a[p, p]) and abs(a[q, q]) + small == abs(a[q, q]):
                    a[p, q] = a[q, p] = 0.0
                    continue
                diff = a[q, q] - a[p, p]
                if abs(diff) + small == abs(diff):
                    # tiny rotation angle; tau would overflow
                    t = apq / diff
                else:
                    tau = diff / (2.0 * apq)
                    t = math.copysign(1.0, tau) / (abs(tau) + math.sqrt(1.0 + tau * tau))
                c = 1.0 / math.sqrt(1.0 + t * t)
                sn = t * c
                col_p = a[:, p].copy()
                col_q = a[:, q]
                a[:, p] = c * col_p - sn * col_q
                a[:, q] = sn * col_p + c * col_q
                row_p = a[p, :].copy()
                row_q = a[q, :]
                a[p, :] = c * row_p - sn * row_q
                a[q, :] = sn * row_p + c * row_q
                a[p, q] = a[q, p] = 0.0
                vp = v[:, p].copy()
                vq = v[:, q]
                v[:, p] = c * vp - sn * vq
                v[:, q] = sn * vp + c * vq
    else:
        if off_norm() > target:
            raise NumericalError(f"Jacobi did not converge in {max_sweeps} sweeps")

    w = np.diag(a).copy()
    order = np.argsort(-w, kind="stable")
    return w[order], v[:, order]


def mat_exp(a, order: int = 18, theta: float = 0.5) -> np.ndarray:
    """Matrix exponential by scaling and squaring of a truncated Taylor series.

    The argument is halved until its 1-norm is at most ``theta``, the series
    is summed to ``order`` terms with Horner's rule, then squared back.
    """
    a = _as_matrix(a)
    n = a.shape[0]
    if a.shape[1] != n:
        raise ValueError(f"mat_exp requires a square matrix, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("mat_exp input contains non-finite entries")
    norm1 = float(np.max(np.sum(np.abs(a), axis=0))) if n else 0.0
    squarings = 0
    if norm1 > theta:
        squarings = int(math.ceil(math.log2(norm1 / theta)))
    x = a / (2.0 ** squarings)
    eye = np.eye(n)
    out = eye.copy()
    for k in range(order, 0, -1):
        out = eye + (x @ out) / k
    for _ in range(squarings):
        out = out @ out
    return out


class LstsqSolution(NamedTuple):
    solution: np.ndarray
    residual: float
    rank: int
    rank_deficient: bool


def solve_normal_equations(a, b, rcond: float = 1e-12) -> LstsqSolution:
    """Least squares ``min ||a X - b||_F`` through the normal equations.

    ``a.T a`` is eigendecomposed and eigenvalues at or below
    ``rcond * max_eigenvalue`` are dropped, so a rank-deficient ``a`` yields
    the minimum-norm solution with ``rank_deficient`` set.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 1:
        a = a.reshape(-1, 1)
    squeeze = b.ndim == 1
    if squeeze:
        b = b.reshape(-1, 1)
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"row mismatch: a has {a.shape[0]}, b has {b.shape[0]}")
    w, q = sym_eig(a.T @ a)
    cutoff = rcond * max(float(w[0]), 0.0)
    keep = w > cutoff
    if not np.any(keep):
        x = np.zeros((a.shape[1], b.shape[1]))
    else:
        qk = q[:, keep]
        x = qk @ ((qk.T @ (a.T @ b)) / w[keep][:, None])
    resid = float(np.sum((a @ x - b) ** 2))
    if squeeze:
        x = x.reshape(-1)
    rank = int(np.count_nonzero(keep))
    return LstsqSolution(x, resid, rank, rank < a.shape[1])
