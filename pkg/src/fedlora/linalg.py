"""Deterministic dense linear-algebra kernels.

Householder QR, exact SVD via one-sided Jacobi rotations, and a single-pass
sketched (randomized) SVD. Everything here is a pure function of its inputs:
the same bits in give the same bits out, so parallel callers are safe and
experiment runs are reproducible.

Algorithm notes:
  * exact_svd uses one-sided Jacobi on the columns of the (tall) input.
    Jacobi is slower than bidiagonalization but accurate to machine
    precision at the small sizes this library targets, and trivially
    deterministic. Wide matrices are handled by transposing and swapping
    the U/V roles.
  * randomized_svd is a single-pass Gaussian sketch (no power iterations):
    when the input has rank at most the sketch size, the sketch already
    captures the full column space, so power iterations buy nothing.
  * Sign convention: the first non-negligible entry of each left singular
    vector is non-negative (the matching right vector is flipped with it),
    which makes factor comparisons across implementations deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

__all__ = [
    "LinAlgError",
    "QrFactors",
    "SvdFactors",
    "check_matrix",
    "standard_normal_sample",
    "qr_decompose",
    "exact_svd",
    "randomized_svd",
]


class LinAlgError(Exception):
    """Raised on dimension mismatches, non-finite input, or non-convergence."""


@dataclass(frozen=True)
class QrFactors:
    """Thin QR factors: Q (d x c, orthonormal columns), R (c x c, upper-triangular)."""

    Q: np.ndarray
    R: np.ndarray


@dataclass(frozen=True)
class SvdFactors:
    """Thin SVD factors: U (d x t), sigma (t, non-increasing, >= 0), V (k x t)."""

    U: np.ndarray
    sigma: np.ndarray
    V: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.U * self.sigma) @ self.V.T


def check_matrix(M, name: str = "matrix") -> np.ndarray:
    """Validate and return a 2-D float64 array with all entries finite."""
    A = np.asarray(M, dtype=np.float64)
    if A.ndim != 2:
        raise LinAlgError(f"{name} must be 2-D, got ndim={A.ndim}")
    if A.size and not np.all(np.isfinite(A)):
        raise LinAlgError(f"{name} contains non-finite entries")
    return A


def standard_normal_sample(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    """Draw a rows x cols standard-normal matrix from a seeded generator.

    Uses numpy's Generator.standard_normal (ziggurat over the PCG64 stream),
    whose output stream is stable across numpy versions and platforms, so
    identically seeded generators reproduce the matrix bit-for-bit.
    """
    if rows < 0 or cols < 0:
        raise LinAlgError("rows and cols must be non-negative")
    return rng.standard_normal((rows, cols))


def qr_decompose(Y) -> QrFactors:
    """Thin QR of a tall matrix via Householder reflections.

    The diagonal of R is forced non-negative (sign absorbed into Q), which
    pins down the otherwise-free column signs.
    """
    A = check_matrix(Y, "Y")
    d, c = A.shape
    if d < c:
        raise LinAlgError(f"qr_decompose needs rows >= cols, got {d} x {c}")

    R = A.copy()
    reflectors: list[np.ndarray | None] = []
    for j in range(c):
        x = R[j:, j]
        norm_x = np.sqrt(np.dot(x, x))
        if not np.isfinite(norm_x):
            raise LinAlgError(f"non-finite Householder norm at column {j}")
        if norm_x == 0.0:
            reflectors.append(None)
            continue
        v = x.copy()
        v[0] += norm_x if v[0] >= 0 else -norm_x
        v /= np.sqrt(np.dot(v, v))
        R[j:, j:] -= 2.0 * np.outer(v, v @ R[j:, j:])
        reflectors.append(v)

    Q = np.zeros((d, c))
    Q[:c, :c] = np.eye(c)
    for j in range(c - 1, -1, -1):
        v = reflectors[j]
        if v is not None:
            Q[j:, :] -= 2.0 * np.outer(v, v @ Q[j:, :])

    signs = np.where(np.diag(R[:c, :c]) < 0.0, -1.0, 1.0)
    Q *= signs
    Rout = np.triu(R[:c, :c] * signs[:, None])
    return QrFactors(Q=Q, R=Rout)


@njit(cache=True)
def _jacobi_sweeps(A, V, tol, max_sweeps):  # pragma: no cover - numba kernel
    """One-sided Jacobi: rotate column pairs of A until all pairs are orthogonal.

    Mutates A (becomes U * diag(sigma), unsorted) and V (accumulated
    rotations). Returns the number of sweeps used, or -1 on non-convergence.
    """
    d, k = A.shape
    for sweep in range(max_sweeps):
        rotated = False
        for p in range(k - 1):
            for q in range(p + 1, k):
                app = 0.0
                aqq = 0.0
                apq = 0.0
                for i in range(d):
                    app += A[i, p] * A[i, p]
                    aqq += A[i, q] * A[i, q]
                    apq += A[i, p] * A[i, q]
                if app * aqq == 0.0:
                    continue
                if abs(apq) <= tol * np.sqrt(app * aqq):
                    continue
                rotated = True
                zeta = (aqq - app) / (2.0 * apq)
                sgn = 1.0 if zeta >= 0.0 else -1.0
                t = sgn / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                cth = 1.0 / np.sqrt(1.0 + t * t)
                sth = cth * t
                for i in range(d):
                    tmp = A[i, p]
                    A[i, p] = cth * tmp - sth * A[i, q]
                    A[i, q] = sth * tmp + cth * A[i, q]
                for i in range(k):
                    tmp = V[i, p]
                    V[i, p] = cth * tmp - sth * V[i, q]
                    V[i, q] = sth * tmp + cth * V[i, q]
        if not rotated:
            return sweep
    return -1


def _orthonormal_fill(U: np.ndarray, start: int) -> None:
    """Fill U[:, start:] with columns orthonormal to the earlier ones (in place).

    Greedy: each new column is the canonical basis vector with the largest
    residual after projecting out the current columns (always bounded away
    from zero while columns remain to fill), re-orthogonalized twice.
    """
    d, t = U.shape
    for col in range(start, t):
        resid = np.eye(d) - U[:, :col] @ U[:, :col].T
        j = int(np.argmax(np.sum(resid * resid, axis=0)))
        cand = resid[:, j]
        cand -= U[:, :col] @ (U[:, :col].T @ cand)  # second pass for stability
        norm = np.sqrt(np.dot(cand, cand))
        if norm == 0.0:
            raise LinAlgError("failed to complete orthonormal basis")
        U[:, col] = cand / norm


def _fix_signs(U: np.ndarray, V: np.ndarray) -> None:
    """Make the first non-negligible entry of each U column non-negative (in place)."""
    for j in range(U.shape[1]):
        col = U[:, j]
        amax = np.max(np.abs(col)) if col.size else 0.0
        if amax == 0.0:
            continue
        idx = np.argmax(np.abs(col) > 1e-12 * amax)
        if col[idx] < 0.0:
            U[:, j] = -col
            V[:, j] = -V[:, j]


def exact_svd(M, max_sweeps: int = 100) -> SvdFactors:
    """Full thin SVD via one-sided Jacobi, t = min(d, k) factors.

    Raises LinAlgError (with the sweep cap) if Jacobi has not converged
    after max_sweeps passes over all column pairs.
    """
    A = check_matrix(M, "M")
    d, k = A.shape
    if d == 0 or k == 0:
        raise LinAlgError("exact_svd needs min(d, k) >= 1")
    if d < k:
        f = exact_svd(A.T, max_sweeps=max_sweeps)
        U, V = f.V.copy(), f.U.copy()
        _fix_signs(U, V)
        return SvdFactors(U=U, sigma=f.sigma, V=V)

    work = A.copy()
    V = np.eye(k)
    sweeps = _jacobi_sweeps(work, V, 1e-15, max_sweeps)
    if sweeps < 0:
        raise LinAlgError(f"Jacobi SVD did not converge after {max_sweeps} sweeps")

    sigma = np.sqrt(np.sum(work * work, axis=0))
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    work = work[:, order]
    V = V[:, order]

    U = np.zeros((d, k))
    tiny = max(d, k) * np.finfo(np.float64).eps * (sigma[0] if sigma.size else 0.0)
    n_good = 0
    for i in range(k):
        if sigma[i] > tiny:
            U[:, i] = work[:, i] / sigma[i]
            n_good = i + 1
    sigma = np.where(sigma > tiny, sigma, 0.0)
    if n_good < k:
        _orthonormal_fill(U, n_good)
    _fix_signs(U, V)
    return SvdFactors(U=U, sigma=sigma, V=V)


def randomized_svd(M, c: int, rng: np.random.Generator) -> SvdFactors:
    """Single-pass sketched SVD with a k x c Gaussian probe.

    Sketch Y = M @ Omega, orthonormalize to Q, project P = Q^T M, take the
    exact SVD of the small P, and lift the left factors back through Q.
    When rank(M) <= c the result is exact up to floating-point error.
    """
    A = check_matrix(M, "M")
    d, k = A.shape
    if not (1 <= c <= min(d, k)):
        raise LinAlgError(f"sketch size c={c} out of range [1, {min(d, k)}]")
    omega = standard_normal_sample(rng, k, c)
    Y = A @ omega
    q = qr_decompose(Y).Q
    P = q.T @ A  # c x k
    f = exact_svd(P)
    U = q @ f.U[:, :c]
    V = f.V[:, :c].copy()
    _fix_signs(U, V)
    return SvdFactors(U=U, sigma=f.sigma[:c].copy(), V=V)
