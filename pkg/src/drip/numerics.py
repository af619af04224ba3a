"""Small dense linear algebra and reproducible Gaussian streams.

Everything here works on dimensions <= 16. Functions that accept a single
matrix also accept a stack of matrices with a leading batch axis.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1


class ContractViolation(ValueError):
    """Input violates a documented precondition."""


class RankDeficient(ContractViolation):
    """Matrix expected to have full column rank does not."""


def _as_square_stack(A):
    A = np.asarray(A, dtype=float)
    if A.ndim < 2 or A.shape[-1] != A.shape[-2]:
        raise ContractViolation(f"expected square matrix, got shape {A.shape}")
    return A


def sym_eig_max(A, max_sweeps: int = 50) -> float | np.ndarray:
    """Largest eigenvalue of a symmetric matrix by cyclic Jacobi sweeps.

    Accepts an (n, n) matrix or an (..., n, n) stack; rotations are applied to
    the whole stack at once.
    """
    A = _as_square_stack(A)
    scale = np.max(np.abs(A), axis=(-2, -1), keepdims=True)
    asym = np.max(np.abs(A - np.swapaxes(A, -1, -2)), axis=(-2, -1), keepdims=True)
    if np.any(asym > 1e-12 * np.maximum(scale, np.finfo(float).tiny)):
        raise ContractViolation("matrix is not symmetric")

    single = A.ndim == 2
    n = A.shape[-1]
    W = np.array(A.reshape(-1, n, n), dtype=float)
    W = 0.5 * (W + np.swapaxes(W, -1, -2))
    if n == 1:
        out = W[:, 0, 0]
        return float(out[0]) if single else out.reshape(A.shape[:-2])

    fro = np.sqrt(np.sum(W * W, axis=(1, 2)))
    offmask = ~np.eye(n, dtype=bool)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(W[:, offmask] ** 2, axis=1))
        if np.all(off <= 1e-15 * np.maximum(fro, np.finfo(float).tiny)):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = W[:, p, q]
                active = np.abs(apq) > 1e-300
                safe = np.where(active, apq, 1.0)
                theta = (W[:, q, q] - W[:, p, p]) / (2.0 * safe)
                big = np.abs(theta) > 1e150
                th = np.where(big, 1.0, theta)
                t = np.sign(th) / (np.abs(th) + np.sqrt(th * th + 1.0))
                # for huge theta, t ~ 1/(2 theta) without squaring
                t = np.where(big, 0.5 / np.where(big, theta, 1.0), t)
                t = np.where(theta == 0.0, 1.0, t)
                t = np.where(active, t, 0.0)
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                c_ = c[:, None]
                s_ = s[:, None]
                col_p = W[:, :, p].copy()
                col_q = W[:, :, q].copy()
                W[:, :, p] = c_ * col_p - s_ * col_q
                W[:, :, q] = s_ * col_p + c_ * col_q
                row_p = W[:, p, :].copy()
                row_q = W[:, q, :].copy()
                W[:, p, :] = c_ * row_p - s_ * row_q
                W[:, q, :] = s_ * row_p + c_ * row_q
    out = np.max(np.diagonal(W, axis1=1, axis2=2), axis=1)
    return float(out[0]) if single else out.reshape(A.shape[:-2])


def log_norm_2(A) -> float | np.ndarray:
    """Logarithmic norm induced by the Euclidean norm: max eig of (A + A^T)/2."""
    A = _as_square_stack(A)
    return sym_eig_max(0.5 * (A + np.swapaxes(A, -1, -2)))


def column_rank_ok(M, rel_tol: float = 1e-10) -> bool:
    M = np.asarray(M, dtype=float)
    if M.shape[1] > M.shape[0]:
        return False
    sv = np.linalg.svd(M, compute_uv=False)
    return bool(sv.size and sv.min() > rel_tol * sv.max())


def nullspace_basis(M) -> np.ndarray:
    """Orthonormal basis of ker(M^T) for an n x m matrix of full column rank.

    Returns an n x (n - m) matrix (possibly with zero columns).
    """
    M = np.asarray(M, dtype=float)
    if M.ndim != 2:
        raise ContractViolation(f"expected a matrix, got shape {M.shape}")
    n, m = M.shape
    if not column_rank_ok(M):
        raise RankDeficient(f"{n}x{m} matrix does not have full column rank")
    Q, _ = np.linalg.qr(M, mode="complete")
    return Q[:, m:]


def solve_square(A, B) -> np.ndarray:
    """Solve A X = B via LU with partial pivoting."""
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ContractViolation(f"expected square matrix, got shape {A.shape}")
    try:
        return np.linalg.solve(A, B)
    except np.linalg.LinAlgError as exc:
        raise RankDeficient(str(exc)) from exc


def derive_seed(master_seed: int, label: str) -> int:
    """Deterministic 64-bit child seed for a named purpose."""
    h = hashlib.blake2b(f"{int(master_seed) & _MASK64}:{label}".encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


@dataclass(frozen=True)
class RngStream:
    """Descriptor of a counter-based (Philox) Gaussian stream.

    Two streams with equal ``(master_seed, stream_id)`` replay identical draws.
    The descriptor carries no position; each call to :meth:`generator` starts
    from counter zero.
    """

    master_seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        key = ((int(self.stream_id) & _MASK64) << 64) | (int(self.master_seed) & _MASK64)
        return np.random.Generator(np.random.Philox(key=key))

    def as_dict(self) -> dict:
        return {"master_seed": int(self.master_seed), "stream_id": int(self.stream_id)}


def gaussian_draw(stream: RngStream, count: int) -> np.ndarray:
    """First ``count`` standard normal draws of ``stream``."""
    if count < 1:
        raise ContractViolation("count must be >= 1")
    return stream.generator().standard_normal(int(count))
