"""Dense linear-algebra substrate.

Matrices are plain ``numpy.ndarray`` objects of dtype float64 and ndim 2.
Everything here is a pure function: inputs are never modified and returned
arrays are fresh.

Vectorization is column-major throughout, so that

    kron(A, B) @ vec(X) == vec(B @ X @ A.T)

holds for A: m x n, B: p x q and X: q x n.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ArgumentError, ConvergenceError, DimensionError

_MAX_ELEMENTS = np.iinfo(np.intp).max // 8
_EPS = np.finfo(np.float64).eps


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Validate ``x`` as a finite, nonempty 2-D float64 array.

    A copy is made only when the dtype or layout requires it.
    """
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got ndim={a.ndim}")
    if a.shape[0] < 1 or a.shape[1] < 1:
        raise DimensionError(f"{name} must have rows, cols >= 1, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ArgumentError(f"{name} contains NaN or Inf")
    return a


@dataclass(frozen=True)
class KronShape:
    """Factor dimensions: A is m x n, B is p x q, A (x) B is (m*p) x (n*q)."""

    m: int
    n: int
    p: int
    q: int

    def __post_init__(self):
        for field in ("m", "n", "p", "q"):
            v = getattr(self, field)
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)) or v < 1:
                raise ArgumentError(f"KronShape.{field} must be a positive integer, got {v!r}")
            object.__setattr__(self, field, int(v))

    @property
    def rows(self) -> int:
        return self.m * self.p

    @property
    def cols(self) -> int:
        return self.n * self.q

    @property
    def max_rank(self) -> int:
        return min(self.m * self.n, self.p * self.q)

    def check(self, W: np.ndarray, name: str = "W") -> None:
        """Raise DimensionError unless ``W`` is (m*p) x (n*q)."""
        rows, cols = W.shape
        if rows != self.rows:
            raise DimensionError(
                f"{name} has {rows} rows but m*p = {self.m}*{self.p} = {self.rows}")
        if cols != self.cols:
            raise DimensionError(
                f"{name} has {cols} cols but n*q = {self.n}*{self.q} = {self.cols}")

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.m, self.n, self.p, self.q)

    @classmethod
    def parse(cls, text: str) -> "KronShape":
        parts = [s.strip() for s in text.split(",")]
        if len(parts) != 4:
            raise ArgumentError(f"shape must be 'm,n,p,q', got {text!r}")
        try:
            return cls(*(int(s) for s in parts))
        except ValueError:
            raise ArgumentError(f"shape must be four integers, got {text!r}") from None


def _balanced_divisor(k: int) -> int:
    best = 1
    d = 1
    while d * d <= k:
        if k % d == 0:
            best = d
        d += 1
    return best


def choose_shape(rows: int, cols: int) -> KronShape:
    """Pick balanced factors for a ``rows x cols`` weight.

    m is the largest divisor of ``rows`` not exceeding sqrt(rows) and
    p = rows / m; n and q are chosen from ``cols`` the same way. Balanced
    factors minimize m*n + p*q for the fixed products.
    """
    if rows < 1 or cols < 1:
        raise ArgumentError(f"dims must be positive, got {rows}x{cols}")
    m = _balanced_divisor(rows)
    n = _balanced_divisor(cols)
    return KronShape(m, n, rows // m, cols // n)


def kron(A, B) -> np.ndarray:
    """Kronecker product: block (i, j) of the result is ``A[i, j] * B``."""
    A = as_matrix(A, "A")
    B = as_matrix(B, "B")
    rows = A.shape[0] * B.shape[0]
    cols = A.shape[1] * B.shape[1]
    if rows * cols > _MAX_ELEMENTS:
        raise DimensionError(f"kron result {rows}x{cols} is too large")
    out = A[:, None, :, None] * B[None, :, None, :]
    return out.reshape(rows, cols)


def vec(X) -> np.ndarray:
    """Column-major stacking of ``X`` into a (rows*cols) x 1 column."""
    X = as_matrix(X, "X")
    return X.reshape(-1, order="F").reshape(-1, 1).copy()


def unvec(x, rows: int, cols: int) -> np.ndarray:
    """Inverse of :func:`vec`. Accepts a 1-D array or a column."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2 and x.shape[1] == 1:
        x = x[:, 0]
    if x.ndim != 1:
        raise DimensionError(f"unvec expects a vector, got shape {x.shape}")
    if x.size != rows * cols:
        raise DimensionError(f"vector of length {x.size} cannot be unvec'd to {rows}x{cols}")
    return x.reshape(cols, rows).T.copy()


def rearrange(W, shape: KronShape) -> np.ndarray:
    """Block rearrangement R(W) with R(kron(A, B)) == vec(A) @ vec(B).T.

    The p x q block at block-row i, block-column j becomes row ``i + j*m``
    of the (m*n) x (p*q) result, holding the column-major vec of that block.
    """
    W = as_matrix(W, "W")
    shape.check(W)
    m, n, p, q = shape.as_tuple()
    W4 = W.reshape(m, p, n, q)
    # W4[i, a, j, b] -> R[i + j*m, a + b*p]
    return W4.transpose(2, 0, 3, 1).reshape(n * m, q * p).copy()


def unrearrange(R, shape: KronShape) -> np.ndarray:
    """Inverse of :func:`rearrange`."""
    R = as_matrix(R, "R")
    m, n, p, q = shape.as_tuple()
    if R.shape != (m * n, p * q):
        raise DimensionError(f"R must be {(m * n, p * q)}, got {R.shape}")
    R4 = R.reshape(n, m, q, p)
    return R4.transpose(1, 3, 0, 2).reshape(m * p, n * q).copy()


# --------------------------------------------------------------------------
# SVD
# --------------------------------------------------------------------------

class SvdResult(NamedTuple):
    """Thin SVD: ``M == U @ np.diag(S) @ Vt``."""

    U: np.ndarray
    S: np.ndarray
    Vt: np.ndarray


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Tournament schedule: n-1 (or n) rounds of disjoint column pairs."""
    players = list(range(n)) if n % 2 == 0 else list(range(n)) + [-1]
    k = len(players)
    rounds = []
    for _ in range(k - 1):
        left, right = [], []
        for i in range(k // 2):
            a, b = players[i], players[k - 1 - i]
            if a >= 0 and b >= 0:
                left.append(min(a, b))
                right.append(max(a, b))
        rounds.append((np.array(left, dtype=np.intp), np.array(right, dtype=np.intp)))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _fro(A: np.ndarray) -> float:
    """Frobenius norm that neither underflows nor overflows on extreme scales."""
    peak = float(np.abs(A).max())
    return 0.0 if peak == 0 else peak * float(np.linalg.norm(A / peak))


def _jacobi(A: np.ndarray, max_sweeps: int):
    """One-sided (Hestenes) Jacobi on a tall matrix.

    Returns ``(B, V, sweeps)`` with ``A @ V == B`` and the columns of B
    mutually orthogonal to within ``tol`` in cosine.
    """
    m, n = A.shape
    B = A.copy()
    V = np.eye(n)
    if n == 1:
        return B, V, 0
    tol = max(m, n) * _EPS
    # Columns below eps * ||A||_F are numerically null; rotating them only
    # churns rounding noise and can underflow the cosine test forever.
    null = (_EPS * _fro(A)) ** 2
    if null == 0:
        return B, V, 0
    rounds = _round_robin(n)
    for sweep in range(1, max_sweeps + 1):
        rotated = False
        for I, J in rounds:
            bi = B[:, I]
            bj = B[:, J]
            alpha = np.einsum("ij,ij->j", bi, bi)
            beta = np.einsum("ij,ij->j", bj, bj)
            gamma = np.einsum("ij,ij->j", bi, bj)
            mask = ((np.abs(gamma) > tol * np.sqrt(alpha) * np.sqrt(beta))
                    & (alpha > null) & (beta > null))
            if not mask.any():
                continue
            rotated = True
            if not mask.all():
                I, J = I[mask], J[mask]
                bi, bj = bi[:, mask], bj[:, mask]
                alpha, beta, gamma = alpha[mask], beta[mask], gamma[mask]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.hypot(1.0, zeta))
            c = 1.0 / np.hypot(1.0, t)
            s = c * t
            B[:, I] = c * bi - s * bj
            B[:, J] = s * bi + c * bj
            vi = V[:, I]
            vj = V[:, J]
            V[:, I] = c * vi - s * vj
            V[:, J] = s * vi + c * vj
        if not rotated:
            return B, V, sweep
    raise ConvergenceError("one-sided Jacobi SVD did not converge", max_sweeps)


def _complete_basis(Q: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Replace columns of Q not in ``keep`` by an orthonormal completion.

    Completion vectors come from the canonical basis, picking at each step
    the candidate with the largest residual after projection (pivoted
    Gram-Schmidt), so the choice is deterministic.
    """
    m = Q.shape[0]
    basis = [Q[:, j] for j in np.flatnonzero(keep)]
    out = Q.copy()
    for j in np.flatnonzero(~keep):
        cand = np.eye(m)
        if basis:
            Bm = np.column_stack(basis)
            for _ in range(2):
                cand = cand - Bm @ (Bm.T @ cand)
        norms = np.linalg.norm(cand, axis=0)
        k = int(np.argmax(norms))
        v = cand[:, k] / norms[k]
        basis.append(v)
        out[:, j] = v
    return out


def svd(M, max_sweeps: int = 60) -> SvdResult:
    """Thin singular value decomposition by one-sided Jacobi.

    Parameters
    ----------
    M : array_like
        Real matrix of shape (r, c).
    max_sweeps : int
        Iteration budget; exceeding it raises :class:`ConvergenceError`.

    Returns
    -------
    SvdResult
        ``U`` (r x k), ``S`` (k,), ``Vt`` (k x c) with k = min(r, c). ``S`` is
        nonincreasing. Each left singular vector is signed so that its first
        entry of largest magnitude is nonnegative. Null directions are
        completed deterministically from the canonical basis.
    """
    M = as_matrix(M, "M")
    transposed = M.shape[0] < M.shape[1]
    A = M.T if transposed else M
    # exact power-of-two rescale keeps squared column norms representable
    peak = float(np.abs(A).max())
    exp = int(np.frexp(peak)[1]) if peak > 0 else 0
    A = np.ldexp(A, -exp)
    B, V, _ = _jacobi(A, max_sweeps)
    sigma = np.sqrt(np.einsum("ij,ij->j", B, B))
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    B = B[:, order]
    V = V[:, order]
    # Columns at or below the Jacobi null threshold were never orthogonalized;
    # their singular values are kept but their left vectors are completed.
    live = sigma > max(_EPS * _fro(A), np.finfo(np.float64).tiny)
    Q = np.zeros_like(B)
    Q[:, live] = B[:, live] / sigma[live]
    if not live.all():
        Q = _complete_basis(Q, live)
    # A = Q diag(sigma) V^T
    if transposed:
        U, Vt = V, Q.T
    else:
        U, Vt = Q, V.T
    U = U.copy()
    Vt = Vt.copy()
    lead = np.argmax(np.abs(U), axis=0)
    flip = U[lead, np.arange(U.shape[1])] < 0
    U[:, flip] *= -1.0
    Vt[flip, :] *= -1.0
    return SvdResult(U, np.ldexp(sigma, exp), Vt)
