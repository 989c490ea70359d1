"""Kronecker-product SVD.

The nearest sum of ``r`` Kronecker products to ``W`` (in Frobenius norm) is
read off the truncated SVD of the block rearrangement ``R(W)``: each left
singular vector unvectorizes to an m x n factor, each right singular vector
to a p x q factor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, DimensionError
from .tensor import KronShape, as_matrix, rearrange, svd, unvec


@dataclass(frozen=True)
class KronTerm:
    """One weighted Kronecker term ``sigma * kron(U, V)``."""

    sigma: float
    U: np.ndarray
    V: np.ndarray


@dataclass(frozen=True)
class KpsvdResult:
    terms: tuple[KronTerm, ...]
    shape: KronShape
    spectrum: np.ndarray
    residual_fro: float

    @property
    def rank(self) -> int:
        return len(self.terms)

    @property
    def tail_energy(self) -> float:
        return float(np.sum(self.spectrum[self.rank:] ** 2))


def _terms_from_svd(U, S, Vt, shape: KronShape, r: int) -> tuple[KronTerm, ...]:
    m, n, p, q = shape.as_tuple()
    return tuple(
        KronTerm(float(S[k]), unvec(U[:, k], m, n), unvec(Vt[k, :], p, q))
        for k in range(r)
    )


def kpsvd(W, shape: KronShape, r: int) -> KpsvdResult:
    """Decompose ``W ~ sum_k sigma_k kron(U_k, V_k)`` keeping ``r`` terms.

    The full spectrum of ``R(W)`` is always computed and kept on the result,
    so rank selection can run on it without a second decomposition.
    """
    W = as_matrix(W, "W")
    shape.check(W)
    if isinstance(r, bool) or not isinstance(r, (int, np.integer)):
        raise ArgumentError(f"rank must be an integer, got {r!r}")
    if not 1 <= r <= shape.max_rank:
        raise ArgumentError(f"rank {r} outside [1, {shape.max_rank}]")
    U, S, Vt = svd(rearrange(W, shape))
    terms = _terms_from_svd(U, S, Vt, shape, int(r))
    resid = float(np.linalg.norm(W - _sum_terms(terms, shape)))
    return KpsvdResult(terms, shape, S, resid)


def truncate(result: KpsvdResult, r: int, W=None) -> KpsvdResult:
    """Keep the leading ``r`` terms (``0 <= r <= result.rank``).

    ``residual_fro`` is recomputed against ``W`` when given, otherwise it is
    taken from the spectral tail.
    """
    if not 0 <= r <= result.rank:
        raise ArgumentError(f"cannot truncate rank-{result.rank} result to {r}")
    terms = result.terms[:r]
    if W is None:
        resid = float(np.sqrt(np.sum(result.spectrum[r:] ** 2)))
    else:
        resid = float(np.linalg.norm(as_matrix(W, "W") - _sum_terms(terms, result.shape)))
    return KpsvdResult(terms, result.shape, result.spectrum, resid)


def _sum_terms(terms, shape: KronShape) -> np.ndarray:
    m, n, p, q = shape.as_tuple()
    out = np.zeros((m, p, n, q))
    for t in terms:
        out += t.sigma * (t.U[:, None, :, None] * t.V[None, :, None, :])
    return out.reshape(m * p, n * q)


def reconstruct(result: KpsvdResult) -> np.ndarray:
    """Dense ``sum_k sigma_k kron(U_k, V_k)``; the zero matrix for no terms."""
    return _sum_terms(result.terms, result.shape)


def approximation_error(W, result: KpsvdResult) -> float:
    """Frobenius norm of ``W - reconstruct(result)``."""
    W = as_matrix(W, "W")
    if W.shape != (result.shape.rows, result.shape.cols):
        raise DimensionError(
            f"W is {W.shape} but the decomposition is {(result.shape.rows, result.shape.cols)}")
    return float(np.linalg.norm(W - reconstruct(result)))
