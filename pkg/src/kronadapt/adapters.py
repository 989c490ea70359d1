"""Trainable weight-update adapters.

Every adapter represents an effective weight ``base + update`` acting on a
batch of input columns ``X`` (shape ``in_dim x batch``). ``base`` is frozen;
the arrays returned by :meth:`parameters` are the trainable state and are
changed only through :meth:`apply_delta` (or in place by a caller that
owns the adapter exclusively, e.g. a finite-difference check).

Gradients are with respect to a scalar loss whose derivative with respect to
the adapter output is the upstream matrix ``G`` passed to :meth:`backward`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, DimensionError
from .kpsvd import KronTerm, kpsvd, truncate
from .rank import RankDecision, RankPolicy, manual_decision, select_rank
from .tensor import KronShape, as_matrix, svd

# LoRA's A is drawn from U(-LORA_INIT_BOUND / sqrt(r), LORA_INIT_BOUND / sqrt(r)).
LORA_INIT_BOUND = 1.0


class FlopCounter:
    """Accumulates multiply-add counts of the GEMMs it is handed."""

    def __init__(self):
        self.madds = 0

    def gemm(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        # batched matmul: leading axes multiply the per-product cost
        batch = int(np.prod(np.broadcast_shapes(a.shape[:-2], b.shape[:-2]), dtype=np.int64))
        self.madds += batch * a.shape[-2] * a.shape[-1] * b.shape[-1]
        return a @ b


def _matmul(a, b, counter):
    return a @ b if counter is None else counter.gemm(a, b)


@dataclass(frozen=True)
class CostReport:
    trainable_params: int
    matvec_flops: int
    dense_equivalent_flops: int


def soka_cost(shape: KronShape, r: int) -> CostReport:
    """Cost of an r-term Kronecker update: r(mn + pq + 1) parameters."""
    m, n, p, q = shape.as_tuple()
    return CostReport(
        trainable_params=r * (m * n + p * q + 1),
        matvec_flops=r * (p * q * n + p * n * m),
        dense_equivalent_flops=shape.rows * shape.cols,
    )


def lowrank_cost(rows: int, cols: int, r: int) -> CostReport:
    """Cost of ``A @ B.T`` with A: rows x r, B: cols x r (2Nr when square)."""
    return CostReport(
        trainable_params=r * (rows + cols),
        matvec_flops=r * (rows + cols),
        dense_equivalent_flops=rows * cols,
    )


def _check_input(X, in_dim: int, name: str = "X") -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise DimensionError(f"{name} must be 2-D (features x batch), got ndim={X.ndim}")
    if X.shape[0] != in_dim:
        raise DimensionError(f"{name} has {X.shape[0]} rows, adapter expects {in_dim}")
    return X


# --------------------------------------------------------------------------
# Kronecker matvec
# --------------------------------------------------------------------------

def kron_matmat(term: KronTerm, X, counter: FlopCounter | None = None) -> np.ndarray:
    """``term.sigma * kron(term.U, term.V) @ X`` without forming the product.

    Each column x is mapped to ``sigma * vec(V @ unvec(x, q, n) @ U.T)``,
    computed as V times the unvectorized input first, then U. That costs
    p*q*n + p*n*m multiply-adds per column; the scalar ``sigma`` scaling is
    not counted.
    """
    U, V = term.U, term.V
    m, n = U.shape
    p, q = V.shape
    X = _check_input(X, n * q)
    B = X.shape[1]
    VX = _matmul(V, X.reshape(n, q, B), counter)          # (n, p, B)
    Y = _matmul(U, VX.reshape(n, p * B), counter)         # (m, p*B)
    return term.sigma * Y.reshape(m * p, B)


def kron_matvec(term: KronTerm, x, counter: FlopCounter | None = None) -> np.ndarray:
    """Single-vector form of :func:`kron_matmat`; keeps the input's ndim."""
    x = np.asarray(x, dtype=np.float64)
    flat = x.ndim == 1
    if x.ndim not in (1, 2) or (x.ndim == 2 and x.shape[1] != 1):
        raise DimensionError(f"x must be a vector or a column, got shape {x.shape}")
    y = kron_matmat(term, x.reshape(-1, 1), counter)
    return y[:, 0] if flat else y


# --------------------------------------------------------------------------
# Adapters
# --------------------------------------------------------------------------

class Adapter:
    """Common surface shared by all adapter kinds."""

    kind = "abstract"

    def __init__(self, base):
        self.base = np.ascontiguousarray(as_matrix(base, "base"))
        self.base.setflags(write=False)

    @property
    def out_dim(self) -> int:
        return self.base.shape[0]

    @property
    def in_dim(self) -> int:
        return self.base.shape[1]

    def parameters(self) -> dict[str, np.ndarray]:
        raise NotImplementedError

    def update_matrix(self) -> np.ndarray:
        raise NotImplementedError

    def forward(self, X) -> np.ndarray:
        raise NotImplementedError

    def backward(self, X, G) -> tuple[dict[str, np.ndarray], np.ndarray]:
        """Return ``(parameter_gradients, input_gradient)``."""
        raise NotImplementedError

    def cost_report(self) -> CostReport:
        raise NotImplementedError

    def merge(self) -> np.ndarray:
        """Dense ``base + update`` for inference."""
        return self.base + self.update_matrix()

    def num_trainable(self) -> int:
        return int(sum(p.size for p in self.parameters().values()))

    def apply_delta(self, deltas: dict[str, np.ndarray]) -> None:
        """Add ``deltas[name]`` to each named parameter in place."""
        params = self.parameters()
        for name, d in deltas.items():
            if name not in params:
                raise ArgumentError(f"unknown parameter {name!r}")
            if np.shape(d) != params[name].shape:
                raise DimensionError(
                    f"delta for {name!r} has shape {np.shape(d)}, expected {params[name].shape}")
            params[name] += d

    def _check_grad(self, X, G):
        X = _check_input(X, self.in_dim)
        G = np.asarray(G, dtype=np.float64)
        if G.shape != (self.out_dim, X.shape[1]):
            raise DimensionError(f"G has shape {G.shape}, expected {(self.out_dim, X.shape[1])}")
        return X, G


class SokaAdapter(Adapter):
    """Frozen residual plus a trainable sum of weighted Kronecker terms.

    Parameters are stacked: ``sigma`` (r,), ``U`` (r, m, n), ``V`` (r, p, q).
    """

    kind = "soka"

    def __init__(self, base, sigma, U, V, shape: KronShape,
                 rank_decision: RankDecision | None = None):
        super().__init__(base)
        shape.check(self.base, "base")
        r = len(sigma)
        self.shape = shape
        self.sigma = np.array(sigma, dtype=np.float64).reshape(r)
        self.U = np.array(U, dtype=np.float64).reshape(r, shape.m, shape.n)
        self.V = np.array(V, dtype=np.float64).reshape(r, shape.p, shape.q)
        self.rank_decision = rank_decision

    @property
    def rank(self) -> int:
        return self.sigma.size

    @property
    def terms(self) -> list[KronTerm]:
        return [KronTerm(float(s), u, v) for s, u, v in zip(self.sigma, self.U, self.V)]

    def parameters(self):
        return {"sigma": self.sigma, "U": self.U, "V": self.V}

    def factor_norm_drift(self) -> float:
        """Largest deviation of any ||U_k||_F or ||V_k||_F from 1."""
        if self.rank == 0:
            return 0.0
        nu = np.linalg.norm(self.U.reshape(self.rank, -1), axis=1)
        nv = np.linalg.norm(self.V.reshape(self.rank, -1), axis=1)
        return float(max(np.abs(nu - 1).max(), np.abs(nv - 1).max()))

    def update_matrix(self):
        m, n, p, q = self.shape.as_tuple()
        full = np.einsum("k,kij,kab->iajb", self.sigma, self.U, self.V)
        return full.reshape(m * p, n * q)

    # Batched layout: a column block x (length n*q) is viewed as X3[j, b]
    # = unvec(x, q, n)[b, j], so V @ X3 and U @ (.) are plain GEMMs and the
    # output block (m, p) flattens row-major to vec(V X U^T).

    def _vx(self, X3):
        return self.V[:, None] @ X3[None]                 # (r, n, p, B)

    def forward(self, X):
        X = _check_input(X, self.in_dim)
        Y = self.base @ X
        m, n, p, q = self.shape.as_tuple()
        B = X.shape[1]
        X3 = X.reshape(n, q, B)
        for k, VX in enumerate(self._vx(X3)):
            Y += self.sigma[k] * (self.U[k] @ VX.reshape(n, p * B)).reshape(m * p, B)
        return Y

    def backward(self, X, G):
        X, G = self._check_grad(X, G)
        m, n, p, q = self.shape.as_tuple()
        B = X.shape[1]
        r = self.rank
        X3 = X.reshape(n, q, B)
        Gm = G.reshape(m, p * B)
        gin = self.base.T @ G
        g_sigma = np.zeros(r)
        g_U = np.zeros_like(self.U)
        g_V = np.zeros_like(self.V)
        for k, VX in enumerate(self._vx(X3)):
            VXm = VX.reshape(n, p * B)
            s = self.sigma[k]
            GVX = Gm @ VXm.T                               # (m, n)
            g_sigma[k] = np.sum(GVX * self.U[k])
            g_U[k] = s * GVX
            GU = (self.U[k].T @ Gm).reshape(n, p, B)
            g_V[k] = s * np.tensordot(GU, X3, axes=([0, 2], [0, 2]))
            gin += s * (self.V[k].T @ GU).reshape(n * q, B)
        return {"sigma": g_sigma, "U": g_U, "V": g_V}, gin

    def cost_report(self):
        return soka_cost(self.shape, self.rank)


class LowRankAdapter(Adapter):
    """``base + scale * A @ B.T`` with A: out_dim x r and B: in_dim x r."""

    def __init__(self, base, A, B, scale: float = 1.0):
        super().__init__(base)
        self.A = np.array(A, dtype=np.float64, order="C")
        self.B = np.array(B, dtype=np.float64, order="C")
        if self.A.ndim != 2 or self.A.shape[0] != self.out_dim:
            raise DimensionError(f"A must be {self.out_dim} x r, got {self.A.shape}")
        if self.B.ndim != 2 or self.B.shape != (self.in_dim, self.A.shape[1]):
            raise DimensionError(f"B must be {self.in_dim} x {self.A.shape[1]}, got {self.B.shape}")
        self.scale = float(scale)

    @property
    def rank(self) -> int:
        return self.A.shape[1]

    def parameters(self):
        return {"A": self.A, "B": self.B}

    def update_matrix(self):
        return self.scale * (self.A @ self.B.T)

    def forward(self, X):
        X = _check_input(X, self.in_dim)
        return self.base @ X + self.scale * (self.A @ (self.B.T @ X))

    def backward(self, X, G):
        X, G = self._check_grad(X, G)
        BX = self.B.T @ X                    # (r, batch)
        AG = self.A.T @ G                    # (r, batch)
        g_A = self.scale * (G @ BX.T)
        g_B = self.scale * (X @ AG.T)
        gin = self.base.T @ G + self.scale * (self.B @ AG)
        return {"A": g_A, "B": g_B}, gin

    def cost_report(self):
        return lowrank_cost(self.out_dim, self.in_dim, self.rank)


class LoraAdapter(LowRankAdapter):
    kind = "lora"


class PissaAdapter(LowRankAdapter):
    kind = "pissa"


class FullAdapter(Adapter):
    """Full fine-tuning: the whole weight is trainable and ``base`` is zero."""

    kind = "full"

    def __init__(self, W):
        W = as_matrix(W, "W")
        super().__init__(np.zeros_like(W))
        self.W = np.array(W, dtype=np.float64, order="C")

    def parameters(self):
        return {"W": self.W}

    def update_matrix(self):
        return self.W.copy()

    def forward(self, X):
        X = _check_input(X, self.in_dim)
        return self.W @ X

    def backward(self, X, G):
        X, G = self._check_grad(X, G)
        return {"W": G @ X.T}, self.W.T @ G

    def cost_report(self):
        size = self.out_dim * self.in_dim
        return CostReport(size, size, size)


# --------------------------------------------------------------------------
# Initializers
# --------------------------------------------------------------------------

def soka_init(W, shape: KronShape, policy: RankPolicy | None = None,
              rank: int | None = None) -> SokaAdapter:
    """KPSVD initialization against the frozen residual.

    The full spectrum of ``R(W)`` drives :func:`select_rank` (or a fixed
    ``rank`` when given); the leading terms become trainable and the base is
    ``W`` minus their reconstruction, so the adapter starts at ``W``.
    """
    W = as_matrix(W, "W")
    shape.check(W)
    policy = RankPolicy() if policy is None else policy
    full = kpsvd(W, shape, shape.max_rank)
    if rank is None:
        decision = select_rank(full.spectrum, policy)
    else:
        decision = manual_decision(full.spectrum, rank, policy)
    kept = truncate(full, decision.r_final)
    sigma = np.array([t.sigma for t in kept.terms])
    U = np.array([t.U for t in kept.terms]).reshape(-1, shape.m, shape.n)
    V = np.array([t.V for t in kept.terms]).reshape(-1, shape.p, shape.q)
    adapter = SokaAdapter(np.zeros_like(W), sigma, U, V, shape, decision)
    base = W - adapter.update_matrix()
    return SokaAdapter(base, sigma, U, V, shape, decision)


def kron_random_init(W, shape: KronShape, rank: int, seed: int = 0) -> SokaAdapter:
    """Kronecker adapter with LoRA-style initialization (ablation).

    U is uniform in +-1/sqrt(rank), V is zero and sigma is one, so the
    update starts at zero on top of the unchanged ``W``.
    """
    W = as_matrix(W, "W")
    shape.check(W)
    if rank < 1:
        raise ArgumentError(f"rank must be positive, got {rank}")
    rng = np.random.default_rng(seed)
    bound = LORA_INIT_BOUND / np.sqrt(rank)
    U = rng.uniform(-bound, bound, size=(rank, shape.m, shape.n))
    V = np.zeros((rank, shape.p, shape.q))
    return SokaAdapter(W, np.ones(rank), U, V, shape)


def lora_init(W, rank: int, seed: int = 0, scale: float = 1.0) -> LoraAdapter:
    W = as_matrix(W, "W")
    if not 1 <= rank <= min(W.shape):
        raise ArgumentError(f"rank {rank} outside [1, {min(W.shape)}]")
    rng = np.random.default_rng(seed)
    bound = LORA_INIT_BOUND / np.sqrt(rank)
    A = rng.uniform(-bound, bound, size=(W.shape[0], rank))
    B = np.zeros((W.shape[1], rank))
    return LoraAdapter(W, A, B, scale)


def pissa_init(W, rank: int) -> PissaAdapter:
    """Principal singular triplets become A, B; the rest stays frozen."""
    W = as_matrix(W, "W")
    if not 1 <= rank <= min(W.shape):
        raise ArgumentError(f"rank {rank} outside [1, {min(W.shape)}]")
    U, S, Vt = svd(W)
    root = np.sqrt(S[:rank])
    A = U[:, :rank] * root
    B = Vt[:rank].T * root
    return PissaAdapter(W - A @ B.T, A, B)


def full_init(W) -> FullAdapter:
    return FullAdapter(W)
