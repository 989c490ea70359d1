"""Parameter, multiply-add and wall-clock comparison of SoKA vs LoRA updates."""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass

import numpy as np

from .adapters import CostReport, FlopCounter, kron_matvec, lowrank_cost, soka_cost
from .kpsvd import KronTerm
from .tensor import KronShape


@dataclass(frozen=True)
class BenchResult:
    shape: KronShape
    rank: int
    lora_rank: int
    soka: CostReport
    lora: CostReport
    counted_soka_flops: int
    soka_seconds: float | None = None
    lora_seconds: float | None = None


def count_kron_flops(shape: KronShape, rank: int, seed: int = 0) -> int:
    """Multiply-adds actually issued by ``rank`` kron_matvec calls on one vector."""
    rng = np.random.default_rng(seed)
    m, n, p, q = shape.as_tuple()
    x = rng.standard_normal(n * q)
    counter = FlopCounter()
    term = KronTerm(1.0, rng.standard_normal((m, n)), rng.standard_normal((p, q)))
    for _ in range(rank):
        kron_matvec(term, x, counter)
    return counter.madds


def _median_seconds(fn, trials: int) -> float:
    fn()
    times = []
    for _ in range(trials):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def time_matvecs(shape: KronShape, rank: int, lora_rank: int, trials: int = 11,
                 seed: int = 0) -> tuple[float, float]:
    """Median seconds for one SoKA update matvec and one LoRA update matvec."""
    rng = np.random.default_rng(seed)
    m, n, p, q = shape.as_tuple()
    sigma = rng.standard_normal(rank)
    U = rng.standard_normal((rank, m, n))
    V = rng.standard_normal((rank, p, q))
    A = rng.standard_normal((shape.rows, lora_rank))
    B = rng.standard_normal((shape.cols, lora_rank))
    x = rng.standard_normal(shape.cols)
    X3 = x.reshape(n, q)

    def soka():
        VX = np.matmul(X3[None], V.transpose(0, 2, 1))      # (r, n, p) = (V X)^T
        Y = U @ VX                                          # (r, m, p)
        return np.tensordot(sigma, Y, axes=1).reshape(-1)

    def lora():
        return A @ (B.T @ x)

    return _median_seconds(soka, trials), _median_seconds(lora, trials)


def run_bench(shape: KronShape, rank: int, lora_rank: int | None = None, trials: int = 11,
              seed: int = 0) -> BenchResult:
    lora_rank = rank if lora_rank is None else lora_rank
    soka_s = lora_s = None
    if trials > 0:
        soka_s, lora_s = time_matvecs(shape, rank, lora_rank, trials, seed)
    return BenchResult(
        shape=shape,
        rank=rank,
        lora_rank=lora_rank,
        soka=soka_cost(shape, rank),
        lora=lowrank_cost(shape.rows, shape.cols, lora_rank),
        counted_soka_flops=count_kron_flops(shape, rank, seed),
        soka_seconds=soka_s,
        lora_seconds=lora_s,
    )
