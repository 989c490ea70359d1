"""Kronecker-product SVD adapters with spectrum-driven rank selection.

The pieces, bottom up:

* :mod:`kronadapt.tensor` - Kronecker product, column-major vec/unvec, the
  block rearrangement R(W) and a one-sided Jacobi SVD;
* :mod:`kronadapt.kpsvd` - nearest sum-of-Kronecker-products decomposition;
* :mod:`kronadapt.rank` - energy-threshold / elbow rank selection;
* :mod:`kronadapt.adapters` - SoKA, LoRA and PiSSA updates with manual
  gradients and cost accounting;
* :mod:`kronadapt.toybench` - deterministic teacher-student training;
* :mod:`kronadapt.model_io` - binary matrix container, checkpoints, reports.
"""

__version__ = "0.1.0"

from .adapters import (CostReport, FlopCounter, FullAdapter, LoraAdapter, PissaAdapter,
                       SokaAdapter, full_init, kron_matmat, kron_matvec, kron_random_init,
                       lora_init, lowrank_cost, pissa_init, soka_cost, soka_init)
from .kpsvd import KpsvdResult, KronTerm, approximation_error, kpsvd, reconstruct, truncate
from .rank import (RankDecision, RankPolicy, elbow_rank, energy_curve, energy_rank,
                   manual_decision, select_rank)
from .tensor import (KronShape, SvdResult, choose_shape, kron, rearrange, svd, unrearrange,
                     unvec, vec)

__all__ = [
    "CostReport", "FlopCounter", "FullAdapter", "KpsvdResult", "KronShape", "KronTerm",
    "LoraAdapter", "PissaAdapter", "RankDecision", "RankPolicy", "SokaAdapter", "SvdResult",
    "approximation_error", "choose_shape", "elbow_rank", "energy_curve", "energy_rank",
    "full_init", "kpsvd", "kron", "kron_matmat", "kron_matvec", "kron_random_init",
    "lora_init", "lowrank_cost", "manual_decision", "pissa_init", "rearrange", "reconstruct",
    "select_rank", "soka_cost", "soka_init", "svd", "truncate", "unrearrange", "unvec", "vec",
]
