"""Deterministic teacher-student fine-tuning harness.

A synthetic task pairs a frozen "pretrained" weight ``W0`` with a target
``W_star = W0 + delta``. Adapters start at ``W0`` and are trained by
gradient descent on the mean squared error of ``W @ inputs`` against
``W_star @ inputs``.

Task construction
-----------------
With balanced factors from :func:`choose_shape` and ``s = kp_rank_star``:

* ``W0 = g * (sum_k s_k kron(A_k, P_k) + tail)`` where the ``vec(A_k)`` and
  ``vec(P_k)`` are orthonormal, ``s_k`` decays slowly from 1 and ``tail`` is
  a small block whose rearrangement is orthogonal to both factor sets;
* ``delta = g * (sum_k c_k kron(A_k, B_k) + noise)`` reuses the left factors
  of the dominant pretrained components, so on noiseless tasks the update
  stays inside what an ``s``-term Kronecker adapter started at ``W0`` can
  express. ``noise`` has Frobenius norm ``noise_eps`` relative to the clean
  part;
* ``g = sqrt(rows)`` and inputs are standard normal, so the initial MSE is
  about one regardless of size.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .adapters import (Adapter, full_init, kron_random_init, lora_init, pissa_init,
                       soka_init)
from .errors import ArgumentError
from .rank import RankPolicy
from .tensor import KronShape, choose_shape, unrearrange

log = logging.getLogger(__name__)

METHODS = ("soka", "lora", "pissa", "full", "kron_random")
DEFAULT_METHODS = ("soka", "lora", "pissa", "full")

DEFAULT_STEPS = 2000
DEFAULT_LR = 0.1

PRETRAINED_TAIL = 0.05
SAMPLES_PER_INPUT = 4


@dataclass(frozen=True)
class SyntheticTask:
    W0: np.ndarray
    W_star: np.ndarray
    inputs: np.ndarray
    targets: np.ndarray
    shape: KronShape
    kp_rank_star: int
    noise_eps: float
    seed: int

    @property
    def delta(self) -> np.ndarray:
        return self.W_star - self.W0

    @property
    def task_id(self) -> str:
        rows, cols = self.W0.shape
        return f"{rows}x{cols}_r{self.kp_rank_star}_eps{self.noise_eps:g}_s{self.seed}"


@dataclass(frozen=True)
class TrainConfig:
    steps: int = DEFAULT_STEPS
    learning_rate: float = DEFAULT_LR
    batch_size: int | None = None       # None: full batch
    momentum: float = 0.0               # 0: plain gradient descent
    seed: int = 0
    lora_rank: int | None = None        # None: match SoKA's parameter budget

    def __post_init__(self):
        if not isinstance(self.steps, (int, np.integer)) or self.steps < 1:
            raise ArgumentError(f"steps must be >= 1, got {self.steps!r}")
        if not self.learning_rate > 0:
            raise ArgumentError(f"learning_rate must be positive, got {self.learning_rate!r}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ArgumentError(f"batch_size must be >= 1, got {self.batch_size!r}")
        if not 0.0 <= self.momentum < 1.0:
            raise ArgumentError(f"momentum must lie in [0, 1), got {self.momentum!r}")


@dataclass
class TrainLog:
    method: str
    task_id: str
    steps: int
    step: list[int] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    grad_norm: list[float] = field(default_factory=list)
    failed: bool = False
    failed_step: int | None = None
    trainable_params: int = 0
    rank: int = 0
    adapter: Adapter | None = field(default=None, repr=False, compare=False)

    def append(self, step: int, loss: float, grad_norm: float) -> None:
        self.step.append(step)
        self.loss.append(loss)
        self.grad_norm.append(grad_norm)


def _orthonormal(rng, dim: int, k: int) -> np.ndarray:
    Q, R = np.linalg.qr(rng.standard_normal((dim, k)))
    return Q * np.where(np.diag(R) < 0, -1.0, 1.0)


def make_task(dims, kp_rank_star: int, noise_eps: float = 0.0, seed: int = 0,
              n_samples: int | None = None) -> SyntheticTask:
    """Build a reproducible teacher-student task; see the module docstring."""
    rows, cols = (int(d) for d in dims)
    shape = choose_shape(rows, cols)
    m, n, p, q = shape.as_tuple()
    if min(m, n, p, q) < 2:
        raise ArgumentError(f"dims {rows}x{cols} do not factor into nontrivial Kronecker blocks")
    s = int(kp_rank_star)
    if not 1 <= s < min(m * n, p * q) // 2:
        raise ArgumentError(f"kp_rank_star={kp_rank_star} too large for factors {shape.as_tuple()}")
    if noise_eps < 0:
        raise ArgumentError(f"noise_eps must be nonnegative, got {noise_eps}")

    rng = np.random.default_rng(seed)
    A = _orthonormal(rng, m * n, s)
    PB = _orthonormal(rng, p * q, 2 * s)
    P, B = PB[:, :s], PB[:, s:]
    strengths = 1.0 - 0.1 * np.arange(s)
    coeffs = 1.0 - 0.1 * np.arange(s)

    # pretrained tail, rearrangement orthogonal to span(A) and span(P)
    T = rng.standard_normal((m * n, p * q))
    T -= A @ (A.T @ T)
    T -= (T @ P) @ P.T
    T *= PRETRAINED_TAIL / np.linalg.norm(T)

    g = np.sqrt(rows)
    W0 = g * unrearrange((A * strengths) @ P.T + T, shape)
    clean = (A * coeffs) @ B.T
    noise = rng.standard_normal(clean.shape)
    noise *= noise_eps * np.linalg.norm(clean) / np.linalg.norm(noise)
    delta = g * unrearrange(clean / np.linalg.norm(clean) + noise / np.linalg.norm(clean), shape)
    W_star = W0 + delta

    n_samples = SAMPLES_PER_INPUT * cols if n_samples is None else int(n_samples)
    inputs = rng.standard_normal((cols, n_samples))
    targets = W_star @ inputs
    return SyntheticTask(W0, W_star, inputs, targets, shape, s, float(noise_eps), int(seed))


def default_battery() -> list[SyntheticTask]:
    """3 seeds x 3 shapes x {noiseless, eps=0.01}; seed k uses KP-rank k+1."""
    tasks = []
    for dims in ((16, 16), (64, 64), (60, 84)):
        for eps in (0.0, 0.01):
            for seed in range(3):
                tasks.append(make_task(dims, seed + 1, eps, seed))
    return tasks


def build_adapter(task: SyntheticTask, method: str, policy: RankPolicy | None = None,
                  config: TrainConfig | None = None) -> Adapter:
    """Initialize ``method`` at ``task.W0``.

    Low-rank baselines use ``config.lora_rank`` or, by default, the smallest
    rank whose parameter count reaches SoKA's. The random Kronecker ablation
    uses SoKA's selected rank.
    """
    config = TrainConfig() if config is None else config
    W0 = task.W0
    if method == "full":
        return full_init(W0)
    soka = soka_init(W0, task.shape, policy)
    if method == "soka":
        return soka
    if method == "kron_random":
        return kron_random_init(W0, task.shape, soka.rank, seed=config.seed)
    if method in ("lora", "pissa"):
        r = config.lora_rank
        if r is None:
            budget = soka.cost_report().trainable_params
            r = -(-budget // sum(W0.shape))
        r = max(1, min(r, min(W0.shape)))
        return lora_init(W0, r, seed=config.seed) if method == "lora" else pissa_init(W0, r)
    raise ArgumentError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")


def mse(adapter: Adapter, X: np.ndarray, T: np.ndarray):
    """Mean squared error over all entries and its output gradient."""
    # overflow is expected on divergent runs and is reported by train()
    with np.errstate(over="ignore", invalid="ignore"):
        R = adapter.forward(X) - T
        loss = float(np.mean(R * R))
    return loss, (2.0 / R.size) * R


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def train(task: SyntheticTask, method: str, policy: RankPolicy | None = None,
          config: TrainConfig | None = None, adapter: Adapter | None = None) -> TrainLog:
    """Run gradient descent and log loss and gradient norm at every step.

    Record ``k`` holds the loss and gradient norm at the parameters before
    the k-th update, so record 0 is the initialization. A non-finite loss or
    gradient marks the run failed at that step and stops it.
    """
    config = TrainConfig() if config is None else config
    if adapter is None:
        adapter = build_adapter(task, method, policy, config)
    out = TrainLog(method, task.task_id, int(config.steps),
                   trainable_params=adapter.num_trainable(),
                   rank=int(getattr(adapter, "rank", 0)), adapter=adapter)
    X_all, T_all = task.inputs, task.targets
    n_samples = X_all.shape[1]
    batch = n_samples if config.batch_size is None else min(config.batch_size, n_samples)
    rng = np.random.default_rng(config.seed)
    velocity = {k: np.zeros_like(v) for k, v in adapter.parameters().items()}

    for step in range(config.steps):
        if batch == n_samples:
            X, T = X_all, T_all
        else:
            idx = rng.choice(n_samples, size=batch, replace=False)
            X, T = X_all[:, idx], T_all[:, idx]
        loss, G = mse(adapter, X, T)
        grads, _ = adapter.backward(X, G)
        gnorm = global_norm(grads)
        out.append(step, loss, gnorm)
        if not (np.isfinite(loss) and np.isfinite(gnorm)):
            out.failed, out.failed_step = True, step
            log.warning("%s on %s diverged at step %d", method, task.task_id, step)
            break
        deltas = {}
        for k, g in grads.items():
            if config.momentum:
                velocity[k] = config.momentum * velocity[k] + g
                g = velocity[k]
            deltas[k] = -config.learning_rate * g
        adapter.apply_delta(deltas)

    if method in ("soka", "kron_random"):
        log.debug("%s on %s: factor norm drift %.3g", method, task.task_id,
                  adapter.factor_norm_drift())
    return out


@dataclass(frozen=True)
class MethodSummary:
    method: str
    steps_run: int
    failed: bool
    trainable_params: int
    loss_q0: float
    loss_q25: float
    loss_q50: float
    loss_q75: float
    loss_q100: float
    auc: float
    max_grad_norm: float
    delta_auc: float
    delta_final_loss: float


@dataclass(frozen=True)
class ComparisonReport:
    task_id: str
    steps: int
    reference: str
    methods: tuple[MethodSummary, ...]

    def by_method(self) -> dict[str, MethodSummary]:
        return {s.method: s for s in self.methods}


QUANTILES = (0.0, 0.25, 0.5, 0.75, 1.0)


def _loss_at_quantiles(loss: list[float], steps: int) -> list[float]:
    out = []
    for qt in QUANTILES:
        k = int(round(qt * (steps - 1)))
        out.append(loss[k] if k < len(loss) else float("nan"))
    return out


def _auc(loss: list[float]) -> float:
    y = np.asarray(loss)
    if y.size < 2:
        return float(y.sum()) if y.size else float("nan")
    return float(np.sum((y[1:] + y[:-1]) * 0.5))


def compare_runs(logs: list[TrainLog], reference: str | None = None) -> ComparisonReport:
    """Summarize runs over one task.

    For each run: the loss at the 0/25/50/75/100% points of the planned
    steps, the trapezoidal area under the loss curve, the largest gradient
    norm, and AUC/final-loss differences against the reference run (the
    first log unless ``reference`` names a method).
    """
    if not logs:
        raise ArgumentError("no logs to compare")
    steps = {lg.steps for lg in logs}
    if len(steps) != 1:
        raise ArgumentError(f"logs disagree on step count: {sorted(steps)}")
    tasks = {lg.task_id for lg in logs}
    if len(tasks) != 1:
        raise ArgumentError(f"logs come from different tasks: {sorted(tasks)}")
    steps = steps.pop()
    ref = logs[0] if reference is None else next(
        (lg for lg in logs if lg.method == reference), None)
    if ref is None:
        raise ArgumentError(f"reference method {reference!r} not among logs")
    ref_auc = _auc(ref.loss)
    ref_final = ref.loss[-1]
    rows = []
    for lg in logs:
        qs = _loss_at_quantiles(lg.loss, steps)
        auc = _auc(lg.loss)
        rows.append(MethodSummary(
            method=lg.method,
            steps_run=len(lg.loss),
            failed=lg.failed,
            trainable_params=lg.trainable_params,
            loss_q0=qs[0], loss_q25=qs[1], loss_q50=qs[2], loss_q75=qs[3], loss_q100=qs[4],
            auc=auc,
            max_grad_norm=float(max(lg.grad_norm)) if lg.grad_norm else float("nan"),
            delta_auc=auc - ref_auc,
            delta_final_loss=lg.loss[-1] - ref_final,
        ))
    return ComparisonReport(tasks.pop(), steps, ref.method, tuple(rows))
