"""Spectrum-driven rank selection.

Two greedy criteria are combined and the smaller answer wins:

* energy threshold: smallest k whose cumulative squared-singular-value
  fraction reaches ``tau``;
* elbow: 1-based index of the largest successive gap sigma_i - sigma_{i+1}.

The result is then clamped into ``[r_min, r_max]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, DegenerateSpectrumError

# Values within this relative distance of a threshold/maximum count as ties,
# so decisions do not flip under rounding (e.g. when the spectrum is rescaled).
TIE_RTOL = 1e-12


@dataclass(frozen=True)
class RankPolicy:
    tau: float = 0.95
    r_min: int = 1
    r_max: int | None = None
    log_gaps: bool = False

    def __post_init__(self):
        if not (isinstance(self.tau, (int, float)) and 0.0 < self.tau < 1.0):
            raise ArgumentError(f"tau must lie in (0, 1), got {self.tau!r}")
        if not isinstance(self.r_min, (int, np.integer)) or self.r_min < 1:
            raise ArgumentError(f"r_min must be a positive integer, got {self.r_min!r}")
        if self.r_max is not None:
            if not isinstance(self.r_max, (int, np.integer)) or self.r_max < 1:
                raise ArgumentError(f"r_max must be a positive integer, got {self.r_max!r}")
            if self.r_min > self.r_max:
                raise ArgumentError(f"r_min={self.r_min} exceeds r_max={self.r_max}")


@dataclass(frozen=True)
class RankDecision:
    """Audit trail of one selection run.

    ``r_energy`` is 0 when the spectrum has no energy. ``mode`` is
    ``"auto"`` for :func:`select_rank` and ``"manual"`` when the caller
    overrode the rank.
    """

    spectrum: tuple[float, ...]
    energy_curve: tuple[float, ...]
    gaps: tuple[float, ...]
    r_energy: int
    r_elbow: int
    r_final: int
    clamped: bool
    policy: RankPolicy = field(default_factory=RankPolicy)
    mode: str = "auto"


def _as_spectrum(spectrum) -> np.ndarray:
    s = np.asarray(spectrum, dtype=np.float64).ravel()
    if s.size == 0:
        raise ArgumentError("spectrum is empty")
    if not np.all(np.isfinite(s)):
        raise ArgumentError("spectrum contains NaN or Inf")
    if np.any(s < 0):
        raise ArgumentError("spectrum has negative entries")
    if np.any(np.diff(s) > 0):
        raise ArgumentError("spectrum is not sorted nonincreasing")
    return s


def energy_curve(spectrum) -> np.ndarray:
    """Cumulative energy fractions E(1), ..., E(n); all zeros for a zero spectrum."""
    s = _as_spectrum(spectrum)
    c = np.cumsum(s * s)
    if c[-1] == 0:
        return np.zeros_like(c)
    return c / c[-1]


def energy_rank(spectrum, tau: float) -> int:
    """Smallest k with E(k) >= tau."""
    if not 0.0 < tau < 1.0:
        raise ArgumentError(f"tau must lie in (0, 1), got {tau!r}")
    s = _as_spectrum(spectrum)
    if not np.any(s > 0):
        raise DegenerateSpectrumError("all-zero spectrum has no energy")
    E = energy_curve(s)
    return int(np.argmax(E >= tau * (1.0 - TIE_RTOL))) + 1


def gaps(spectrum, log: bool = False) -> np.ndarray:
    s = _as_spectrum(spectrum)
    if log:
        s = np.log(np.maximum(s, np.finfo(np.float64).tiny))
    return s[:-1] - s[1:]


def elbow_rank(spectrum, log: bool = False) -> int:
    """1-based argmax of the successive gaps, ties to the smallest index.

    A length-1 spectrum has no gaps and returns 1.
    """
    d = gaps(spectrum, log=log)
    if d.size == 0:
        return 1
    top = d.max()
    return int(np.argmax(d >= top - TIE_RTOL * abs(top))) + 1


def select_rank(spectrum, policy: RankPolicy | None = None) -> RankDecision:
    """Working rank ``clamp(min(r_energy, r_elbow), r_min, r_max)``."""
    policy = RankPolicy() if policy is None else policy
    if not isinstance(policy, RankPolicy):
        raise ArgumentError(f"policy must be a RankPolicy, got {type(policy).__name__}")
    s = _as_spectrum(spectrum)
    if policy.r_min > s.size:
        raise ArgumentError(f"r_min={policy.r_min} exceeds spectrum length {s.size}")
    try:
        r_energy = energy_rank(s, policy.tau)
    except DegenerateSpectrumError:
        r_energy = 0
    r_elbow = elbow_rank(s, log=policy.log_gaps)
    raw = min(r_energy, r_elbow)
    hi = policy.r_max if policy.r_max is not None else math.inf
    r_final = int(max(policy.r_min, min(raw, hi)))
    return RankDecision(
        spectrum=tuple(float(v) for v in s),
        energy_curve=tuple(float(v) for v in energy_curve(s)),
        gaps=tuple(float(v) for v in gaps(s, log=policy.log_gaps)),
        r_energy=r_energy,
        r_elbow=r_elbow,
        r_final=r_final,
        clamped=r_final != raw,
        policy=policy,
    )


def manual_decision(spectrum, r: int, policy: RankPolicy | None = None) -> RankDecision:
    """Record a caller-chosen rank alongside the criteria it overrode."""
    auto = select_rank(spectrum, policy)
    if not 1 <= r <= len(auto.spectrum):
        raise ArgumentError(f"rank {r} outside [1, {len(auto.spectrum)}]")
    return RankDecision(
        spectrum=auto.spectrum,
        energy_curve=auto.energy_curve,
        gaps=auto.gaps,
        r_energy=auto.r_energy,
        r_elbow=auto.r_elbow,
        r_final=int(r),
        clamped=False,
        policy=auto.policy,
        mode="manual",
    )
