"""Discrete noise schedules.

Arrays follow a 1-based timestep convention: ``alpha_bar`` has length T+1
with ``alpha_bar[0] == 1``; ``alpha``, ``beta`` and ``beta_tilde`` have
length T and entry ``t-1`` belongs to step ``t``. Use the accessor methods
rather than indexing by hand.
"""

from __future__ import annotations

import enum
import io
import math
from dataclasses import dataclass, field

import numpy as np

COSINE_BETA_MAX = 0.999


class ScheduleError(ValueError):
    pass


class ScheduleKind(str, enum.Enum):
    LINEAR = "linear"
    QUADRATIC = "quadratic"
    COSINE = "cosine"


@dataclass(frozen=True)
class ScheduleSpec:
    kind: ScheduleKind = ScheduleKind.COSINE
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    cosine_offset: float = 0.008

    def __post_init__(self):
        object.__setattr__(self, "kind", ScheduleKind(self.kind))
        if not isinstance(self.T, (int, np.integer)) or self.T < 1:
            raise ScheduleError(f"T must be a positive integer, got {self.T!r}")
        if self.kind is ScheduleKind.COSINE:
            if not self.cosine_offset > 0:
                raise ScheduleError("cosine_offset must be > 0")
        elif not (0.0 < self.beta_start <= self.beta_end < 1.0):
            raise ScheduleError(
                f"need 0 < beta_start <= beta_end < 1, got {self.beta_start}, {self.beta_end}"
            )

    def describe(self) -> str:
        if self.kind is ScheduleKind.COSINE:
            return f"cosine(T={self.T}, s={self.cosine_offset:g})"
        return f"{self.kind.value}(T={self.T}, beta={self.beta_start:g}..{self.beta_end:g})"


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    alpha: np.ndarray
    alpha_bar: np.ndarray
    beta: np.ndarray
    beta_tilde: np.ndarray
    spec: ScheduleSpec = field(default_factory=ScheduleSpec)

    @property
    def T(self) -> int:
        return len(self.alpha)

    def check_t(self, t: int, lo: int = 1) -> int:
        if not lo <= t <= self.T:
            raise ScheduleError(f"timestep {t} outside [{lo}, {self.T}] for {self.spec.describe()}")
        return int(t)

    def abar(self, t: int) -> float:
        """ᾱ_t for 0 <= t <= T."""
        return float(self.alpha_bar[self.check_t(t, lo=0)])

    def alpha_at(self, t: int) -> float:
        return float(self.alpha[self.check_t(t) - 1])

    def beta_at(self, t: int) -> float:
        return float(self.beta[self.check_t(t) - 1])

    def beta_tilde_at(self, t: int) -> float:
        return float(self.beta_tilde[self.check_t(t) - 1])

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("t,alpha,alpha_bar,beta,beta_tilde\n")
        for t in range(1, self.T + 1):
            row = (self.alpha[t - 1], self.alpha_bar[t], self.beta[t - 1], self.beta_tilde[t - 1])
            buf.write(f"{t}," + ",".join(f"{v:.17g}" for v in row) + "\n")
        return buf.getvalue()


def _cosine_betas(T: int, s: float) -> np.ndarray:
    u = np.arange(T + 1, dtype=np.float64) / T
    f = np.cos((u + s) / (1.0 + s) * math.pi / 2) ** 2
    abar = f / f[0]
    beta = 1.0 - abar[1:] / abar[:-1]
    return np.minimum(beta, COSINE_BETA_MAX)


def build_schedule(spec: ScheduleSpec) -> NoiseSchedule:
    T = spec.T
    if spec.kind is ScheduleKind.LINEAR:
        beta = np.linspace(spec.beta_start, spec.beta_end, T, dtype=np.float64)
    elif spec.kind is ScheduleKind.QUADRATIC:
        beta = np.linspace(math.sqrt(spec.beta_start), math.sqrt(spec.beta_end), T, dtype=np.float64) ** 2
    else:
        beta = _cosine_betas(T, spec.cosine_offset)

    if not np.all((beta > 0) & (beta < 1)):
        bad = int(np.flatnonzero(~((beta > 0) & (beta < 1)))[0]) + 1
        raise ScheduleError(f"{spec.describe()}: beta_{bad} = {beta[bad - 1]!r} outside (0, 1)")

    alpha = 1.0 - beta
    # sequential product so that alpha_bar[t] == alpha_bar[t-1] * alpha[t] bitwise
    alpha_bar = np.concatenate(([1.0], np.cumprod(alpha)))
    beta_tilde = np.zeros(T)
    if T > 1:
        beta_tilde[1:] = (1.0 - alpha_bar[1:-1]) / (1.0 - alpha_bar[2:]) * beta[1:]

    for arr in (alpha, alpha_bar, beta, beta_tilde):
        arr.setflags(write=False)
    return NoiseSchedule(alpha=alpha, alpha_bar=alpha_bar, beta=beta, beta_tilde=beta_tilde, spec=spec)


def sigma_t(sched: NoiseSchedule, t: int, eta: float) -> float:
    """Reverse-step noise scale with σ_t² = eta · β̃_t."""
    if eta < 0:
        raise ScheduleError(f"eta must be >= 0, got {eta}")
    return math.sqrt(eta * sched.beta_tilde_at(t))


def scaled_linear_spec(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> ScheduleSpec:
    """Linear schedule whose betas are rescaled by 1000/T, keeping ᾱ_T roughly fixed across T."""
    scale = 1000.0 / T
    return ScheduleSpec(ScheduleKind.LINEAR, T, beta_start * scale, min(beta_end * scale, 0.999))
