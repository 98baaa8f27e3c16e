"""Forward-process variance schedules and their diagnostics.

Timesteps are 1-based: ``t`` ranges over ``1..T`` and ``alpha_bar(0) == 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from cheff.errors import ConfigError

DEFAULT_TERMINAL_THRESHOLD = 1e-5


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str
    betas: np.ndarray
    alpha_bars: np.ndarray

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        abar = np.asarray(self.alpha_bars, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1 or abar.shape != betas.shape:
            raise ValueError("betas and alpha_bars must be equal-length non-empty vectors")
        if not np.all((betas > 0) & (betas < 1)):
            raise ValueError("every beta must lie in (0, 1)")
        if not np.all((abar > 0) & (abar < 1)) or np.any(np.diff(abar) >= 0):
            raise ValueError("alpha_bars must be strictly decreasing inside (0, 1)")
        betas.setflags(write=False)
        abar.setflags(write=False)
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alpha_bars", abar)

    @classmethod
    def from_betas(cls, kind: str, betas) -> NoiseSchedule:
        betas = np.asarray(betas, dtype=np.float64)
        return cls(kind, betas, np.cumprod(1.0 - betas))

    @property
    def T(self) -> int:
        return int(self.betas.size)

    def _check(self, t):
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.T):
            raise ValueError(f"timestep out of range 0..{self.T}: {t}")
        return t

    def beta(self, t):
        """β_t for ``t`` in 1..T (scalar or integer array)."""
        t = self._check(t)
        if np.any(t < 1):
            raise ValueError("beta is defined for t >= 1")
        return self.betas[t - 1]

    def alpha_bar(self, t):
        """ᾱ_t for ``t`` in 0..T, with ᾱ_0 = 1."""
        t = self._check(t)
        padded = np.concatenate([[1.0], self.alpha_bars])
        return padded[t]

    def beta_tilde(self, t):
        """Posterior variance ((1-ᾱ_{t-1}) / (1-ᾱ_t)) β_t."""
        t = np.asarray(t)
        return (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t)) * self.beta(t)


def linear_schedule(beta_start: float, beta_end: float, T: int) -> NoiseSchedule:
    """Arithmetic β grid from ``beta_start`` to ``beta_end`` inclusive."""
    if not 0 < beta_start <= beta_end < 1:
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if int(T) != T or T < 1:
        raise ConfigError(f"T must be a positive integer, got {T}")
    return NoiseSchedule.from_betas("linear", np.linspace(beta_start, beta_end, int(T)))


def cosine_schedule(T: int, s: float = 0.008, max_beta: float = 0.999) -> NoiseSchedule:
    """Squared-cosine schedule; β clipped at ``max_beta`` and ᾱ rebuilt from β."""
    if int(T) != T or T < 1:
        raise ConfigError(f"T must be a positive integer, got {T}")
    t = np.arange(int(T) + 1, dtype=np.float64)
    f = np.cos(((t / T + s) / (1 + s)) * math.pi / 2) ** 2
    abar = f / f[0]
    betas = np.clip(1.0 - abar[1:] / abar[:-1], 1e-12, max_beta)
    return NoiseSchedule.from_betas("cosine", betas)


def make_schedule(kind: str, T: int, beta_start: float = 1e-4, beta_end: float = 0.0295,
                  cosine_s: float = 0.008) -> NoiseSchedule:
    if kind == "linear":
        return linear_schedule(beta_start, beta_end, T)
    if kind == "cosine":
        return cosine_schedule(T, cosine_s)
    raise ConfigError(f"unknown schedule kind {kind!r}")


@dataclass(frozen=True)
class TerminalDiagnostic:
    alpha_bar_T: float
    residual_signal: float
    threshold: float
    sufficient: bool


def terminal_diagnostic(s: NoiseSchedule, threshold: float = DEFAULT_TERMINAL_THRESHOLD) -> TerminalDiagnostic:
    """Check whether x_T is close enough to pure noise (ᾱ_T below ``threshold``)."""
    abar_T = float(s.alpha_bars[-1])
    return TerminalDiagnostic(abar_T, math.sqrt(abar_T), threshold, abar_T < threshold)


@dataclass(frozen=True)
class DdimPlan:
    subsequence: tuple[int, ...]
    eta: float = 0.0

    def __post_init__(self):
        seq = tuple(int(i) for i in self.subsequence)
        if not seq or seq[0] < 1 or any(b <= a for a, b in zip(seq, seq[1:])):
            raise ValueError(f"DDIM subsequence must be strictly increasing from >= 1: {seq}")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must lie in [0, 1], got {self.eta}")
        object.__setattr__(self, "subsequence", seq)

    @property
    def T(self) -> int:
        return self.subsequence[-1]

    def transitions(self) -> list[tuple[int, int]]:
        """``(t_from, t_to)`` pairs from T down to 0."""
        seq = self.subsequence
        return [(seq[i], seq[i - 1] if i > 0 else 0) for i in range(len(seq) - 1, -1, -1)]


def ddim_subsequence(T: int, steps: int, eta: float = 0.0) -> DdimPlan:
    """``steps`` evenly spaced timesteps ending at ``T`` (round half up)."""
    if not 1 <= steps <= T:
        raise ValueError(f"need 1 <= steps <= T, got steps={steps}, T={T}")
    idx = [(2 * k * T + steps) // (2 * steps) for k in range(1, steps + 1)]
    return DdimPlan(tuple(sorted(set(idx))), eta)
