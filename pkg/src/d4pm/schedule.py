"""Linear beta schedule and the continuous noise-level conditioning variable."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    """Tables for a T-step diffusion; index ``t - 1`` holds step ``t``."""

    T: int
    beta_start: float
    beta_end: float
    beta: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)
    alpha_bar: np.ndarray = field(repr=False)

    def _check_step(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ValueError(f"step t={t} outside [1, {self.T}]")

    def alpha_bar_at(self, t: int) -> float:
        """ᾱ_t with the convention ᾱ_0 = 1."""
        if t == 0:
            return 1.0
        self._check_step(t)
        return float(self.alpha_bar[t - 1])

    def beta_at(self, t: int) -> float:
        self._check_step(t)
        return float(self.beta[t - 1])

    def alpha_at(self, t: int) -> float:
        self._check_step(t)
        return float(self.alpha[t - 1])

    def sigma_at(self, t: int) -> float:
        """Reverse-step std using the posterior variance β_t(1-ᾱ_{t-1})/(1-ᾱ_t)."""
        ab, ab_prev = self.alpha_bar_at(t), self.alpha_bar_at(t - 1)
        return float(np.sqrt(self.beta_at(t) * (1.0 - ab_prev) / (1.0 - ab)))

    def to_dict(self) -> dict:
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        return make_schedule(int(d["T"]), float(d["beta_start"]), float(d["beta_end"]))


@dataclass(frozen=True)
class ContinuousLevel:
    """Conditioning scalar fed to the denoiser, tagged with the step it belongs to."""

    value: float
    step: int


def make_schedule(T: int = 50, beta_start: float = 1e-4, beta_end: float = 0.2) -> NoiseSchedule:
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T}")
    if not (0.0 < beta_start < 1.0 and 0.0 < beta_end < 1.0):
        raise ValueError("beta bounds must lie in (0, 1)")
    if beta_start > beta_end:
        raise ValueError(f"beta_start={beta_start} exceeds beta_end={beta_end}")
    T = int(T)
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    if not (alpha_bar[-1] > 0 and np.all(np.diff(alpha_bar) < 0)):
        raise ValueError(f"alpha_bar underflows in float64 for T={T}, beta_end={beta_end}")
    for arr in (beta, alpha, alpha_bar):
        arr.setflags(write=False)
    return NoiseSchedule(T, float(beta_start), float(beta_end), beta, alpha, alpha_bar)


def sample_continuous_level(s: NoiseSchedule, t: int, rng: np.random.Generator) -> ContinuousLevel:
    """Draw √ᾱ* uniformly between √ᾱ_t and √ᾱ_{t-1}."""
    s._check_step(t)
    lo = np.sqrt(s.alpha_bar_at(t))
    hi = np.sqrt(s.alpha_bar_at(t - 1))
    return ContinuousLevel(float(rng.uniform(lo, hi)), t)


def sample_continuous_levels(s: NoiseSchedule, t: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Vectorized form of :func:`sample_continuous_level` for an array of steps."""
    t = np.asarray(t)
    if t.size and (t.min() < 1 or t.max() > s.T):
        raise ValueError(f"steps outside [1, {s.T}]")
    ab_prev = np.concatenate([[1.0], s.alpha_bar])
    lo = np.sqrt(ab_prev[t])
    hi = np.sqrt(ab_prev[t - 1])
    return rng.uniform(lo, hi)


def inference_level(s: NoiseSchedule, t: int) -> ContinuousLevel:
    s._check_step(t)
    return ContinuousLevel(float(np.sqrt(s.alpha_bar_at(t))), t)
