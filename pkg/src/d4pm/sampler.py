"""Joint posterior diffusion sampling over an EEG branch and an artifact branch.

A denoiser here is any callable ``eps(x_t, y, level, z) -> eps_hat`` acting
on (B, N) float arrays, where ``level`` is a :class:`ContinuousLevel`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .schedule import ContinuousLevel, NoiseSchedule, inference_level, sample_continuous_level

EpsFn = Callable[[np.ndarray, np.ndarray, ContinuousLevel, object], np.ndarray]


class SamplingError(RuntimeError):
    def __init__(self, step: int, what: str):
        super().__init__(f"non-finite {what} at step t={step}")
        self.step = step


@dataclass(frozen=True)
class SamplerConfig:
    lambda_dc: float = 0.5
    lambda_snr: float = 1.0
    share_eta: bool = True
    stochastic_level: bool = False
    # "standard" inverts x_t = √ᾱ x0 + √(1-ᾱ) ε on both branches; "as_printed"
    # uses the literal artifact-branch formula from the published listing.
    artifact_x0_formula: str = "standard"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.lambda_dc <= 1.0:
            raise ValueError(f"lambda_dc={self.lambda_dc} outside [0, 1]")
        if not self.lambda_snr > 0:
            raise ValueError("lambda_snr must be positive")
        if self.artifact_x0_formula not in ("standard", "as_printed"):
            raise ValueError(f"unknown artifact_x0_formula {self.artifact_x0_formula!r}")


@dataclass
class StepState:
    t: int
    x_t: np.ndarray
    x_t_art: np.ndarray
    x0_hat: np.ndarray
    x0_hat_art: np.ndarray
    residual: np.ndarray
    mu: np.ndarray
    mu_art: np.ndarray


def predict_x0(s: NoiseSchedule, t: int, x_t, eps_hat) -> np.ndarray:
    ab = s.alpha_bar_at(t)
    return (np.asarray(x_t) - np.sqrt(1.0 - ab) * np.asarray(eps_hat)) / np.sqrt(ab)


def predict_x0_as_printed(s: NoiseSchedule, t: int, x_t, eps_hat) -> np.ndarray:
    """(x_t - (1-α_t)/√(1-ᾱ_t) · ε̂) / √α_t, kept for comparison runs only."""
    a, ab = s.alpha_at(t), s.alpha_bar_at(t)
    return (np.asarray(x_t) - (1.0 - a) / np.sqrt(1.0 - ab) * np.asarray(eps_hat)) / np.sqrt(a)


def consistency_step(x0, x0p, y, cfg: SamplerConfig):
    """Split the measurement residual between the two branch estimates."""
    x0, x0p, y = np.asarray(x0), np.asarray(x0p), np.asarray(y)
    if not (x0.shape == x0p.shape and x0.shape[-1] == y.shape[-1]):
        raise ValueError("x0, x0' and y must share a length")
    r = y - (x0 + x0p * cfg.lambda_snr)
    return x0 + cfg.lambda_dc * r, x0p + (1.0 - cfg.lambda_dc) * r, r


def posterior_mean(s: NoiseSchedule, t: int, x0_hat, x_t) -> np.ndarray:
    ab, ab_prev = s.alpha_bar_at(t), s.alpha_bar_at(t - 1)
    c_x0 = s.beta_at(t) * np.sqrt(ab_prev) / (1.0 - ab)
    c_xt = (1.0 - ab_prev) * np.sqrt(s.alpha_at(t)) / (1.0 - ab)
    return c_x0 * np.asarray(x0_hat) + c_xt * np.asarray(x_t)


def _level(s, t, cfg, rng):
    return sample_continuous_level(s, t, rng) if cfg.stochastic_level else inference_level(s, t)


def _check(step, **arrays):
    for name, arr in arrays.items():
        if not np.all(np.isfinite(arr)):
            raise SamplingError(step, name)


def _as_batch(y):
    y = np.asarray(y, dtype=np.float64)
    return (y[None], True) if y.ndim == 1 else (y, False)


def joint_sample(eps_eeg: EpsFn, eps_art: EpsFn, y, z, s: NoiseSchedule, cfg: SamplerConfig,
                 rng: np.random.Generator | None = None, trace: Callable[[StepState], None] | None = None):
    """Run the coupled reverse chains; returns (clean estimate, artifact estimate).

    ``y`` may be one segment (N,) or a batch (B, N); every row gets its own
    chains. ``trace`` is called with the :class:`StepState` of every step.
    """
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    y, single = _as_batch(y)
    _check(s.T, y=y)
    x = rng.standard_normal(y.shape)
    xp = rng.standard_normal(y.shape)
    x0_hat = x0p_hat = None
    for t in range(s.T, 0, -1):
        if t > 1:
            eta = rng.standard_normal(y.shape)
            eta_art = eta if cfg.share_eta else rng.standard_normal(y.shape)
        else:
            eta = eta_art = np.zeros_like(y)
        level = _level(s, t, cfg, rng)
        x0 = predict_x0(s, t, x, eps_eeg(x, y, level, z))
        e_art = eps_art(xp, y, level, z)
        x0p = predict_x0_as_printed(s, t, xp, e_art) if cfg.artifact_x0_formula == "as_printed" \
            else predict_x0(s, t, xp, e_art)
        x0_hat, x0p_hat, r = consistency_step(x0, x0p, y, cfg)
        mu = posterior_mean(s, t, x0_hat, x)
        mu_art = posterior_mean(s, t, x0p_hat, xp)
        _check(t, x0_hat=x0_hat, x0_hat_art=x0p_hat, mu=mu, mu_art=mu_art)
        if trace is not None:
            trace(StepState(t, x, xp, x0_hat, x0p_hat, r, mu, mu_art))
        sigma = s.sigma_at(t)
        x = mu + sigma * eta
        xp = mu_art + sigma * eta_art
    if single:
        return x0_hat[0], x0p_hat[0]
    return x0_hat, x0p_hat


def single_branch_sample(eps_eeg: EpsFn, y, z, s: NoiseSchedule, cfg: SamplerConfig,
                         rng: np.random.Generator | None = None) -> np.ndarray:
    """Plain conditional reverse process on the EEG branch, no consistency step."""
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    y, single = _as_batch(y)
    _check(s.T, y=y)
    x = rng.standard_normal(y.shape)
    x0 = None
    for t in range(s.T, 0, -1):
        eta = rng.standard_normal(y.shape) if t > 1 else np.zeros_like(y)
        x0 = predict_x0(s, t, x, eps_eeg(x, y, _level(s, t, cfg, rng), z))
        mu = posterior_mean(s, t, x0, x)
        _check(t, x0_hat=x0, mu=mu)
        x = mu + s.sigma_at(t) * eta
    return x0[0] if single else x0
