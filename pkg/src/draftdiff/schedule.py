"""Noise schedule tables and the single-step forward/reverse updates."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step constants of the noising chain, built in float64.

    Tables are indexed by timestep t in [1, T]; `alpha_bar(0)` is defined
    as 1 (the clean-data boundary).
    """

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray = field(repr=False)

    def _check_t(self, t: int) -> None:
        if not (1 <= t <= self.T):
            raise ValueError(f"timestep {t} out of range [1, {self.T}]")

    def alpha_bar_at(self, t: int) -> float:
        """Cumulative retention at t; t=0 is the identity boundary."""
        if t == 0:
            return 1.0
        self._check_t(t)
        return float(self.alpha_bar[t - 1])

    def ddim_timesteps(self, steps: int) -> list[int]:
        """Evenly spaced descending sub-sequence of [1, T] ending at stride."""
        if not (1 <= steps <= self.T):
            raise ValueError(f"DDIM steps {steps} out of range [1, {self.T}]")
        if self.T % steps != 0:
            raise ValueError(f"DDIM steps {steps} must divide T={self.T}")
        stride = self.T // steps
        return list(range(self.T, 0, -stride))


def build_linear(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta ramp inclusive of both endpoints."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"invalid beta range ({beta_start}, {beta_end})")
    if T == 1:
        beta = np.array([beta_start], dtype=np.float64)
    else:
        beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    alpha_bar_prev = np.concatenate(([1.0], alpha_bar[:-1]))
    sigma = np.sqrt(beta * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar))
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar, sigma=sigma)


def q_sample(x0: Tensor, t: int, eps: Tensor, s: NoiseSchedule) -> Tensor:
    """Forward-noise a clean sample straight to step t."""
    s._check_t(t)
    if x0.shape != eps.shape:
        raise ValueError(f"q_sample: x0 {x0.shape} vs eps {eps.shape}")
    ab = s.alpha_bar[t - 1]
    out = np.sqrt(ab) * x0.data.astype(np.float64) + np.sqrt(1.0 - ab) * eps.data
    return Tensor(out.astype(np.float32))


def ddpm_step(xt: Tensor, eps_hat: Tensor, t: int, z: Tensor, s: NoiseSchedule) -> Tensor:
    """One ancestral reverse step; caller passes z = 0 at t = 1."""
    s._check_t(t)
    if xt.shape != eps_hat.shape or xt.shape != z.shape:
        raise ValueError(
            f"ddpm_step: shapes {xt.shape}, {eps_hat.shape}, {z.shape} disagree"
        )
    beta = s.beta[t - 1]
    alpha = s.alpha[t - 1]
    ab = s.alpha_bar[t - 1]
    xt64 = xt.data.astype(np.float64)
    mu = (xt64 - eps_hat.data * (beta / np.sqrt(1.0 - ab))) / np.sqrt(alpha)
    out = mu + s.sigma[t - 1] * z.data
    return Tensor(out.astype(np.float32))


def ddim_step(xt: Tensor, eps_hat: Tensor, t: int, t_prev: int, s: NoiseSchedule) -> Tensor:
    """Deterministic reverse step from t to t_prev (t_prev = 0 returns x0-hat)."""
    s._check_t(t)
    if not (0 <= t_prev < t):
        raise ValueError(f"ddim_step: need 0 <= t_prev < t, got t_prev={t_prev}, t={t}")
    ab_t = s.alpha_bar[t - 1]
    ab_p = s.alpha_bar_at(t_prev)
    xt64 = xt.data.astype(np.float64)
    x0_hat = (xt64 - np.sqrt(1.0 - ab_t) * eps_hat.data) / np.sqrt(ab_t)
    out = np.sqrt(ab_p) * x0_hat + np.sqrt(1.0 - ab_p) * eps_hat.data
    return Tensor(out.astype(np.float32))


def eps_for_x0_clip(xt: Tensor, t: int, s: NoiseSchedule, lo: float, hi: float,
                    eps_hat: Tensor) -> Tensor:
    """Noise estimate consistent with clamping the implied x0 into [lo, hi].

    Keeps `ddim_step` a pure formula while letting samplers stabilize
    large guidance scales.
    """
    s._check_t(t)
    ab_t = s.alpha_bar[t - 1]
    x0_hat = (xt.data - np.sqrt(1.0 - ab_t) * eps_hat.data) / np.sqrt(ab_t)
    x0_hat = np.clip(x0_hat, lo, hi)
    eps = (xt.data - np.sqrt(ab_t) * x0_hat) / np.sqrt(1.0 - ab_t)
    return Tensor(eps.astype(np.float32))
