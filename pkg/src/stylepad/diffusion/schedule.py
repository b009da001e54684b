from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    """Index 0 of every array corresponds to t = 1."""

    betas: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(1.0 - self.betas)

    def alpha_bar(self, t) -> np.ndarray:
        """Cumulative product at step t; t = 0 gives 1 by convention."""
        t = np.asarray(t)
        ab = np.concatenate([[1.0], self.alpha_bars])
        return ab[t]

    def beta(self, t) -> np.ndarray:
        return self.betas[np.asarray(t) - 1]

    def posterior_variance(self, t) -> np.ndarray:
        """beta_t (1 - abar_{t-1}) / (1 - abar_t)."""
        t = np.asarray(t)
        return self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t))


SHAPES = ("linear", "cosine")


def make_schedule(T: int = 100, beta_1: float = 1e-3, beta_T: float = 0.2, shape: str = "linear") -> NoiseSchedule:
    """Variance schedule over T steps.

    ``linear`` interpolates ``beta_1`` .. ``beta_T``; the defaults are the 1000-step DDPM
    range (1e-4 .. 0.02) rescaled by 1000 / T, which keeps abar_T close to zero at T = 100.
    ``cosine`` uses the squared-cosine abar curve and treats ``beta_T`` as the per-step cap.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    if not (0.0 < beta_1 <= beta_T < 1.0):
        raise ValueError(f"need 0 < beta_1 <= beta_T < 1, got {beta_1}, {beta_T}")
    if shape == "linear":
        betas = np.linspace(beta_1, beta_T, T) if T > 1 else np.array([beta_1])
    elif shape == "cosine":
        betas = cosine_betas(T, max_beta=beta_T)
    else:
        raise ValueError(f"unknown schedule shape {shape!r}; choose from {SHAPES}")
    return NoiseSchedule(betas=betas)


def cosine_betas(T: int, offset: float = 0.008, max_beta: float = 0.999) -> np.ndarray:
    """beta_t = 1 - abar(t) / abar(t-1) with abar(t) = cos^2(((t/T + s) / (1 + s)) * pi / 2)."""
    steps = np.arange(T + 1) / T
    f = np.cos((steps + offset) / (1 + offset) * np.pi / 2) ** 2
    abar = f / f[0]
    return np.clip(1.0 - abar[1:] / abar[:-1], 1e-8, max_beta)


def scaled_linear_schedule(T: int) -> NoiseSchedule:
    scale = 1000.0 / T
    return make_schedule(T, 1e-4 * scale, min(0.02 * scale, 0.999), "linear")


def forward_diffuse(x0: np.ndarray, t, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Closed-form q(x_t | x_0): sqrt(abar_t) x0 + sqrt(1 - abar_t) eps. ``t`` is a scalar or per-row array."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != x0.shape:
        raise ValueError(f"noise shape {eps.shape} does not match x0 shape {x0.shape}")
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > schedule.T):
        raise ValueError(f"t must be in [1, {schedule.T}]")
    ab = schedule.alpha_bar(t)
    if ab.ndim:
        ab = ab.reshape(ab.shape + (1,) * (x0.ndim - ab.ndim))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
