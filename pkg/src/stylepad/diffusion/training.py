"""Denoiser training with condition dropout."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from ..numerics import functional as F
from ..numerics.optim import Adam
from ..numerics.rng import RngStream
from ..numerics.tensor import ShapeError, Tensor, reverse_gradient
from .schedule import NoiseSchedule, forward_diffuse
from .unet import Denoiser

log = logging.getLogger(__name__)


@dataclass
class GuidanceConfig:
    omega: float = 1.2
    drop_prob: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.drop_prob <= 1.0:
            raise ValueError(f"drop_prob must lie in [0, 1], got {self.drop_prob}")


@dataclass
class DiffusionTrainConfig:
    T: int = 100
    beta_1: float = 1e-3
    beta_T: float = 0.2
    lr: float = 2e-4
    batch_size: int = 64
    steps: int = 1500
    drop_prob: float = 0.5

    def to_dict(self) -> dict:
        return asdict(self)


class DiffusionDivergedError(FloatingPointError):
    pass


def diffusion_loss(model: Denoiser, x0: np.ndarray, styles: np.ndarray, t: np.ndarray, eps: np.ndarray, schedule: NoiseSchedule) -> Tensor:
    x_t = forward_diffuse(x0, t, eps, schedule)
    return F.mse_loss(model(Tensor(x_t), t, styles), Tensor(eps))


def training_step(
    model: Denoiser,
    opt: Adam,
    x0: np.ndarray,
    styles: np.ndarray,
    schedule: NoiseSchedule,
    drop_prob: float,
    rng: RngStream,
) -> float:
    """Sample t and noise per row, zero each row's style with probability ``drop_prob``, take one Adam step."""
    B = len(x0)
    styles = np.asarray(styles, dtype=np.float64)
    if styles.shape != (B, model.cfg.style_dim):
        raise ShapeError(f"style batch {styles.shape} does not match ({B}, {model.cfg.style_dim})")
    t = rng.integers(1, schedule.T + 1, size=B)
    eps = rng.standard_normal(x0.shape)
    keep = rng.random(B) >= drop_prob
    cond = styles * keep[:, None]
    opt.zero_grad()
    loss = diffusion_loss(model, x0, cond, t, eps, schedule)
    value = loss.item()
    if not np.isfinite(value):
        raise DiffusionDivergedError(f"diffusion loss became {value}")
    reverse_gradient(loss)
    opt.step()
    return value


def train_diffusion(
    model: Denoiser, x0: np.ndarray, styles: np.ndarray, schedule: NoiseSchedule, cfg: DiffusionTrainConfig, seed: int
) -> list[float]:
    """Minibatch training over (instance, own style) pairs; returns the per-step loss history."""
    N = len(x0)
    if N == 0:
        raise ValueError("diffusion training needs at least one instance")
    if len(styles) != N:
        raise ValueError(f"{len(styles)} styles for {N} instances")
    rng = RngStream("diffusion/train", seed)
    opt = Adam(model.named_parameters(), lr=cfg.lr)
    model.train()
    bs = min(cfg.batch_size, N)
    history: list[float] = []
    order = rng.permutation(N)
    pos = 0
    for step in range(1, cfg.steps + 1):
        if pos + bs > N:
            order, pos = rng.permutation(N), 0
        idx = order[pos : pos + bs]
        pos += bs
        history.append(training_step(model, opt, x0[idx], styles[idx], schedule, cfg.drop_prob, rng))
        log.debug("stage=diffusion step=%d loss=%.6f lr=%g", step, history[-1], opt.lr)
        if step % 100 == 0:
            log.info("stage=diffusion step=%d loss=%.6f lr=%g", step, float(np.mean(history[-100:])), opt.lr)
    model.eval()
    return history
