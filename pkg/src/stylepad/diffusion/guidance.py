"""Classifier-free guidance for one style and for a fused style combination.

Both entry points stack ``[unconditional, style_1, ..., style_m]`` into one
denoiser batch, so a singleton fusion and single-style guidance run the exact
same arithmetic.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..numerics.tensor import Tensor, no_grad

# eps_fn(x [N, K, L], t [N], styles [N, H]) -> [N, K, L]
EpsFn = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


def model_eps_fn(model) -> EpsFn:
    def eps(x, t, styles):
        with no_grad():
            return model(Tensor(x), t, styles).data

    return eps


def raw_epsilons(eps_fn: EpsFn, x_t: np.ndarray, t: int, styles: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Evaluate the unconditional prediction and one conditional prediction per style row.

    x_t: [K, L]; styles: [m, H]. Returns (eps_uncond [K, L], eps_cond [m, K, L]).
    """
    styles = np.atleast_2d(np.asarray(styles, dtype=np.float64))
    m, H = styles.shape
    cond = np.concatenate([np.zeros((1, H)), styles], axis=0)
    xb = np.broadcast_to(x_t, (m + 1,) + x_t.shape)
    out = eps_fn(np.ascontiguousarray(xb), np.full(m + 1, t), cond)
    return out[0], out[1:]


def combine_guidance(eps_uncond: np.ndarray, eps_cond: np.ndarray, omega: float, normalize: bool = False) -> np.ndarray:
    """eps_u + omega * sum_s (eps_s - eps_u); ``normalize`` divides the sum by the member count."""
    delta = eps_cond[0] - eps_uncond
    for j in range(1, len(eps_cond)):
        delta = delta + (eps_cond[j] - eps_uncond)
    if normalize:
        delta = delta / len(eps_cond)
    return eps_uncond + omega * delta


def cfg_epsilon(eps_fn: EpsFn, x_t: np.ndarray, t: int, style: np.ndarray, omega: float) -> np.ndarray:
    eu, ec = raw_epsilons(eps_fn, x_t, t, np.asarray(style)[None, :])
    return combine_guidance(eu, ec, omega)


def fused_epsilon(
    eps_fn: EpsFn, x_t: np.ndarray, t: int, styles: Sequence[np.ndarray] | np.ndarray, omega: float, normalize: bool = False
) -> np.ndarray:
    """Guided noise for a style combination: exactly ``len(styles) + 1`` denoiser evaluations."""
    styles = np.asarray(styles, dtype=np.float64)
    if styles.ndim != 2 or styles.shape[0] == 0:
        raise ValueError("fused guidance needs a non-empty [m, H] style matrix")
    eu, ec = raw_epsilons(eps_fn, x_t, t, styles)
    return combine_guidance(eu, ec, omega, normalize)
