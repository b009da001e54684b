"""Analytic 1-D Gaussian toy for checking fused guidance end to end.

Each condition i has q(x0 | s_i) = N(mu_i, var) and the unconditional model is
q(x0) = N(mu_0, var). With a shared variance every diffused density stays
Gaussian with the same variance v_t = abar_t var + 1 - abar_t, so the composed
score at each level is exactly the score of the diffused product of experts

    q(x0 | s_1..s_m)  ∝  q(x0) * prod_i q(x0 | s_i) / q(x0)
                      =  N(mu_0 + sum_i (mu_i - mu_0), var).

Running the sampler with these exact noise predictions therefore targets that
Gaussian up to time-discretization error.
"""
from __future__ import annotations

import numpy as np

from stylepad.combinator import StyleCombination
from stylepad.style_encoder import StyleVector


def gaussian_eps_fn(schedule, means: dict[int, float], var: float):
    """Exact eps for q(x_t | s) where the style row's first entry is the condition id (0 = unconditional)."""

    def eps(x, t, styles):
        ab = schedule.alpha_bar(np.asarray(t)).reshape(-1, 1, 1)
        mu = np.array([means[int(round(s[0]))] for s in styles]).reshape(-1, 1, 1)
        v = ab * var + (1.0 - ab)
        return np.sqrt(1.0 - ab) * (x - np.sqrt(ab) * mu) / v

    return eps


def poe_moments(means: dict[int, float], members: list[int], var: float) -> tuple[float, float]:
    """Closed-form product-of-experts mean and variance for the chosen members."""
    prec0 = 1.0 / var
    prec = prec0 + sum(1.0 / var - prec0 for _ in members)
    mean = (prec0 * means[0] + sum(means[i] / var - prec0 * means[0] for i in members)) / prec
    return mean, 1.0 / prec


def combination(members: list[int], cid: str = "poe") -> StyleCombination:
    vecs = [StyleVector(np.array([float(i), 0.0]), 0, f"s{i}", "toy") for i in members]
    return StyleCombination(0, vecs, cid)
