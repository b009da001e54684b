"""Ancestral sampling with fused style guidance, and synthetic dataset generation."""
from __future__ import annotations

import logging
import os
from pathlib import Path
from typing import Sequence

import numpy as np

from ..combinator import GenerationBudget, StyleCombination, assemble_batch_conditions, balanced_class_counts, round_half_up
from ..dataio import TimeSeriesInstance, write_instances
from ..numerics.rng import RngStream
from ..style_encoder import StyleStore
from .guidance import EpsFn, combine_guidance, fused_epsilon
from .schedule import NoiseSchedule

log = logging.getLogger(__name__)

CLIP_RANGE = 6.0


class SamplingDivergedError(FloatingPointError):
    pass


def reverse_step(x_t: np.ndarray, t: int, eps_hat: np.ndarray, schedule: NoiseSchedule, rng: RngStream | None) -> np.ndarray:
    """One ancestral step x_t -> x_{t-1} with the fixed posterior variance; no noise at t = 1."""
    if not 1 <= t <= schedule.T:
        raise ValueError(f"reverse step needs 1 <= t <= {schedule.T}, got {t}")
    beta = float(schedule.beta(t))
    alpha = 1.0 - beta
    mean = (x_t - (beta / np.sqrt(1.0 - float(schedule.alpha_bar(t)))) * eps_hat) / np.sqrt(alpha)
    if t == 1:
        return mean
    sigma = np.sqrt(float(schedule.posterior_variance(t)))
    return mean + sigma * rng.standard_normal(np.shape(x_t))


def chain_rng(combination_id: str, seed: int) -> RngStream:
    return RngStream(f"diffusion/sample/{combination_id}", seed)


def sample(
    combination: StyleCombination,
    eps_fn: EpsFn,
    schedule: NoiseSchedule,
    omega: float,
    shape: tuple[int, int],
    seed: int,
    clip: bool = True,
    normalize: bool = False,
) -> TimeSeriesInstance:
    """Run one chain from x_T ~ N(0, I) down to x_0 under the combination's fused guidance."""
    rng = chain_rng(combination.combination_id, seed)
    styles = combination.matrix()
    x = rng.standard_normal(shape)
    for t in range(schedule.T, 0, -1):
        eps = fused_epsilon(eps_fn, x, t, styles, omega, normalize)
        x = reverse_step(x, t, eps, schedule, rng)
        if clip:
            np.clip(x, -CLIP_RANGE, CLIP_RANGE, out=x)
        if not np.all(np.isfinite(x)):
            raise SamplingDivergedError(f"non-finite sample for {combination.combination_id} at step t={t}")
    return _as_instance(x, combination)


def _as_instance(x: np.ndarray, comb: StyleCombination) -> TimeSeriesInstance:
    return TimeSeriesInstance(
        values=x, class_label=comb.class_label, domain_tag="synthetic", origin_flag=0, instance_id=f"syn-{comb.combination_id}"
    )


def sample_batch(
    combinations: Sequence[StyleCombination],
    eps_fn: EpsFn,
    schedule: NoiseSchedule,
    omega: float,
    shape: tuple[int, int],
    seed: int,
    clip: bool = True,
    normalize: bool = False,
    max_rows: int = 512,
) -> list[TimeSeriesInstance]:
    """Run many chains in lockstep, packing every chain's ``[unconditional, members...]`` rows into
    shared denoiser calls. Each chain draws from its own stream keyed by its combination id."""
    if not combinations:
        return []
    rngs = [chain_rng(c.combination_id, seed) for c in combinations]
    styles = [c.matrix() for c in combinations]
    H = styles[0].shape[1]
    x = np.stack([r.standard_normal(shape) for r in rngs])
    # rows per chain: one unconditional plus one per member
    sizes = np.array([len(s) + 1 for s in styles])
    cond_rows = np.concatenate([np.concatenate([np.zeros((1, H)), s]) for s in styles])
    chain_of_row = np.repeat(np.arange(len(combinations)), sizes)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    chunks = _row_chunks(sizes, max_rows)
    for t in range(schedule.T, 0, -1):
        out = np.empty((len(cond_rows),) + shape)
        for lo, hi in chunks:
            rows = slice(offsets[lo], offsets[hi])
            out[rows] = eps_fn(x[chain_of_row[rows]], np.full(offsets[hi] - offsets[lo], t), cond_rows[rows])
        for i in range(len(combinations)):
            block = out[offsets[i] : offsets[i + 1]]
            eps = combine_guidance(block[0], block[1:], omega, normalize)
            x[i] = reverse_step(x[i], t, eps, schedule, rngs[i])
        if clip:
            np.clip(x, -CLIP_RANGE, CLIP_RANGE, out=x)
        bad = ~np.all(np.isfinite(x.reshape(len(x), -1)), axis=1)
        if bad.any():
            cid = combinations[int(np.argmax(bad))].combination_id
            raise SamplingDivergedError(f"non-finite sample for {cid} at step t={t}")
    return [_as_instance(x[i], c) for i, c in enumerate(combinations)]


def _row_chunks(sizes: np.ndarray, max_rows: int) -> list[tuple[int, int]]:
    """Group consecutive chains so that each denoiser call sees at most ``max_rows`` rows."""
    chunks, lo, acc = [], 0, 0
    for i, s in enumerate(sizes):
        if acc and acc + s > max_rows:
            chunks.append((lo, i))
            lo, acc = i, 0
        acc += s
    chunks.append((lo, len(sizes)))
    return chunks


def plan_generation(store: StyleStore, budget: GenerationBudget, n_original: int, seed: int) -> list[StyleCombination]:
    """Draw round(kappa * n_original) class-balanced combinations for the whole synthetic split."""
    total = round_half_up(budget.kappa * n_original)
    classes = [c for c in range(store.n_classes) if store.bucket(c)]
    if not classes:
        raise ValueError("style store is empty")
    rng = RngStream("diffusion/combinations", seed)
    return assemble_batch_conditions(store, balanced_class_counts(total, classes), budget, rng, tag="g")


def generate_dataset(
    store: StyleStore,
    budget: GenerationBudget,
    eps_fn: EpsFn,
    schedule: NoiseSchedule,
    omega: float,
    shape: tuple[int, int],
    n_original: int,
    seed: int,
    out_stem: str | os.PathLike | None = None,
    clip: bool = True,
    normalize: bool = False,
    batch_size: int = 64,
) -> list[TimeSeriesInstance]:
    """Sample the whole synthetic split once; optionally persist it as ``<out_stem>.di2s/.csv``."""
    combos = plan_generation(store, budget, n_original, seed)
    synth = []
    for start in range(0, len(combos), batch_size):
        synth += sample_batch(combos[start : start + batch_size], eps_fn, schedule, omega, shape, seed, clip, normalize)
        log.info("stage=generate done=%d/%d", len(synth), len(combos))
    if out_stem is not None:
        write_instances(Path(out_stem), synth)
    return synth
