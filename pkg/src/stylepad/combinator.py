"""Same-class style combinations: counting, lexicographic enumeration and budgeted draws.

The combination space for a class is the power set of its style bucket minus the
empty set. It is never materialized; draws pick a fuse count first and then a
uniform subset of that size.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .numerics.rng import RngStream
from .style_encoder import StyleStore, StyleVector


@dataclass
class StyleCombination:
    class_label: int
    members: list[StyleVector]
    combination_id: str = ""

    def __post_init__(self):
        if not self.members:
            raise ValueError("a style combination needs at least one member")
        ids = [m.source_instance_id for m in self.members]
        if len(set(ids)) != len(ids):
            raise ValueError(f"style combination repeats a member: {ids}")
        for m in self.members:
            if m.class_label != self.class_label:
                raise ValueError(f"member of class {m.class_label} in a class-{self.class_label} combination")

    def __len__(self) -> int:
        return len(self.members)

    def matrix(self) -> np.ndarray:
        return np.stack([m.values for m in self.members])


@dataclass
class GenerationBudget:
    kappa: float = 1.0
    o: int = 5
    fuse_dist: list[float] = field(default_factory=list)

    def __post_init__(self):
        if self.kappa <= 0:
            raise ValueError(f"kappa must be > 0, got {self.kappa}")
        if self.o < 1:
            raise ValueError(f"o must be >= 1, got {self.o}")
        if not self.fuse_dist:
            self.fuse_dist = [1.0 / self.o] * self.o
        if len(self.fuse_dist) != self.o:
            raise ValueError(f"fuse_dist has {len(self.fuse_dist)} entries for o={self.o}")
        p = np.asarray(self.fuse_dist, dtype=float)
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError(f"fuse_dist must be non-negative and sum to 1, got {self.fuse_dist}")


def count_combinations(k: int, o: int) -> int:
    """Number of non-empty subsets of size <= o from k styles."""
    if k < 0 or o < 1:
        raise ValueError("need k >= 0 and o >= 1")
    return sum(math.comb(k, m) for m in range(1, min(o, k) + 1))


def enumerate_combinations(store: StyleStore, c: int, o: int, limit: int | None = None) -> list[StyleCombination]:
    """Lexicographic (by size, then index) enumeration of class ``c``'s combinations."""
    if limit is not None and limit < 1:
        raise ValueError("limit must be >= 1")
    bucket = store.bucket(c)
    out = []
    for m in range(1, min(o, len(bucket)) + 1):
        for idx in itertools.combinations(range(len(bucket)), m):
            out.append(StyleCombination(c, [bucket[i] for i in idx], f"c{c}-" + "-".join(map(str, idx))))
            if limit is not None and len(out) >= limit:
                return out
    return out


def truncated_fuse_probs(fuse_dist: Sequence[float], available: int) -> np.ndarray:
    p = np.asarray(fuse_dist[: max(0, available)], dtype=float)
    if p.size == 0 or p.sum() <= 0:
        raise ValueError("fuse distribution has no mass on feasible sizes")
    return p / p.sum()


def draw_combination(store: StyleStore, c: int, budget: GenerationBudget, rng: RngStream, combination_id: str = "") -> StyleCombination:
    bucket = store.bucket(c)
    if not bucket:
        raise ValueError(f"class {c} has no style vectors to combine")
    probs = truncated_fuse_probs(budget.fuse_dist, min(budget.o, len(bucket)))
    m = int(rng.choice(len(probs), p=probs)) + 1
    idx = np.sort(rng.choice(len(bucket), size=m, replace=False))
    return StyleCombination(c, [bucket[i] for i in idx], combination_id)


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def balanced_class_counts(total: int, classes: Sequence[int]) -> dict[int, int]:
    """Split ``total`` evenly over ``classes``; the remainder goes round-robin in class order."""
    classes = sorted(classes)
    base, rem = divmod(total, len(classes))
    return {c: base + (1 if i < rem else 0) for i, c in enumerate(classes)}


def assemble_batch_conditions(
    store: StyleStore, batch_class_counts: dict[int, int], budget: GenerationBudget, rng: RngStream, tag: str = "b"
) -> list[StyleCombination]:
    """Draw ``batch_class_counts[c]`` combinations of every requested class, in class order."""
    out = []
    for c in sorted(batch_class_counts):
        n = batch_class_counts[c]
        if n > 0 and not store.bucket(c):
            raise ValueError(f"class {c} requested but its style bucket is empty")
        for j in range(n):
            out.append(draw_combination(store, c, budget, rng, combination_id=f"{tag}-c{c}-{j}"))
    return out


def balanced_batch_counts(batch_size: int, kappa: float, classes: Sequence[int]) -> dict[int, int]:
    """Class-balanced allocation of ``round(kappa * batch_size)`` synthetic slots."""
    return balanced_class_counts(round_half_up(kappa * batch_size), classes)
