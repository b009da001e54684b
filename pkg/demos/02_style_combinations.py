"""
Counting and drawing style combinations
=======================================
"""
from collections import Counter

import numpy as np

from stylepad.combinator import GenerationBudget, count_combinations, draw_combination, enumerate_combinations
from stylepad.numerics import RngStream
from stylepad.style_encoder import StyleStore, StyleVector

# %%
# Three styles of one class give seven nonempty combinations.
store = StyleStore(1)
for i in range(3):
    store.add(StyleVector(np.full(4, float(i)), 0, f"S{i + 1}", "D1"))
print(count_combinations(3, 3))
for c in enumerate_combinations(store, 0, 3):
    print(" + ".join(m.source_instance_id for m in c.members))

# %%
# The space grows as 2^k - 1, which is why generation samples combinations
# instead of enumerating them.
for k in (5, 10, 20, 40):
    print(k, count_combinations(k, k), count_combinations(k, 5))

# %%
# With o=5 and a uniform fuse distribution every size from 1 to 5 is equally likely.
big = StyleStore(1)
for i in range(8):
    big.add(StyleVector(np.full(4, float(i)), 0, f"S{i + 1}", "D1"))
rng = RngStream("demo/fuse", 0)
sizes = Counter(len(draw_combination(big, 0, GenerationBudget(o=5), rng)) for _ in range(10_000))
print({m: sizes[m] / 10_000 for m in sorted(sizes)})
