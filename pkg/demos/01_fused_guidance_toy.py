"""
Fused guidance on a Gaussian toy
================================

Each condition is a known 1-D Gaussian, so the exact noise prediction is
available in closed form. Summing guidance deltas over several conditions
should then sample the product of experts, and we can check that numerically.
"""
import numpy as np

from stylepad.combinator import StyleCombination
from stylepad.diffusion import make_schedule, sample
from stylepad.style_encoder import StyleVector

# %%
# Conditions 1..3 plus the unconditional model (id 0), all with variance 0.25.
means = {0: 0.0, 1: 0.6, 2: -0.4, 3: 1.1}
var = 0.25
sched = make_schedule(1000, 1e-4, 0.02)


def eps_fn(x, t, styles):
    # the first entry of each style row says which Gaussian it is
    ab = sched.alpha_bar(np.asarray(t)).reshape(-1, 1, 1)
    mu = np.array([means[int(round(s[0]))] for s in styles]).reshape(-1, 1, 1)
    return np.sqrt(1 - ab) * (x - np.sqrt(ab) * mu) / (ab * var + 1 - ab)


def combo(ids):
    return StyleCombination(0, [StyleVector(np.array([float(i), 0.0]), 0, f"s{i}", "toy") for i in ids], "toy")


# %%
# With equal variances the product of experts has mean mu_0 + sum(mu_i - mu_0).
for ids in ([1], [1, 2], [1, 2, 3]):
    x = sample(combo(ids), eps_fn, sched, omega=1.0, shape=(1, 10_000), seed=0, clip=False).values
    target = sum(means[i] for i in ids)
    print(f"styles {ids}: sample mean {x.mean():+.3f} (expect {target:+.3f}), var {x.var():.3f} (expect {var})")

# %%
# With equal variances every guidance delta is constant in x, so raising omega
# moves the mean along the summed delta and leaves the variance alone.
x = sample(combo([1, 2]), eps_fn, sched, omega=2.0, shape=(1, 10_000), seed=0, clip=False).values
print(f"omega=2: mean {x.mean():+.3f}, var {x.var():.3f}")
