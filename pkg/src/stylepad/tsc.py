"""Downstream classifier trained on original plus synthetic windows with three-step diversity learning.

A shared feature extractor feeds three (projection, classifier) head pairs:
class-origin (2C-way), origin-specific (binary) and class-specific (C-way). Each
training step updates the extractor and exactly one head pair; inference only
uses the class-specific pair.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Protocol, Sequence

import numpy as np

from .dataio import TimeSeriesInstance, labels_of, stack_values
from .numerics import functional as F
from .numerics.layers import BatchNorm1d, Conv1d, Linear, Module
from .numerics.optim import Adam, step_decay
from .numerics.rng import RngStream
from .numerics.tensor import ShapeError, Tensor, no_grad, relu, reverse_gradient

log = logging.getLogger(__name__)

HEAD_GROUPS = ("class_origin", "origin", "class")


def encode_labels(y_c, y_o, n_classes: int) -> np.ndarray:
    """Combined class-origin label y_c + y_o * C."""
    y_c = np.asarray(y_c)
    y_o = np.asarray(y_o)
    if n_classes < 1:
        raise ValueError("n_classes must be >= 1")
    if np.any((y_c < 0) | (y_c >= n_classes)):
        raise ValueError(f"class labels must lie in [0, {n_classes})")
    if np.any((y_o != 0) & (y_o != 1)):
        raise ValueError("origin labels must be 0 or 1")
    return y_c + y_o * n_classes


def decode_labels(y_co, n_classes: int) -> tuple[np.ndarray, np.ndarray]:
    y_co = np.asarray(y_co)
    if np.any((y_co < 0) | (y_co >= 2 * n_classes)):
        raise ValueError(f"combined labels must lie in [0, {2 * n_classes})")
    return y_co % n_classes, y_co // n_classes


@dataclass
class TSCConfig:
    n_blocks: int = 2
    epochs: int = 30
    lr: float = 1e-3
    batch_size: int = 64
    lr_step: int = 10
    lr_gamma: float = 0.5

    @property
    def kernel(self) -> int:
        return 9 if self.n_blocks == 2 else 6

    @property
    def channels(self) -> tuple[int, ...]:
        return (16, 32) if self.n_blocks == 2 else (16, 32, 64)

    @property
    def proj_dim(self) -> int:
        return 64 if self.n_blocks == 2 else 128

    def to_dict(self) -> dict:
        return asdict(self)


class FeatureBlock(Module):
    """conv -> ReLU -> maxpool(2) -> batchnorm."""

    def __init__(self, c_in: int, c_out: int, kernel: int, rng):
        super().__init__()
        self.conv = Conv1d(c_in, c_out, kernel, rng, padding=kernel // 2)
        self.bn = BatchNorm1d(c_out)

    def forward(self, x: Tensor) -> Tensor:
        return self.bn(F.max_pool1d(relu(self.conv(x)), 2))


class FeatureExtractor(Module):
    def __init__(self, n_channels: int, window_len: int, cfg: TSCConfig, rng):
        super().__init__()
        chans = (n_channels,) + cfg.channels
        self.blocks = [FeatureBlock(a, b, cfg.kernel, rng) for a, b in zip(chans[:-1], chans[1:])]
        L = window_len
        for _ in self.blocks:
            L = (L + 2 * (cfg.kernel // 2) - cfg.kernel + 1) // 2
        if L < 1:
            raise ShapeError(f"window length {window_len} is too short for {cfg.n_blocks} blocks")
        self.out_dim = chans[-1] * L

    def forward(self, x: Tensor) -> Tensor:
        for b in self.blocks:
            x = b(x)
        return x.reshape(x.shape[0], -1)


class Head(Module):
    """Projection to Z (with ReLU) followed by a linear classifier."""

    def __init__(self, n_in: int, z: int, n_out: int, rng):
        super().__init__()
        self.proj = Linear(n_in, z, rng)
        # small final layer so untrained heads start near uniform logits
        self.classifier = Linear(z, n_out, rng, init_scale=0.05)

    def embed(self, f: Tensor) -> Tensor:
        return relu(self.proj(f))

    def forward(self, f: Tensor) -> Tensor:
        return self.classifier(self.embed(f))


class ClassifierHeads(Module):
    def __init__(self, n_channels: int, window_len: int, n_classes: int, cfg: TSCConfig, seed: int):
        super().__init__()
        rng = RngStream("tsc/init", seed)
        self.cfg = cfg
        self.n_classes = n_classes
        self.n_channels = n_channels
        self.window_len = window_len
        self.features = FeatureExtractor(n_channels, window_len, cfg, rng)
        d, z = self.features.out_dim, cfg.proj_dim
        self.class_origin = Head(d, z, 2 * n_classes, rng)
        self.origin = Head(d, z, 2, rng)
        self.cls = Head(d, z, n_classes, rng)

    def head(self, group: str) -> Head:
        return {"class_origin": self.class_origin, "origin": self.origin, "class": self.cls}[group]

    def group_parameters(self, group: str) -> dict[str, Tensor]:
        if group == "features":
            return _prefixed("features.", self.features)
        return _prefixed(f"{group}.", self.head(group))

    def check_input(self, x: np.ndarray) -> None:
        if x.ndim != 3 or x.shape[1:] != (self.n_channels, self.window_len):
            raise ShapeError(f"expected input [B, {self.n_channels}, {self.window_len}], got {x.shape}")

    def forward(self, x: Tensor) -> Tensor:
        """Class logits along the inference path."""
        return self.cls(self.features(x))


def _prefixed(prefix: str, mod: Module) -> dict[str, Tensor]:
    return {prefix + k: v for k, v in mod.named_parameters().items()}


class DiversityOptimizers:
    """One Adam for the shared extractor plus one per head pair."""

    def __init__(self, heads: ClassifierHeads, lr: float):
        self.features = Adam(heads.group_parameters("features"), lr=lr)
        self.heads = {g: Adam(heads.group_parameters(g), lr=lr) for g in HEAD_GROUPS}

    def set_lr(self, lr: float) -> None:
        self.features.lr = lr
        for opt in self.heads.values():
            opt.lr = lr


def _head_step(heads: ClassifierHeads, opts: DiversityOptimizers, group: str, x: np.ndarray, y: np.ndarray) -> float:
    feat_opt, head_opt = opts.features, opts.heads[group]
    feat_opt.zero_grad()
    head_opt.zero_grad()
    loss = F.softmax_cross_entropy(heads.head(group)(heads.features(Tensor(x))), y)
    reverse_gradient(loss)
    feat_opt.step()
    head_opt.step()
    log.debug("stage=tsc step=%d head=%s loss=%.6f lr=%g", feat_opt.state.step, group, loss.item(), feat_opt.lr)
    return loss.item()


def step_class_origin(heads, opts, x, y_c, y_o) -> float:
    """2C-way step on combined labels; updates the extractor and the class-origin head only."""
    return _head_step(heads, opts, "class_origin", x, encode_labels(y_c, y_o, heads.n_classes))


def step_origin_specific(heads, opts, x, y_o) -> float:
    return _head_step(heads, opts, "origin", x, np.asarray(y_o))


def step_class_specific(heads, opts, x, y_c) -> float:
    return _head_step(heads, opts, "class", x, np.asarray(y_c))


class SyntheticSource(Protocol):
    calls: int

    def draw(self, n: int) -> list[TimeSeriesInstance]: ...


class PooledSource:
    """Hands out pre-generated synthetic instances in order, wrapping around; counts calls."""

    def __init__(self, instances: Sequence[TimeSeriesInstance]):
        if not instances:
            raise ValueError("synthetic pool is empty")
        self.instances = list(instances)
        self.calls = 0
        self._pos = 0

    def draw(self, n: int) -> list[TimeSeriesInstance]:
        self.calls += 1
        out = []
        for _ in range(n):
            out.append(self.instances[self._pos % len(self.instances)])
            self._pos += 1
        return out


def _batches(n: int, bs: int, rng: RngStream) -> list[np.ndarray]:
    order = rng.permutation(n)
    out = [order[i : i + bs] for i in range(0, n, bs)]
    # a trailing singleton would break batch statistics
    if len(out) > 1 and len(out[-1]) < 2:
        out[-2] = np.concatenate([out[-2], out.pop()])
    return out


def train_diversity(
    train: Sequence[TimeSeriesInstance],
    source: SyntheticSource | None,
    kappa: float,
    n_classes: int,
    cfg: TSCConfig,
    seed: int,
) -> tuple[ClassifierHeads, list[dict]]:
    """Epoch 0 asks the source for round(kappa * B) synthetics per batch and keeps them; later epochs
    iterate the stored union. Every batch runs class-origin, origin-specific, class-specific in order."""
    if kappa > 0 and source is None:
        raise ValueError("kappa > 0 needs a synthetic source")
    x_orig = stack_values(train)
    N, K, L = x_orig.shape
    heads = ClassifierHeads(K, L, n_classes, cfg, seed)
    heads.train()
    opts = DiversityOptimizers(heads, cfg.lr)
    rng = RngStream("tsc/diversity", seed)
    x_all, y_all, o_all = x_orig, labels_of(train), np.ones(N, dtype=np.int64)
    history = []
    for epoch in range(cfg.epochs):
        opts.set_lr(step_decay(cfg.lr, epoch, cfg.lr_step, cfg.lr_gamma))
        sums = np.zeros(3)
        n_batches = 0
        if epoch == 0:
            stored = []
            for idx in _batches(N, cfg.batch_size, rng):
                xb, yb, ob = x_orig[idx], y_all[idx], o_all[idx]
                n_syn = int(np.floor(kappa * len(idx) + 0.5))
                if n_syn > 0:
                    syn = source.draw(n_syn)
                    stored += syn
                    xb = np.concatenate([xb, stack_values(syn)])
                    yb = np.concatenate([yb, labels_of(syn)])
                    ob = np.concatenate([ob, np.zeros(len(syn), dtype=np.int64)])
                    perm = rng.permutation(len(xb))
                    xb, yb, ob = xb[perm], yb[perm], ob[perm]
                sums += _three_steps(heads, opts, xb, yb, ob)
                n_batches += 1
            if stored:
                x_all = np.concatenate([x_orig, stack_values(stored)])
                y_all = np.concatenate([y_all, labels_of(stored)])
                o_all = np.concatenate([o_all, np.zeros(len(stored), dtype=np.int64)])
        else:
            bs = int(np.floor(cfg.batch_size * (1 + kappa) + 0.5))
            for idx in _batches(len(x_all), bs, rng):
                sums += _three_steps(heads, opts, x_all[idx], y_all[idx], o_all[idx])
                n_batches += 1
        rec = dict(zip(HEAD_GROUPS, (sums / max(n_batches, 1)).tolist()))
        rec["epoch"] = epoch
        history.append(rec)
        log.info(
            "stage=tsc epoch=%d loss_co=%.6f loss_o=%.6f loss_c=%.6f lr=%g",
            epoch, rec["class_origin"], rec["origin"], rec["class"], opts.features.lr,
        )
    heads.eval()
    return heads, history


def _three_steps(heads, opts, x, y_c, y_o) -> np.ndarray:
    return np.array(
        [
            step_class_origin(heads, opts, x, y_c, y_o),
            step_origin_specific(heads, opts, x, y_o),
            step_class_specific(heads, opts, x, y_c),
        ]
    )


def erm_train(
    train: Sequence[TimeSeriesInstance], n_classes: int, cfg: TSCConfig, seed: int, labels: np.ndarray | None = None
) -> tuple[ClassifierHeads, list[dict]]:
    """Control: class-specific step only, originals only. ``labels`` overrides the class labels
    (used to fit a domain probe on domain indices)."""
    x = stack_values(train)
    y = labels_of(train) if labels is None else np.asarray(labels)
    N, K, L = x.shape
    heads = ClassifierHeads(K, L, n_classes, cfg, seed)
    heads.train()
    opts = DiversityOptimizers(heads, cfg.lr)
    rng = RngStream("tsc/erm", seed)
    history = []
    for epoch in range(cfg.epochs):
        opts.set_lr(step_decay(cfg.lr, epoch, cfg.lr_step, cfg.lr_gamma))
        losses = [step_class_specific(heads, opts, x[idx], y[idx]) for idx in _batches(N, cfg.batch_size, rng)]
        history.append({"epoch": epoch, "class": float(np.mean(losses))})
        log.info("stage=erm epoch=%d loss=%.6f lr=%g", epoch, history[-1]["class"], opts.features.lr)
    heads.eval()
    return heads, history


def class_logits(heads: ClassifierHeads, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Inference path: extractor -> class projection -> class classifier, eval-mode batchnorm."""
    x = np.asarray(x, dtype=np.float64)
    heads.check_input(x)
    heads.eval()
    out = []
    with no_grad():
        for s in range(0, len(x), batch_size):
            out.append(heads(Tensor(x[s : s + batch_size])).data)
    return np.concatenate(out) if out else np.zeros((0, heads.n_classes))


def infer(heads: ClassifierHeads, instances: Sequence[TimeSeriesInstance] | np.ndarray) -> np.ndarray:
    x = instances if isinstance(instances, np.ndarray) else stack_values(instances)
    return np.argmax(class_logits(heads, x), axis=1)


def embed(heads: ClassifierHeads, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Class-projection activations (width Z), the latent space used for offline visualization."""
    x = np.asarray(x, dtype=np.float64)
    heads.check_input(x)
    heads.eval()
    out = []
    with no_grad():
        for s in range(0, len(x), batch_size):
            out.append(heads.cls.embed(heads.features(Tensor(x[s : s + batch_size]))).data)
    return np.concatenate(out) if out else np.zeros((0, heads.cfg.proj_dim))


def accuracy(heads: ClassifierHeads, instances: Sequence[TimeSeriesInstance]) -> tuple[float, list[float]]:
    """Overall and per-class accuracy (NaN for classes absent from ``instances``)."""
    pred = infer(heads, instances)
    y = labels_of(instances)
    per = [float(np.mean(pred[y == c] == c)) if np.any(y == c) else float("nan") for c in range(heads.n_classes)]
    return float(np.mean(pred == y)), per
