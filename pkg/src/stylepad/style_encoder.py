"""Contrastive style conditioner: temporal + contextual contrasting over two augmented views.

The encoder is a 3-block conv stack (conv, batch norm, ReLU, max-pool). A small
transformer summarizes the encoded sequence into a context vector through a
learnable summary token; that context is the instance's style vector.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .dataio import TimeSeriesInstance, stack_values
from .numerics import functional as F
from .numerics.layers import BatchNorm1d, Conv1d, LayerNorm, Linear, Module
from .numerics.optim import Adam
from .numerics.rng import RngStream
from .numerics.tensor import Tensor, concat, no_grad, parameter, relu, reverse_gradient

log = logging.getLogger(__name__)


@dataclass
class StyleConfig:
    style_dim: int = 64  # H
    enc_channels: tuple[int, ...] = (16, 32, 32)
    kernel_size: int = 9
    n_layers: int = 1
    n_heads: int = 4
    epochs: int = 40
    lr: float = 3e-4
    batch_size: int = 64
    jitter_weak: float = 0.05
    scale_weak: float = 0.1
    jitter_strong: float = 0.1
    max_segments: int = 8
    prefix_fraction: float = 0.5
    temperature: float = 0.2
    temporal_weight: float = 1.0
    contextual_weight: float = 0.7


@dataclass
class StyleVector:
    values: np.ndarray
    class_label: int
    source_instance_id: str
    domain_tag: str


@dataclass
class StyleStore:
    n_classes: int
    buckets: list[list[StyleVector]] = field(default_factory=list)

    def __post_init__(self):
        if not self.buckets:
            self.buckets = [[] for _ in range(self.n_classes)]

    def add(self, vec: StyleVector) -> None:
        if not 0 <= vec.class_label < self.n_classes:
            raise ValueError(f"class label {vec.class_label} outside [0, {self.n_classes})")
        self.buckets[vec.class_label].append(vec)

    def bucket(self, c: int) -> list[StyleVector]:
        if not 0 <= c < self.n_classes:
            raise KeyError(f"unknown class {c}")
        return self.buckets[c]

    def __len__(self) -> int:
        return sum(len(b) for b in self.buckets)

    def all_vectors(self) -> list[StyleVector]:
        return [v for b in self.buckets for v in b]

    @property
    def style_dim(self) -> int:
        for b in self.buckets:
            if b:
                return b[0].values.shape[0]
        raise ValueError("empty style store")


# --- augmentations ---------------------------------------------------------------
def augment_weak(x: TimeSeriesInstance, rng: RngStream, sigma: float = 0.05, scale_sd: float = 0.1) -> TimeSeriesInstance:
    """Jitter plus a per-channel scaling factor ~ N(1, scale_sd)."""
    K, L = x.values.shape
    scale = 1.0 + scale_sd * rng.standard_normal((K, 1)) if scale_sd > 0 else np.ones((K, 1))
    noise = sigma * rng.standard_normal((K, L)) if sigma > 0 else 0.0
    return x.with_values(x.values * scale + noise)


def augment_strong(x: TimeSeriesInstance, rng: RngStream, sigma: float = 0.1, max_segments: int = 8) -> TimeSeriesInstance:
    """Split into up to ``max_segments`` random-length pieces, shuffle them, then jitter."""
    K, L = x.values.shape
    if max_segments < 1:
        raise ValueError("max_segments must be >= 1")
    if max_segments > L:
        raise ValueError(f"max_segments={max_segments} exceeds series length {L}")
    n_seg = int(rng.integers(1, max_segments + 1)) if max_segments > 1 else 1
    values = x.values
    if n_seg > 1:
        cuts = np.sort(rng.choice(np.arange(1, L), size=n_seg - 1, replace=False))
        pieces = np.split(values, cuts, axis=1)
        order = rng.permutation(len(pieces))
        values = np.concatenate([pieces[i] for i in order], axis=1)
    else:
        values = values.copy()
    if sigma > 0:
        values = values + sigma * rng.standard_normal((K, L))
    return x.with_values(values)


def _augment_batch(x: np.ndarray, rng: RngStream, cfg: StyleConfig) -> tuple[np.ndarray, np.ndarray]:
    weak, strong = [], []
    for row in x:
        inst = TimeSeriesInstance(row, 0, "")
        weak.append(augment_weak(inst, rng, cfg.jitter_weak, cfg.scale_weak).values)
        strong.append(augment_strong(inst, rng, cfg.jitter_strong, cfg.max_segments).values)
    return np.stack(weak), np.stack(strong)


# --- model ------------------------------------------------------------------------------
class ConvBlock(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng):
        super().__init__()
        self.conv = Conv1d(c_in, c_out, kernel, rng, padding=kernel // 2)
        self.bn = BatchNorm1d(c_out)

    def forward(self, x: Tensor) -> Tensor:
        return F.max_pool1d(relu(self.bn(self.conv(x))), 2)


class SelfAttention(Module):
    def __init__(self, dim: int, heads: int, rng):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.qkv = Linear(dim, 3 * dim, rng, bias=False, init_scale=0.5)
        self.out = Linear(dim, dim, rng, init_scale=0.5)

    def forward(self, x: Tensor) -> Tensor:
        B, N, D = x.shape
        h, dh = self.heads, D // self.heads
        qkv = self.qkv(x).reshape(B, N, 3, h, dh).transpose(2, 0, 3, 1, 4)  # 3, B, h, N, dh
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = F.softmax((q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh)), axis=-1)
        y = (att @ v).transpose(0, 2, 1, 3).reshape(B, N, D)
        return self.out(y)


class TransformerBlock(Module):
    def __init__(self, dim: int, heads: int, rng, mlp_ratio: int = 2):
        super().__init__()
        self.norm1 = LayerNorm(dim)
        self.attn = SelfAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.fc1 = Linear(dim, mlp_ratio * dim, rng)
        self.fc2 = Linear(mlp_ratio * dim, dim, rng, init_scale=0.5)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.fc2(relu(self.fc1(self.norm2(x))))


class Summarizer(Module):
    """Projects encoder features to H, prepends a summary token, runs transformer layers."""

    def __init__(self, feat_dim: int, dim: int, n_layers: int, heads: int, rng):
        super().__init__()
        self.proj = Linear(feat_dim, dim, rng)
        self.token = parameter(rng.normal(0.0, 0.02, size=(1, 1, dim)))
        self.blocks = [TransformerBlock(dim, heads, rng) for _ in range(n_layers)]
        self.norm = LayerNorm(dim)

    def forward(self, z: Tensor) -> Tensor:
        """z: [B, N, feat_dim] -> context [B, H]."""
        B = z.shape[0]
        h = self.proj(z)
        tok = self.token + Tensor(np.zeros((B, 1, 1)))
        h = concat([tok, h], axis=1)
        for blk in self.blocks:
            h = blk(h)
        return self.norm(h[:, 0, :])


class StyleEncoder(Module):
    def __init__(self, n_channels: int, cfg: StyleConfig, rng):
        super().__init__()
        self.cfg = cfg
        chans = (n_channels,) + tuple(cfg.enc_channels)
        self.blocks = [ConvBlock(chans[i], chans[i + 1], cfg.kernel_size, rng) for i in range(len(cfg.enc_channels))]
        feat = chans[-1]
        H = cfg.style_dim
        self.summarizer = Summarizer(feat, H, cfg.n_layers, cfg.n_heads, rng)
        self.predictors = None  # built lazily once the encoded length is known
        self._rng = rng
        self.head1 = Linear(H, H // 2, rng)
        self.head2 = Linear(H // 2, H // 4, rng)

    def encode(self, x: Tensor) -> Tensor:
        """[B, K, L] -> encoder features [B, N, feat]."""
        h = x
        for blk in self.blocks:
            h = blk(h)
        return h.transpose(0, 2, 1)

    def build_predictors(self, n_steps: int, feat: int) -> None:
        if self.predictors is None:
            self.predictors = [
                Linear(self.cfg.style_dim, feat, self._rng, init_scale=0.1) for _ in range(n_steps)
            ]

    def context(self, z: Tensor) -> Tensor:
        return self.summarizer(z)

    def project(self, c: Tensor) -> Tensor:
        return self.head2(relu(self.head1(c)))

    def forward(self, x: Tensor) -> Tensor:
        return self.context(self.encode(x))


def encoded_length(window_len: int, n_blocks: int) -> int:
    n = window_len
    for _ in range(n_blocks):
        n //= 2
    return n


def prepare_encoder(n_channels: int, window_len: int, cfg: StyleConfig, seed: int) -> StyleEncoder:
    rng = RngStream("style/init", seed)
    model = StyleEncoder(n_channels, cfg, rng)
    n = encoded_length(window_len, len(cfg.enc_channels))
    prefix = max(1, int(n * cfg.prefix_fraction))
    if prefix >= n:
        raise ValueError(f"prefix length {prefix} must be shorter than encoded length {n}")
    model.build_predictors(n - prefix, cfg.enc_channels[-1])
    return model


# --- losses ---------------------------------------------------------------------------
def temporal_contrast_loss(
    ctx_strong: Tensor, ctx_weak: Tensor, futures_weak: Tensor, futures_strong: Tensor, predictors: Sequence[Module]
) -> Tensor:
    """Cross-view future prediction scored log-bilinearly against in-batch negatives.

    ctx_*: [B, H] contexts of the prefix; futures_*: [B, n_steps, feat] encoder
    features after the prefix. The strong view's context predicts the weak
    view's futures and vice versa. Returns the mean per-step InfoNCE loss.
    """
    B = ctx_strong.shape[0]
    if B < 2:
        raise ValueError("temporal contrasting needs batch size >= 2 for in-batch negatives")
    n_steps = futures_weak.shape[1]
    if n_steps < 1:
        raise ValueError("prefix length must be shorter than the encoded sequence")
    if len(predictors) < n_steps:
        raise ValueError(f"{len(predictors)} predictors for {n_steps} future steps")
    labels = np.arange(B)
    total = None
    for ctx, fut in ((ctx_strong, futures_weak), (ctx_weak, futures_strong)):
        for k in range(n_steps):
            pred = predictors[k](ctx)  # B, feat
            scores = fut[:, k, :] @ pred.transpose()  # rows: true futures, cols: predictions
            term = F.softmax_cross_entropy(scores, labels)
            total = term if total is None else total + term
    return total * (1.0 / n_steps)


def contextual_contrast_loss(ctx_strong: Tensor, ctx_weak: Tensor, temperature: float = 0.2) -> Tensor:
    """NT-Xent over cosine similarities; the two views of one instance are positives."""
    B = ctx_strong.shape[0]
    if B < 2:
        raise ValueError("contextual contrasting needs batch size >= 2")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    z = concat([ctx_strong, ctx_weak], axis=0)
    norms = np.linalg.norm(z.data, axis=1)
    if np.any(norms == 0.0):
        raise ValueError("zero-norm context vector")
    zn = F.l2_normalize(z, axis=1)
    sim = (zn @ zn.transpose()) * (1.0 / temperature)
    n = 2 * B
    # drop self-similarity: gather the 2B-1 off-diagonal entries of each row
    off = ~np.eye(n, dtype=bool)
    cols = np.nonzero(off)[1].reshape(n, n - 1)
    rows = np.repeat(np.arange(n)[:, None], n - 1, axis=1)
    logits = sim[rows, cols]
    idx = np.arange(n)
    pos = (idx + B) % n
    labels = np.where(pos < idx, pos, pos - 1)
    return F.softmax_cross_entropy(logits, labels)


def style_losses(model: StyleEncoder, weak: np.ndarray, strong: np.ndarray) -> tuple[Tensor, Tensor]:
    cfg = model.cfg
    zw = model.encode(Tensor(weak))
    zs = model.encode(Tensor(strong))
    n = zw.shape[1]
    prefix = max(1, int(n * cfg.prefix_fraction))
    cw = model.context(zw[:, :prefix, :])
    cs = model.context(zs[:, :prefix, :])
    tc = temporal_contrast_loss(cs, cw, zw[:, prefix:, :], zs[:, prefix:, :], model.predictors)
    cc = contextual_contrast_loss(model.project(cs), model.project(cw), cfg.temperature)
    return tc, cc


class TrainingDivergedError(FloatingPointError):
    pass


def pretrain_style_encoder(
    train: Sequence[TimeSeriesInstance], cfg: StyleConfig, seed: int, log_every: int = 1
) -> tuple[StyleEncoder, list[float]]:
    """Minimize temporal + contextual contrast; returns the frozen (eval-mode) encoder and per-epoch losses."""
    if not train:
        raise ValueError("style pretraining needs a non-empty training set")
    x_all = stack_values(train)
    N, K, L = x_all.shape
    model = prepare_encoder(K, L, cfg, seed)
    opt = Adam(model.named_parameters(), lr=cfg.lr)
    rng = RngStream("style/train", seed)
    history = []
    step = 0
    bs = min(cfg.batch_size, N)
    for epoch in range(cfg.epochs):
        model.train()
        order = rng.permutation(N)
        losses = []
        for start in range(0, N, bs):
            idx = order[start : start + bs]
            if len(idx) < 2:
                continue
            weak, strong = _augment_batch(x_all[idx], rng, cfg)
            opt.zero_grad()
            tc, cc = style_losses(model, weak, strong)
            loss = tc * cfg.temporal_weight + cc * cfg.contextual_weight
            if not np.isfinite(loss.item()):
                raise TrainingDivergedError(
                    f"style pretraining diverged at epoch {epoch} step {step}: temporal={tc.item()} contextual={cc.item()}"
                )
            reverse_gradient(loss)
            opt.step()
            losses.append(loss.item())
            step += 1
            log.debug("stage=style step=%d loss=%.6f lr=%g", step, loss.item(), opt.lr)
        history.append(float(np.mean(losses)))
        if log_every and (epoch % log_every == 0):
            log.info("stage=style epoch=%d loss=%.6f lr=%g", epoch, history[-1], opt.lr)
    model.eval()
    return model, history


def encode_styles(model: StyleEncoder, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    model.eval()
    out = []
    with no_grad():
        for start in range(0, len(x), batch_size):
            out.append(model(Tensor(x[start : start + batch_size])).data)
    return np.concatenate(out) if out else np.zeros((0, model.cfg.style_dim))


def extract_styles(model: StyleEncoder, instances: Sequence[TimeSeriesInstance], n_classes: int) -> StyleStore:
    """One style vector per instance, bucketed by the instance's class label."""
    for inst in instances:
        if not 0 <= inst.class_label < n_classes:
            raise ValueError(f"instance {inst.instance_id!r}: class {inst.class_label} outside [0, {n_classes})")
    vecs = encode_styles(model, stack_values(instances)) if instances else []
    store = StyleStore(n_classes)
    for inst, v in zip(instances, vecs):
        store.add(StyleVector(values=v, class_label=inst.class_label, source_instance_id=inst.instance_id, domain_tag=inst.domain_tag))
    return store


def style_config_dict(cfg: StyleConfig) -> dict:
    d = asdict(cfg)
    d["enc_channels"] = list(cfg.enc_channels)
    return d
