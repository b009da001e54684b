"""1-D UNet noise predictor conditioned on a timestep and one style vector."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from ..numerics import functional as F
from ..numerics.layers import Conv1d, ConvTranspose1d, GroupNorm, Linear, Module
from ..numerics.rng import RngStream
from ..numerics.tensor import ShapeError, Tensor, concat, silu


@dataclass
class UNetConfig:
    in_channels: int = 3
    style_dim: int = 64
    dim: int = 16
    dim_mults: tuple[int, ...] = (1, 2)
    time_channels: int = 256
    style_hidden: int = 100
    style_channels: int = 64
    attention: bool = False  # attention after every down/up level
    mid_attention: bool = False  # attention at the coarsest resolution only

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dim_mults"] = list(self.dim_mults)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        d = dict(d)
        d["dim_mults"] = tuple(d["dim_mults"])
        d.setdefault("mid_attention", False)
        return cls(**d)


class ResidualBlock(Module):
    """conv3 -> GN -> scale/shift from the condition -> SiLU -> conv3 -> GN -> SiLU, plus a skip."""

    def __init__(self, c_in: int, c_out: int, cond_dim: int, rng):
        super().__init__()
        self.conv1 = Conv1d(c_in, c_out, 3, rng, padding=1)
        self.norm1 = GroupNorm(c_out)
        self.cond = Linear(cond_dim, 2 * c_out, rng, init_scale=0.1)
        self.conv2 = Conv1d(c_out, c_out, 3, rng, padding=1)
        self.norm2 = GroupNorm(c_out)
        self.skip = Conv1d(c_in, c_out, 1, rng) if c_in != c_out else None
        self.c_out = c_out

    def forward(self, x: Tensor, cond: Tensor) -> Tensor:
        ss = self.cond(silu(cond))  # B, 2C
        B = ss.shape[0]
        scale = ss[:, : self.c_out].reshape(B, self.c_out, 1)
        shift = ss[:, self.c_out :].reshape(B, self.c_out, 1)
        h = self.norm1(self.conv1(x))
        h = silu(h * (scale + 1.0) + shift)
        h = silu(self.norm2(self.conv2(h)))
        return h + (self.skip(x) if self.skip is not None else x)


class TemporalAttention(Module):
    """Single-head self-attention over time with a residual connection."""

    def __init__(self, channels: int, rng):
        super().__init__()
        self.norm = GroupNorm(channels)
        self.qkv = Conv1d(channels, 3 * channels, 1, rng)
        self.out = Conv1d(channels, channels, 1, rng)
        self.channels = channels

    def forward(self, x: Tensor) -> Tensor:
        C = self.channels
        qkv = self.qkv(self.norm(x))
        q, k, v = qkv[:, :C, :], qkv[:, C : 2 * C, :], qkv[:, 2 * C :, :]
        att = F.softmax((q.transpose(0, 2, 1) @ k) * (1.0 / math.sqrt(C)), axis=-1)  # B, L, L
        y = (v @ att.transpose(0, 2, 1))  # B, C, L
        return x + self.out(y)


class _Identity(Module):
    def forward(self, x: Tensor) -> Tensor:
        return x


class Denoiser(Module):
    """eps_theta(x_t, t, s). A zero style vector encodes the unconditional case."""

    def __init__(self, cfg: UNetConfig, seed: int = 0):
        super().__init__()
        rng = RngStream("diffusion/init", seed)
        self.cfg = cfg
        dim = cfg.dim
        cond_dim = cfg.time_channels + cfg.style_channels
        self.time_fc1 = Linear(dim, cfg.time_channels, rng)
        self.time_fc2 = Linear(cfg.time_channels, cfg.time_channels, rng)
        self.style_fc1 = Linear(cfg.style_dim, cfg.style_hidden, rng)
        self.style_fc2 = Linear(cfg.style_hidden, cfg.style_channels, rng)
        self.init_conv = Conv1d(cfg.in_channels, dim, 7, rng, padding=3)

        dims = [dim] + [dim * m for m in cfg.dim_mults]
        pairs = list(zip(dims[:-1], dims[1:]))
        n = len(pairs)
        self.down_res = []
        self.down_attn = []
        self.down_sample = []
        for i, (a, b) in enumerate(pairs):
            last = i == n - 1
            self.down_res.append([ResidualBlock(a, a, cond_dim, rng), ResidualBlock(a, a, cond_dim, rng)])
            self.down_attn.append(TemporalAttention(a, rng) if cfg.attention else _Identity())
            self.down_sample.append(Conv1d(a, b, 3, rng, stride=1 if last else 2, padding=1))
        mid = dims[-1]
        self.mid_res = ResidualBlock(mid, mid, cond_dim, rng)
        self.mid_attn = TemporalAttention(mid, rng) if (cfg.attention or cfg.mid_attention) else _Identity()
        self.up_res = []
        self.up_attn = []
        self.up_sample = []
        for i, (a, b) in enumerate(reversed(pairs)):
            last = i == n - 1
            self.up_res.append([ResidualBlock(b + a, b, cond_dim, rng), ResidualBlock(b + a, b, cond_dim, rng)])
            self.up_attn.append(TemporalAttention(b, rng) if cfg.attention else _Identity())
            self.up_sample.append(
                Conv1d(b, a, 3, rng, padding=1)
                if last
                else ConvTranspose1d(b, a, 3, rng, stride=2, padding=1, output_padding=1)
            )
        self.final_res = ResidualBlock(2 * dim, dim, cond_dim, rng)
        self.final_conv = Conv1d(dim, cfg.in_channels, 1, rng)
        # zero output layer: the untrained net predicts eps = 0 instead of a large random field
        self.final_conv.weight.data[...] = 0.0
        self.final_conv.bias.data[...] = 0.0
        self.n_down = n - 1

    def embed(self, t: np.ndarray, style: np.ndarray) -> Tensor:
        t_emb = F.sinusoidal_timestep_embedding(np.asarray(t, dtype=np.float64), self.cfg.dim)
        te = self.time_fc2(silu(self.time_fc1(t_emb)))
        se = self.style_fc2(silu(self.style_fc1(Tensor(style))))
        return concat([te, se], axis=1)

    def forward(self, x: Tensor, t: np.ndarray, style: np.ndarray) -> Tensor:
        """x: [B, K, L]; t: [B] ints in 1..T; style: [B, H] (zeros = unconditional)."""
        B, K, L = x.shape
        if K != self.cfg.in_channels:
            raise ShapeError(f"denoiser expects {self.cfg.in_channels} channels, got {K}")
        if L % (2**self.n_down):
            raise ShapeError(f"window length {L} must be divisible by {2 ** self.n_down}")
        style = np.asarray(style, dtype=np.float64)
        if style.shape != (B, self.cfg.style_dim):
            raise ShapeError(f"style shape {style.shape} != ({B}, {self.cfg.style_dim})")
        cond = self.embed(t, style)
        h = self.init_conv(x)
        r = h
        skips = []
        for res, attn, down in zip(self.down_res, self.down_attn, self.down_sample):
            h = res[0](h, cond)
            skips.append(h)
            h = attn(res[1](h, cond))
            skips.append(h)
            h = down(h)
        h = self.mid_attn(self.mid_res(h, cond))
        for res, attn, up in zip(self.up_res, self.up_attn, self.up_sample):
            h = res[0](concat([h, skips.pop()], axis=1), cond)
            h = attn(res[1](concat([h, skips.pop()], axis=1), cond))
            h = up(h)
        h = self.final_res(concat([h, r], axis=1), cond)
        return self.final_conv(h)
