"""Layer-level differentiable ops: convolutions, normalization, pooling, losses."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DTYPE, ShapeError, Tensor, as_tensor, make_node


def _check_rank(x: Tensor, rank: int, what: str) -> None:
    if x.ndim != rank:
        raise ShapeError(f"{what}: expected rank {rank}, got shape {x.shape}")


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation over the last axis. x: [B, Cin, L], weight: [Cout, Cin, k]."""
    _check_rank(x, 3, "conv1d input")
    _check_rank(weight, 3, "conv1d weight")
    if stride < 1:
        raise ShapeError(f"conv1d stride must be >= 1, got {stride}")
    B, cin, L = x.shape
    cout, wcin, k = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv1d channel mismatch: input axis 1 is {cin}, weight axis 1 is {wcin}")
    Lp = L + 2 * padding
    if k > Lp:
        raise ShapeError(f"conv1d kernel {k} longer than padded input length {Lp} (axis 2)")
    lout = (Lp - k) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, k, axis=2)[:, :, ::stride, :]  # B, Cin, Lout, k
    cols = np.ascontiguousarray(win.transpose(0, 2, 1, 3)).reshape(B * lout, cin * k)
    wmat = weight.data.reshape(cout, cin * k)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(B, lout, cout).transpose(0, 2, 1)

    def backward(g):
        g2 = g.transpose(0, 2, 1).reshape(B * lout, cout)
        gw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(B, lout, cin, k)
            gxp = np.zeros((B, cin, Lp), dtype=DTYPE)
            span = stride * (lout - 1) + 1
            for j in range(k):
                gxp[:, :, j : j + span : stride] += dcols[:, :, :, j].transpose(0, 2, 1)
            gx = gxp[:, :, padding : padding + L] if padding else gxp
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return make_node(np.ascontiguousarray(out), parents, backward)


def conv_transpose1d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    output_padding: int = 0,
) -> Tensor:
    """Transposed convolution. x: [B, Cin, L], weight: [Cin, Cout, k]."""
    _check_rank(x, 3, "conv_transpose1d input")
    _check_rank(weight, 3, "conv_transpose1d weight")
    B, cin, L = x.shape
    wcin, cout, k = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv_transpose1d channel mismatch: input axis 1 is {cin}, weight axis 0 is {wcin}")
    lout = (L - 1) * stride - 2 * padding + k + output_padding
    if lout < 1:
        raise ShapeError(f"conv_transpose1d produces empty output for L={L}")
    full = max((L - 1) * stride + k, padding + lout)
    span = stride * (L - 1) + 1

    x2 = np.ascontiguousarray(x.data.transpose(0, 2, 1)).reshape(B * L, cin)
    wmat = weight.data.reshape(cin, cout * k)
    cols = (x2 @ wmat).reshape(B, L, cout, k)
    yfull = np.zeros((B, cout, full), dtype=DTYPE)
    for j in range(k):
        yfull[:, :, j : j + span : stride] += cols[:, :, :, j].transpose(0, 2, 1)
    out = yfull[:, :, padding : padding + lout]
    if bias is not None:
        out = out + bias.data[None, :, None]

    def backward(g):
        gfull = np.zeros((B, cout, full), dtype=DTYPE)
        gfull[:, :, padding : padding + lout] = g
        dcols = np.empty((B, L, cout, k), dtype=DTYPE)
        for j in range(k):
            dcols[:, :, :, j] = gfull[:, :, j : j + span : stride].transpose(0, 2, 1)
        d2 = dcols.reshape(B * L, cout * k)
        gw = (x2.T @ d2).reshape(weight.shape) if weight.requires_grad else None
        gx = (d2 @ wmat.T).reshape(B, L, cin).transpose(0, 2, 1) if x.requires_grad else None
        gb = g.sum(axis=(0, 2)) if bias is not None and bias.requires_grad else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return make_node(np.ascontiguousarray(out), parents, backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """y = x @ W^T + b over the last axis. weight: [out, in]."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input last axis {x.shape[-1]} != weight axis 1 {weight.shape[1]}")
    xd, wd = x.data, weight.data
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, xd.shape[-1])
    out = x2 @ wd.T
    if bias is not None:
        out += bias.data

    def backward(g):
        g2 = g.reshape(-1, wd.shape[0])
        gx = (g2 @ wd).reshape(xd.shape) if x.requires_grad else None
        gw = g2.T @ x2 if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return make_node(out.reshape(*lead, wd.shape[0]), parents, backward)


def _standardize(x: Tensor, axes: tuple[int, ...], eps: float) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """(x - mean) / sqrt(var + eps) over ``axes``; returns the node plus batch mean and var."""
    xd = x.data
    mu = xd.mean(axis=axes, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward(g):
        gm = g.mean(axis=axes, keepdims=True)
        gxm = (g * xhat).mean(axis=axes, keepdims=True)
        return (inv * (g - gm - xhat * gxm),)

    return make_node(xhat, (x,), backward), mu, var


def group_norm(x: Tensor, num_groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    _check_rank(x, 3, "group_norm input")
    B, C, L = x.shape
    if C % num_groups:
        raise ShapeError(f"group_norm: {C} channels not divisible into {num_groups} groups")
    xg = x.reshape(B, num_groups, (C // num_groups) * L)
    xhat, _, _ = _standardize(xg, (2,), eps)
    xhat = xhat.reshape(B, C, L)
    return xhat * gamma.reshape(1, C, 1) + beta.reshape(1, C, 1)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    xhat, _, _ = _standardize(x, (x.ndim - 1,), eps)
    return xhat * gamma + beta


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Batch normalization over (B, L) for [B, C, L] or over B for [B, C].

    In training mode the running buffers are updated in place.
    """
    axes = (0, 2) if x.ndim == 3 else (0,)
    C = x.shape[1]
    bshape = (1, C, 1) if x.ndim == 3 else (1, C)
    if training:
        xhat, mu, var = _standardize(x, axes, eps)
        n = x.size // C
        unbiased = var.reshape(C) * (n / max(n - 1, 1))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(C)
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        scale = 1.0 / np.sqrt(running_var + eps)
        xhat = (x - running_mean.reshape(bshape)) * scale.reshape(bshape)
    return xhat * gamma.reshape(bshape) + beta.reshape(bshape)


def max_pool1d(x: Tensor, kernel: int = 2) -> Tensor:
    """Non-overlapping max pooling (stride == kernel); a trailing remainder is dropped."""
    _check_rank(x, 3, "max_pool1d input")
    B, C, L = x.shape
    lout = L // kernel
    if lout < 1:
        raise ShapeError(f"max_pool1d: length {L} shorter than kernel {kernel}")
    xr = x.data[:, :, : lout * kernel].reshape(B, C, lout, kernel)
    idx = xr.argmax(axis=3)
    out = np.take_along_axis(xr, idx[..., None], axis=3)[..., 0]

    def backward(g):
        gr = np.zeros((B, C, lout, kernel), dtype=DTYPE)
        np.put_along_axis(gr, idx[..., None], g[..., None], axis=3)
        gx = np.zeros((B, C, L), dtype=DTYPE)
        gx[:, :, : lout * kernel] = gr.reshape(B, C, lout * kernel)
        return (gx,)

    return make_node(out, (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_node(out, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return make_node(out, (x,), backward)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under row-wise softmax."""
    _check_rank(logits, 2, "softmax_cross_entropy logits")
    labels = np.asarray(labels, dtype=np.int64)
    B, M = logits.shape
    if labels.shape != (B,):
        raise ShapeError(f"softmax_cross_entropy: labels shape {labels.shape} != ({B},)")
    bad = np.flatnonzero((labels < 0) | (labels >= M))
    if bad.size:
        i = int(bad[0])
        raise IndexError(f"label {int(labels[i])} at index {i} outside [0, {M})")
    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(B)
    loss = float(np.mean(lse - shifted[rows, labels]))

    def backward(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, labels] -= 1.0
        return (p * (g / B),)

    return make_node(np.asarray(loss), (logits,), backward)


def mse_loss(pred: Tensor, target) -> Tensor:
    target = as_tensor(target)
    diff = pred.data - target.data
    n = diff.size

    def backward(g):
        gp = g * (2.0 / n) * diff
        return (gp, -gp if target.requires_grad else None)

    return make_node(np.asarray(np.mean(diff * diff)), (pred, target), backward)


def dropout(x: Tensor, p: float, rng, training: bool = True) -> Tensor:
    if not training or p <= 0.0:
        return x
    keep = (rng.uniform(size=x.shape) >= p) / (1.0 - p)
    return make_node(x.data * keep, (x,), lambda g: (g * keep,))


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 0.0) -> Tensor:
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=axis, keepdims=True)) + eps
    out = xd / norm

    def backward(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)

    return make_node(out, (x,), backward)


def sinusoidal_timestep_embedding(t, dim: int) -> Tensor:
    """Sin/cos interleaved embedding: emb[2i] = sin(t w_i), emb[2i+1] = cos(t w_i), w_i = 10000^(-2i/dim).

    ``t`` may be a scalar (returns [dim]) or an integer array (returns [N, dim]).
    """
    if dim % 2:
        raise ValueError(f"embedding dim must be even, got {dim}")
    t_arr = np.asarray(t, dtype=DTYPE)
    freqs = 10000.0 ** (-np.arange(0, dim, 2, dtype=DTYPE) / dim)
    ang = t_arr[..., None] * freqs
    emb = np.empty(t_arr.shape + (dim,), dtype=DTYPE)
    emb[..., 0::2] = np.sin(ang)
    emb[..., 1::2] = np.cos(ang)
    return Tensor(emb)
