"""Fused network operations with hand-derived gradients, plus the
feature-statistics perturbation (DSU) built from taped primitives.

Array layout is [batch, channels, length] throughout. Convolutions are
stride 1 with "same" padding; pooling is the only down-sampler.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor, _node, _wrap


class BatchTooSmall(ValueError):
    pass


class EmptyMask(ValueError):
    pass


def conv1d(x: Tensor, w: Tensor, b: Tensor | None, dilation: int = 1) -> Tensor:
    """Same-padded 1-D convolution: x [B,C,L], w [O,C,K], optional b [O].

    Forward and both gradients reduce to single flat GEMMs over an im2col
    matrix laid out channel-major as [C*K, B*L]; the column matrix is kept
    for the weight gradient.
    """
    if x.ndim != 3 or w.ndim != 3 or x.shape[1] != w.shape[1]:
        raise T.ShapeMismatch(f"conv1d: x {x.shape} vs w {w.shape}")
    B, C, L = x.shape
    O, _, K = w.shape
    span = dilation * (K - 1)
    left = span // 2
    # padded input in [C, B, Lp] layout so tap slices are contiguous blocks
    xp = np.zeros((C, B, L + span))
    xp[:, :, left : left + L] = x.data.transpose(1, 0, 2)
    cols = np.empty((C, K, B, L))
    for k in range(K):
        cols[:, k] = xp[:, :, k * dilation : k * dilation + L]
    cols2 = cols.reshape(C * K, B * L)
    w2 = w.data.reshape(O, C * K)
    y2 = w2 @ cols2
    y = np.ascontiguousarray(y2.reshape(O, B, L).transpose(1, 0, 2))
    if b is not None:
        y += b.data[:, None]

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2)).reshape(O, B * L)
        if w.requires_grad:
            w._accumulate((g2 @ cols2.T).reshape(O, C, K))
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=(0, 2)))
        if x.requires_grad:
            dcols = (w2.T @ g2).reshape(C, K, B, L)
            dxp = np.zeros_like(xp)
            for k in range(K):
                dxp[:, :, k * dilation : k * dilation + L] += dcols[:, k]
            x._accumulate(dxp[:, :, left : left + L].transpose(1, 0, 2))

    parents = (x, w) if b is None else (x, w, b)
    return _node(y, parents, backward)


def maxpool1d(x: Tensor, stride: int) -> Tensor:
    """Non-overlapping max pooling with window == stride; a trailing
    partial window is dropped."""
    if x.ndim != 3:
        raise T.ShapeMismatch(f"maxpool1d needs [B,C,L], got {x.shape}")
    B, C, L = x.shape
    n = L // stride
    xr = x.data[:, :, : n * stride].reshape(B, C, n, stride)
    idx = xr.argmax(axis=3)
    y = np.take_along_axis(xr, idx[..., None], axis=3)[..., 0]

    def backward(g):
        if not x.requires_grad:
            return
        dxr = np.zeros((B, C, n, stride))
        np.put_along_axis(dxr, idx[..., None], g[..., None], axis=3)
        dx = np.zeros((B, C, L))
        dx[:, :, : n * stride] = dxr.reshape(B, C, n * stride)
        x._accumulate(dx)

    return _node(y, (x,), backward)


def batchnorm_train(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5):
    """Batch normalization over (batch, length) per channel.

    Returns (y, batch_mean [C], batch_std [C]) where batch_std already
    includes eps inside the square root; callers fold the plain-array
    statistics into their running buffers.
    """
    if x.ndim != 3:
        raise T.ShapeMismatch(f"batchnorm needs [B,C,L], got {x.shape}")
    m = x.data.mean(axis=(0, 2), keepdims=True)
    xc = x.data - m
    var = (xc * xc).mean(axis=(0, 2), keepdims=True)
    s = np.sqrt(var + eps)
    xhat = xc / s
    y = gamma.data[None, :, None] * xhat + beta.data[None, :, None]

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=(0, 2)))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=(0, 2)))
        if x.requires_grad:
            dxhat = g * gamma.data[None, :, None]
            mean_d = dxhat.mean(axis=(0, 2), keepdims=True)
            mean_dx = (dxhat * xhat).mean(axis=(0, 2), keepdims=True)
            x._accumulate((dxhat - mean_d - xhat * mean_dx) / s)

    out = _node(y, (x, gamma, beta), backward)
    return out, m.reshape(-1).copy(), s.reshape(-1).copy()


def batchnorm_eval(x: Tensor, gamma: Tensor, beta: Tensor, run_mean, run_std) -> Tensor:
    """Normalization by stored running statistics (an exact identity for a
    freshly initialized layer: mean 0, std 1, gamma 1, beta 0)."""
    rm = run_mean[None, :, None]
    rs = run_std[None, :, None]
    y = gamma.data[None, :, None] * ((x.data - rm) / rs) + beta.data[None, :, None]

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate((g * (x.data - rm) / rs).sum(axis=(0, 2)))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=(0, 2)))
        if x.requires_grad:
            x._accumulate(g * gamma.data[None, :, None] / rs)

    return _node(y, (x, gamma, beta), backward)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None = None, mask=None) -> Tensor:
    """Inverted dropout; pass a precomputed mask to freeze the pattern."""
    if p <= 0.0:
        return x
    if mask is None:
        mask = (rng.random(x.shape) >= p) / (1.0 - p)
    y = x.data * mask

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * mask)

    return _node(y, (x,), backward)


def softmax(x: Tensor, axis: int = 1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if x.requires_grad:
            x._accumulate(y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _node(y, (x,), backward)


def masked_cross_entropy(logits: Tensor, labels: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean negative log-likelihood over masked-in positions only.

    logits [B,K,T], integer labels [B,T], boolean mask [B,T]. Masked-out
    positions contribute nothing to the loss and receive exactly zero
    gradient. Raises EmptyMask when nothing is masked in.
    """
    labels = np.asarray(labels)
    mask = np.asarray(mask, dtype=bool)
    if logits.ndim != 3 or labels.shape != mask.shape or labels.shape != (
        logits.shape[0],
        logits.shape[2],
    ):
        raise T.ShapeMismatch(
            f"cross entropy: logits {logits.shape}, labels {labels.shape}, mask {mask.shape}"
        )
    m = int(mask.sum())
    if m == 0:
        raise EmptyMask("no valid positions in the batch")
    safe = np.where(mask, labels, 0)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, safe[:, None, :], axis=1)[:, 0, :]
    loss = -(picked * mask).sum() / m

    def backward(g):
        if not logits.requires_grad:
            return
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, safe[:, None, :], 1.0, axis=1)
        dl = (p - onehot) * (mask / m)[:, None, :]
        logits._accumulate(dl * g)

    return _node(np.float64(loss), (logits,), backward)


def dsu_forward(
    x: Tensor,
    p: float,
    rng: np.random.Generator | None,
    training: bool,
    noise: tuple[np.ndarray, np.ndarray] | None = None,
    force_apply: bool | None = None,
    return_shift_scale: bool = False,
):
    """Perturb per-instance feature statistics with batch-level uncertainty.

    With probability 1-p per batch, or outside training, this is the
    identity. Otherwise, per instance i and channel c over length L:
    mu = mean(x), sigma = sqrt(var(x) + 1e-6); the batch spreads of mu and
    sigma give the perturbation scales, and the features are re-normalized
    as (sigma + e_s * spread_sigma) * (x - mu)/sigma + (mu + e_m * spread_mu)
    with e ~ N(0,1) frozen with respect to the gradient. A batch whose
    instances are identical has zero spread and passes through unchanged.

    ``noise`` injects (e_m, e_s) of shape [B,C,1] for reproducible tests;
    ``force_apply`` overrides the Bernoulli draw.
    """
    if x.ndim != 3:
        raise T.ShapeMismatch(f"dsu needs [B,C,L], got {x.shape}")
    if not training or p <= 0.0:
        return (x, None, None) if return_shift_scale else x
    B = x.shape[0]
    if B < 2:
        raise BatchTooSmall("batch statistics of statistics need B >= 2")
    apply = force_apply if force_apply is not None else bool(rng.random() < p)
    if not apply:
        return (x, None, None) if return_shift_scale else x

    mu = x.mean(axis=2, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=2, keepdims=True)
    sigma = T.sqrt(var + _wrap(1e-6))

    def batch_spread(stat: Tensor) -> Tensor:
        centered = stat - stat.mean(axis=0, keepdims=True)
        return T.sqrt((centered**2).mean(axis=0, keepdims=True))

    spread_mu = batch_spread(mu)
    spread_sigma = batch_spread(sigma)
    if noise is None:
        e_m = rng.standard_normal((B, x.shape[1], 1))
        e_s = rng.standard_normal((B, x.shape[1], 1))
    else:
        e_m, e_s = noise
    shift = mu + _wrap(e_m) * spread_mu
    scale = sigma + _wrap(e_s) * spread_sigma
    y = scale * ((x - mu) / sigma) + shift
    if return_shift_scale:
        return y, shift.data, scale.data
    return y
