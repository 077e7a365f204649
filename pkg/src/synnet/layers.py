"""Layer primitives with hand-written forward and backward passes.

Conventions fixed here (the network blocks are assembled in `model`):
  - convolution is cross-correlation (no kernel flip), "same" zero padding;
  - max pooling is non-overlapping 2x2 / stride 2 with first-occurrence
    tie-break in row-major window order;
  - unpooling scatters each value to the argmax position recorded by the
    matched pool and leaves exact zeros elsewhere;
  - ReLU subgradient at exactly 0 is 0.

Every forward returns a tape carrying exactly what its backward needs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, ParameterError, check_tensor


class UsageError(RuntimeError):
    """A tape was used with the wrong call or in the wrong mode."""


# ---------------------------------------------------------------------------
# convolution (3x3 same-padded or 1x1), via im2col
# ---------------------------------------------------------------------------

@dataclass
class ConvTape:
    x_padded: np.ndarray   # zero-padded input, (n, in_c, h+2p, w+2p)
    weights: np.ndarray
    pad: int
    in_shape: tuple


def _check_conv_params(w: np.ndarray, b: np.ndarray):
    if w.ndim != 4:
        raise ShapeError(f"conv weights must be 4-D (out,in,kh,kw), got {w.shape}")
    out_c, in_c, kh, kw = w.shape
    if kh != kw or kh not in (1, 3):
        raise ShapeError(f"kernel must be square 1x1 or 3x3, got {kh}x{kw}")
    if b.shape != (out_c,):
        raise ShapeError(f"bias shape {b.shape} != ({out_c},)")
    return out_c, in_c, kh


def _im2col(xp: np.ndarray, k: int, h: int, w: int) -> np.ndarray:
    # (n, c, h, w, k, k) view over the padded input, no copy
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, :h, :w]


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """Same-padded cross-correlation plus per-output-channel bias."""
    check_tensor(x, "x")
    out_c, in_c, k = _check_conv_params(w, b)
    n, c, h, wd = x.shape
    if c != in_c:
        raise ShapeError(f"input has {c} channels, kernel expects {in_c}")
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = _im2col(xp, k, h, wd)                      # (n, c, h, w, k, k)
    y = np.einsum("nihwuv,oiuv->nohw", cols, w.astype(x.dtype), optimize=True)
    y += b.astype(x.dtype)[None, :, None, None]
    return y, ConvTape(xp, w, p, x.shape)


def conv2d_backward(tape: ConvTape, grad_out: np.ndarray):
    """Gradients w.r.t. input, weights and bias."""
    w = tape.weights
    out_c, in_c, k, _ = w.shape
    n, c, h, wd = tape.in_shape
    if grad_out.shape != (n, out_c, h, wd):
        raise ShapeError(
            f"grad_out shape {grad_out.shape} != forward output ({n},{out_c},{h},{wd})"
        )
    cols = _im2col(tape.x_padded, k, h, wd)
    grad_w = np.einsum("nohw,nihwuv->oiuv", grad_out, cols, optimize=True)
    grad_b = grad_out.sum(axis=(0, 2, 3))
    # scatter-add grad through each kernel offset back into the padded input
    gxp = np.zeros_like(tape.x_padded)
    for u in range(k):
        for v in range(k):
            gxp[:, :, u:u + h, v:v + wd] += np.einsum(
                "nohw,oi->nihw", grad_out, w[:, :, u, v], optimize=True
            ).astype(gxp.dtype)
    p = tape.pad
    grad_in = gxp[:, :, p:p + h, p:p + wd] if p else gxp
    return grad_in, grad_w.astype(w.dtype), grad_b.astype(w.dtype)


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

@dataclass
class BatchNormTape:
    x_hat: np.ndarray | None
    inv_std: np.ndarray | None   # per channel
    gamma: np.ndarray
    train: bool


def batchnorm_forward(x, gamma, beta, running_mean, running_var, eps=1e-5,
                      stat_momentum=0.9, mode="train"):
    """Per-channel batch normalization.

    Train mode normalizes by the batch mean / biased variance over (n,h,w)
    and returns updated running statistics; infer mode uses the running
    statistics and produces an empty tape.
    Returns (y, tape, new_running_mean, new_running_var).
    """
    check_tensor(x, "x")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta must have shape ({c},)")
    if mode == "train":
        n, _, h, w = x.shape
        if n * h * w == 1:
            raise ParameterError("batchnorm train mode needs more than one value per channel")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))          # biased
        inv_std = 1.0 / np.sqrt(var + eps)
        x_hat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
        y = gamma[None, :, None, None] * x_hat + beta[None, :, None, None]
        new_mean = stat_momentum * running_mean + (1.0 - stat_momentum) * mean
        new_var = stat_momentum * running_var + (1.0 - stat_momentum) * var
        tape = BatchNormTape(x_hat, inv_std, gamma, True)
        return y.astype(x.dtype), tape, new_mean.astype(running_mean.dtype), new_var.astype(running_var.dtype)
    elif mode == "infer":
        inv_std = 1.0 / np.sqrt(running_var + eps)
        x_hat = (x - running_mean[None, :, None, None]) * inv_std[None, :, None, None]
        y = gamma[None, :, None, None] * x_hat + beta[None, :, None, None]
        return y.astype(x.dtype), BatchNormTape(None, None, gamma, False), running_mean, running_var
    raise ParameterError(f"unknown batchnorm mode {mode!r}")


def batchnorm_backward(tape: BatchNormTape, grad_out: np.ndarray):
    """Full batch-norm backward (gradients through mean and variance)."""
    if not tape.train:
        raise UsageError("batchnorm_backward requires a train-mode tape")
    x_hat, inv_std, gamma = tape.x_hat, tape.inv_std, tape.gamma
    if grad_out.shape != x_hat.shape:
        raise ShapeError("grad_out shape mismatch with batchnorm tape")
    m = grad_out.shape[0] * grad_out.shape[2] * grad_out.shape[3]
    grad_gamma = (grad_out * x_hat).sum(axis=(0, 2, 3))
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    g = grad_out * gamma[None, :, None, None]
    sum_g = g.sum(axis=(0, 2, 3), keepdims=True)
    sum_gx = (g * x_hat).sum(axis=(0, 2, 3), keepdims=True)
    grad_in = (inv_std[None, :, None, None] / m) * (m * g - sum_g - x_hat * sum_gx)
    return grad_in.astype(x_hat.dtype), grad_gamma.astype(gamma.dtype), grad_beta.astype(gamma.dtype)


# ---------------------------------------------------------------------------
# ReLU / linear
# ---------------------------------------------------------------------------

@dataclass
class ReluTape:
    mask: np.ndarray


def relu_forward(x: np.ndarray):
    mask = x > 0
    return np.where(mask, x, 0).astype(x.dtype), ReluTape(mask)


def relu_backward(tape: ReluTape, grad_out: np.ndarray):
    if grad_out.shape != tape.mask.shape:
        raise ShapeError("grad_out shape mismatch with relu tape")
    return np.where(tape.mask, grad_out, 0).astype(grad_out.dtype)


def linear_activation(x: np.ndarray) -> np.ndarray:
    """Identity activation of the synthesis head; backward is identity too."""
    return x


# ---------------------------------------------------------------------------
# 2x2 max pooling with stored argmax indices, and index-based unpooling
# ---------------------------------------------------------------------------

@dataclass
class PoolIndices:
    """Per-output-cell argmax offset 0..3 within its 2x2 window (row-major)."""
    shape: tuple                 # pooled (n, c, hh, ww)
    offsets: np.ndarray          # uint8, same shape


@dataclass
class PoolTape:
    idx: PoolIndices
    in_shape: tuple


def _windows_2x2(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    return x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5) \
            .reshape(n, c, h // 2, w // 2, 4)


def maxpool2x2_forward(x: np.ndarray):
    check_tensor(x, "x")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2 needs even spatial dims, got {h}x{w}")
    win = _windows_2x2(x)
    off = win.argmax(axis=-1)                    # first occurrence on ties
    pooled = np.take_along_axis(win, off[..., None], axis=-1)[..., 0]
    idx = PoolIndices(pooled.shape, off.astype(np.uint8))
    return pooled.astype(x.dtype), idx, PoolTape(idx, x.shape)


def _scatter_2x2(values: np.ndarray, idx: PoolIndices) -> np.ndarray:
    n, c, hh, ww = values.shape
    out_win = np.zeros((n, c, hh, ww, 4), dtype=values.dtype)
    np.put_along_axis(out_win, idx.offsets[..., None].astype(np.int64), values[..., None], axis=-1)
    return out_win.reshape(n, c, hh, ww, 2, 2).transpose(0, 1, 2, 4, 3, 5) \
                  .reshape(n, c, hh * 2, ww * 2)


def _gather_2x2(x: np.ndarray, idx: PoolIndices) -> np.ndarray:
    win = _windows_2x2(x)
    return np.take_along_axis(win, idx.offsets[..., None].astype(np.int64), axis=-1)[..., 0]


def maxpool2x2_backward(tape: PoolTape, grad_out: np.ndarray):
    if grad_out.shape != tape.idx.shape:
        raise ShapeError(
            f"grad_out shape {grad_out.shape} != pooled shape {tape.idx.shape}"
        )
    return _scatter_2x2(grad_out, tape.idx)


@dataclass
class UnpoolTape:
    idx: PoolIndices


def unpool2x2_forward(v: np.ndarray, idx: PoolIndices):
    check_tensor(v, "v")
    if v.shape != idx.shape:
        raise ShapeError(f"values shape {v.shape} != indices shape {idx.shape}")
    return _scatter_2x2(v, idx), UnpoolTape(idx)


def unpool2x2_backward(tape: UnpoolTape, grad_out: np.ndarray):
    n, c, hh, ww = tape.idx.shape
    if grad_out.shape != (n, c, hh * 2, ww * 2):
        raise ShapeError(
            f"grad_out shape {grad_out.shape} != unpooled shape {(n, c, hh*2, ww*2)}"
        )
    return _gather_2x2(grad_out, tape.idx)
