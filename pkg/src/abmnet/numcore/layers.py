"""Differentiable layer primitives: convolution, batch norm, pooling, upsampling.

All layers accept a single image ``(C, H, W)`` or a batch ``(N, C, H, W)``
and run in whatever float dtype their inputs carry.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, _make_node


class NormalizationStateError(RuntimeError):
    """Eval-mode batch norm was asked to run before any running statistics exist."""


def _batched(t: Tensor) -> tuple[Tensor, bool]:
    if t.ndim == 3:
        from .tensor import reshape

        return reshape(t, (1,) + t.shape), True
    if t.ndim != 4:
        raise ShapeError(f"expected a (C,H,W) or (N,C,H,W) tensor, got shape {t.shape}")
    return t, False


def _debatch(t: Tensor, squeeze: bool) -> Tensor:
    if squeeze:
        from .tensor import reshape

        return reshape(t, t.shape[1:])
    return t


def conv2d(input: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1 (same spatial size).

    ``kernels`` is (C_out, C_in, 3, 3) and ``bias`` is (C_out,).
    """
    x, squeeze = _batched(input)
    n, c_in, h, w = x.shape
    if kernels.ndim != 4 or kernels.shape[2:] != (3, 3):
        raise ShapeError(f"kernels must be (C_out, C_in, 3, 3), got {kernels.shape}")
    if kernels.shape[1] != c_in:
        raise ShapeError(
            f"input has {c_in} channels but kernels expect {kernels.shape[1]}"
        )
    if bias.shape != (kernels.shape[0],):
        raise ShapeError(f"bias must be ({kernels.shape[0]},), got {bias.shape}")

    padded = np.zeros((n, c_in, h + 2, w + 2), dtype=x.data.dtype)
    padded[:, :, 1 : h + 1, 1 : w + 1] = x.data
    win = sliding_window_view(padded, (3, 3), axis=(2, 3))  # (N, C_in, H, W, 3, 3)
    out = np.tensordot(win, kernels.data, axes=([1, 4, 5], [1, 2, 3]))  # (N, H, W, C_out)
    out += bias.data
    out_data = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def backward(g):
        if bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=(0, 2, 3)))
        if kernels.requires_grad:
            gk = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))  # (C_out, C_in, 3, 3)
            kernels.accumulate_grad(gk)
        if x.requires_grad:
            gpad = np.zeros_like(padded)
            for di in range(3):
                for dj in range(3):
                    contrib = np.tensordot(g, kernels.data[:, :, di, dj], axes=([1], [0]))
                    gpad[:, :, di : di + h, dj : dj + w] += contrib.transpose(0, 3, 1, 2)
            x.accumulate_grad(gpad[:, :, 1 : h + 1, 1 : w + 1])

    node = _make_node(out_data, (x, kernels, bias), backward)
    return _debatch(node, squeeze)


@dataclass
class BatchNormState:
    """Running statistics for one batch-norm layer."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1
    initialized: bool = False

    @classmethod
    def create(cls, channels: int, dtype=np.float32, momentum: float = 0.1) -> "BatchNormState":
        return cls(
            mean=np.zeros(channels, dtype=dtype),
            var=np.ones(channels, dtype=dtype),
            momentum=momentum,
        )

    def copy(self) -> "BatchNormState":
        return BatchNormState(self.mean.copy(), self.var.copy(), self.momentum, self.initialized)


def batch_norm(
    input: Tensor,
    gamma: Tensor,
    beta: Tensor,
    mode: str,
    state: BatchNormState,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization over (batch, H, W).

    Train mode normalizes with batch statistics and updates ``state`` by an
    exponential moving average; eval mode normalizes with the running stats
    and demands they are populated.
    """
    x, squeeze = _batched(input)
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta must be ({c},), got {gamma.shape} and {beta.shape}")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")

    count = n * h * w
    if mode == "train":
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        m = state.momentum
        unbiased = var * (count / (count - 1)) if count > 1 else var
        state.mean = ((1.0 - m) * state.mean + m * mu).astype(state.mean.dtype)
        state.var = ((1.0 - m) * state.var + m * unbiased).astype(state.var.dtype)
        state.initialized = True
    else:
        if not state.initialized:
            raise NormalizationStateError(
                "batch norm in eval mode requires populated running statistics"
            )
        mu = state.mean.astype(x.data.dtype)
        var = state.var.astype(x.data.dtype)

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None]) * inv_std[None, :, None, None]
    out_data = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def backward(g):
        if beta.requires_grad:
            beta.accumulate_grad(g.sum(axis=(0, 2, 3)))
        if gamma.requires_grad:
            gamma.accumulate_grad((g * xhat).sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gxhat = g * gamma.data[None, :, None, None]
            if mode == "train":
                mean_g = gxhat.mean(axis=(0, 2, 3), keepdims=True)
                mean_gx = (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
                gx = inv_std[None, :, None, None] * (gxhat - mean_g - xhat * mean_gx)
            else:
                gx = gxhat * inv_std[None, :, None, None]
            x.accumulate_grad(gx.astype(x.data.dtype, copy=False))

    node = _make_node(out_data.astype(x.data.dtype, copy=False), (x, gamma, beta), backward)
    return _debatch(node, squeeze)


def max_pool2(input: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; odd edges use truncated windows.

    Gradient routes to the argmax of each window, ties to the first element
    in row-major order.
    """
    x, squeeze = _batched(input)
    n, c, h, w = x.shape
    ho, wo = (h + 1) // 2, (w + 1) // 2
    neg_inf = np.array(-np.inf, dtype=x.data.dtype)
    padded = np.full((n, c, ho * 2, wo * 2), neg_inf, dtype=x.data.dtype)
    padded[:, :, :h, :w] = x.data
    windows = padded.reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
    arg = windows.argmax(axis=-1)
    out_data = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gwin = np.zeros_like(windows)
        np.put_along_axis(gwin, arg[..., None], g[..., None], axis=-1)
        gpad = gwin.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * 2, wo * 2)
        x.accumulate_grad(gpad[:, :, :h, :w])

    node = _make_node(np.ascontiguousarray(out_data), (x,), backward)
    return _debatch(node, squeeze)


def upsample_nearest(input: Tensor, target: tuple[int, int]) -> Tensor:
    """Nearest-neighbor upsample to (H, W); gradient sums over copies."""
    x, squeeze = _batched(input)
    n, c, h, w = x.shape
    H, W = target
    if H < h or W < w:
        raise ShapeError(f"target {target} is smaller than input ({h}, {w})")
    rows = (np.arange(H) * h) // H
    cols = (np.arange(W) * w) // W
    out_data = np.ascontiguousarray(x.data[:, :, rows][:, :, :, cols])

    exact = H % h == 0 and W % w == 0

    def backward(g):
        if exact:
            gx = g.reshape(n, c, h, H // h, w, W // w).sum(axis=(3, 5))
        else:
            tmp = np.zeros((n, c, h, W), dtype=g.dtype)
            np.add.at(tmp, (slice(None), slice(None), rows), g)
            gx = np.zeros((n, c, h, w), dtype=g.dtype)
            np.add.at(gx.transpose(3, 0, 1, 2), cols, tmp.transpose(3, 0, 1, 2))
        x.accumulate_grad(gx.astype(x.data.dtype, copy=False))

    node = _make_node(out_data, (x,), backward)
    return _debatch(node, squeeze)
