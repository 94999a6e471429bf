"""Neural-network operations on :class:`~metamorph.tensor.Tensor`.

Convolution is lowered to a single matrix product over an im2col view, so the
forward pass and all three gradients share one code path.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError
from .tensor import Tensor, as_tensor, check_finite


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``x[B, Cin, H, W]`` with ``kernel[Cout, Cin, k, k]``."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    B, C, H, W = x.shape
    O, Ci, kh, kw = kernel.shape
    if Ci != C:
        raise DimensionError(f"kernel expects {Ci} input channels, input has {C}")
    if kh != kw or kh % 2 == 0:
        raise ContractError(f"kernel spatial size must be odd and square, got {kh}x{kw}")
    if bias is not None and bias.shape != (O,):
        raise DimensionError(f"bias shape {bias.shape} does not match {O} output channels")
    if stride < 1 or padding < 0:
        raise ContractError("stride must be >= 1 and padding >= 0")
    Ho, Wo = conv_output_size(H, kh, stride, padding), conv_output_size(W, kw, stride, padding)
    if Ho < 1 or Wo < 1:
        raise DimensionError("convolution output would be empty")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # channel-major columns [C*k*k, B*Ho*Wo]: copies run over contiguous spatial axes
    cols = windows.transpose(1, 4, 5, 0, 2, 3).reshape(C * kh * kw, B * Ho * Wo)
    wmat = kernel.data.reshape(O, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    check_finite(out, "conv2d")
    out = np.ascontiguousarray(out.reshape(O, B, Ho, Wo).transpose(1, 0, 2, 3))

    def backward(g):
        gm = g.transpose(1, 0, 2, 3).reshape(O, -1)
        gk = (gm @ cols.T).reshape(kernel.shape) if kernel.requires_grad else None
        gb = gm.sum(axis=1) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (wmat.T @ gm).reshape(C, kh, kw, B, Ho, Wo)
            dxp = np.zeros((C, B) + xp.shape[2:], dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += dcols[:, i, j]
            dxp = dxp.transpose(1, 0, 2, 3)
            gx = dxp[:, :, padding:padding + H, padding:padding + W] if padding else dxp
            gx = np.ascontiguousarray(gx)
        return gx, gk, gb

    parents = (x, kernel) + ((bias,) if bias is not None else ())
    return Tensor._wrap(out, parents, backward)


def batch_norm(x: Tensor, scale: Tensor, shift: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalisation of ``x[B, C, H, W]``.

    In training mode batch statistics are used and the running buffers are
    updated in place (unbiased variance); otherwise the buffers are used.
    """
    C = x.shape[1]
    shape = (1, C, 1, 1)
    if training:
        axes = (0, 2, 3)
        count = x.size // C
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * count / max(count - 1, 1)
    else:
        mu, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu.reshape(shape).astype(x.dtype)) * inv_std.reshape(shape)
    out = xhat * scale.data.reshape(shape) + shift.data.reshape(shape)

    def backward(g):
        gscale = (g * xhat).sum(axis=(0, 2, 3)) if scale.requires_grad else None
        gshift = g.sum(axis=(0, 2, 3)) if shift.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * scale.data.reshape(shape)
            if training:
                n = x.size // C
                s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                gx = inv_std.reshape(shape) / n * (n * dxhat - s1 - xhat * s2)
            else:
                gx = dxhat * inv_std.reshape(shape)
        return gx, gscale, gshift

    return Tensor._wrap(out.astype(x.dtype, copy=False), (x, scale, shift), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial axes: [B, C, H, W] -> [B, C]."""
    B, C, H, W = x.shape
    out = x.data.mean(axis=(2, 3))
    area = x.data.dtype.type(H * W)
    return Tensor._wrap(out, (x,), lambda g: (np.broadcast_to((g / area)[:, :, None, None], x.shape).copy(),))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of ``logits[B, K]`` against integer ``labels[B]``."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"logits {logits.shape} vs labels {labels.shape}")
    B = logits.shape[0]
    logp = log_softmax(logits.data)
    loss = -logp[np.arange(B), labels].mean()
    check_finite(np.asarray(loss), "cross_entropy")

    def backward(g):
        grad = np.exp(logp)
        grad[np.arange(B), labels] -= 1
        return (grad * (g / B),)

    return Tensor._wrap(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def nll_from_probs(probs, labels) -> float:
    """Cross-entropy of explicit class probabilities (no gradient)."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    return float(-np.log(probs[np.arange(len(labels)), labels]).mean())


def accuracy(logits, labels) -> float:
    logits = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return float((logits.argmax(axis=1) == np.asarray(labels)).mean())


def dirac_kernel(channels: int, k: int = 3, dtype=np.float32) -> np.ndarray:
    """Identity convolution kernel (centre tap 1 on the channel diagonal)."""
    w = np.zeros((channels, channels, k, k), dtype=dtype)
    w[np.arange(channels), np.arange(channels), k // 2, k // 2] = 1
    return w


__all__ = [
    "accuracy", "as_tensor", "batch_norm", "conv2d", "conv_output_size", "cross_entropy",
    "dirac_kernel", "global_avg_pool", "log_softmax", "nll_from_probs",
]
