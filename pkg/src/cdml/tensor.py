"""Differentiable primitives on float64 numpy arrays.

Every forward op accepts either a single sample or a batch with one extra
leading axis. Backward ops take the cached forward inputs and the upstream
gradient and return gradients for the input and each parameter.
"""
from __future__ import annotations

from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from cdml.errors import DimensionError, EvaluationError

DTYPE = np.float64


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=DTYPE)


def _batched(x: np.ndarray, rank: int, name: str) -> tuple[np.ndarray, bool]:
    if x.ndim == rank:
        return x[None], True
    if x.ndim == rank + 1:
        return x, False
    raise DimensionError(f"{name}: expected rank {rank} (or {rank + 1} batched), got shape {x.shape}")


def _check_upstream(grad: np.ndarray, shape: tuple, name: str) -> None:
    if grad.shape != tuple(shape):
        raise DimensionError(f"{name}: upstream gradient shape {grad.shape} != output shape {tuple(shape)}")


# ---------------------------------------------------------------- convolution


def conv1d(x, kernels, bias, stride: int = 1) -> np.ndarray:
    """Valid 1D cross-correlation. x: (C_in, L) or (N, C_in, L)."""
    x, kernels, bias = as_tensor(x), as_tensor(kernels), as_tensor(bias)
    xb, single = _batched(x, 2, "conv1d")
    if kernels.ndim != 3:
        raise DimensionError(f"conv1d: kernels must be (C_out, C_in, K), got {kernels.shape}")
    c_out, c_in, k = kernels.shape
    if xb.shape[1] != c_in:
        raise DimensionError(f"conv1d: channel axis mismatch, input has {xb.shape[1]}, kernels expect {c_in}")
    if bias.shape != (c_out,):
        raise DimensionError(f"conv1d: bias axis 0 must be {c_out}, got {bias.shape}")
    if stride < 1:
        raise DimensionError("conv1d: stride must be positive")
    if xb.shape[2] < k:
        raise DimensionError(f"conv1d: length axis {xb.shape[2]} shorter than kernel {k}")
    win = sliding_window_view(xb, k, axis=2)[:, :, ::stride, :]  # (N, C, Lo, K)
    n, _, lo, _ = win.shape
    cols = win.transpose(0, 2, 1, 3).reshape(n * lo, c_in * k)
    out = cols @ kernels.reshape(c_out, c_in * k).T + bias
    out = out.reshape(n, lo, c_out).transpose(0, 2, 1)
    return out[0] if single else np.ascontiguousarray(out)


def conv1d_backward(x, kernels, grad, stride: int = 1):
    """Returns (d_input, d_kernels, d_bias)."""
    x, kernels, grad = as_tensor(x), as_tensor(kernels), as_tensor(grad)
    xb, single = _batched(x, 2, "conv1d_backward")
    c_out, c_in, k = kernels.shape
    lo = (xb.shape[2] - k) // stride + 1
    gb = grad[None] if single else grad
    _check_upstream(gb, (xb.shape[0], c_out, lo), "conv1d_backward")
    win = sliding_window_view(xb, k, axis=2)[:, :, ::stride, :]
    n = xb.shape[0]
    cols = win.transpose(0, 2, 1, 3).reshape(n * lo, c_in * k)
    g2 = gb.transpose(0, 2, 1).reshape(n * lo, c_out)
    d_kernels = (g2.T @ cols).reshape(c_out, c_in, k)
    d_bias = g2.sum(axis=0)
    dcols = (g2 @ kernels.reshape(c_out, c_in * k)).reshape(n, lo, c_in, k)
    dx = np.zeros_like(xb)
    span = stride * (lo - 1) + 1
    for j in range(k):
        dx[:, :, j:j + span:stride] += dcols[:, :, :, j].transpose(0, 2, 1)
    return (dx[0] if single else dx), d_kernels, d_bias


def conv2d(x, kernels, bias, stride: int = 1) -> np.ndarray:
    """Valid 2D cross-correlation. x: (C_in, H, W) or (N, C_in, H, W)."""
    x, kernels, bias = as_tensor(x), as_tensor(kernels), as_tensor(bias)
    xb, single = _batched(x, 3, "conv2d")
    if kernels.ndim != 4:
        raise DimensionError(f"conv2d: kernels must be (C_out, C_in, Kh, Kw), got {kernels.shape}")
    c_out, c_in, kh, kw = kernels.shape
    if xb.shape[1] != c_in:
        raise DimensionError(f"conv2d: channel axis mismatch, input has {xb.shape[1]}, kernels expect {c_in}")
    if bias.shape != (c_out,):
        raise DimensionError(f"conv2d: bias axis 0 must be {c_out}, got {bias.shape}")
    if stride < 1:
        raise DimensionError("conv2d: stride must be positive")
    if xb.shape[2] < kh:
        raise DimensionError(f"conv2d: height axis {xb.shape[2]} smaller than kernel {kh}")
    if xb.shape[3] < kw:
        raise DimensionError(f"conv2d: width axis {xb.shape[3]} smaller than kernel {kw}")
    win = sliding_window_view(xb, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, _, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c_in * kh * kw)
    out = cols @ kernels.reshape(c_out, -1).T + bias
    out = out.reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2)
    return out[0] if single else np.ascontiguousarray(out)


def conv2d_backward(x, kernels, grad, stride: int = 1):
    x, kernels, grad = as_tensor(x), as_tensor(kernels), as_tensor(grad)
    xb, single = _batched(x, 3, "conv2d_backward")
    c_out, c_in, kh, kw = kernels.shape
    n = xb.shape[0]
    ho = (xb.shape[2] - kh) // stride + 1
    wo = (xb.shape[3] - kw) // stride + 1
    gb = grad[None] if single else grad
    _check_upstream(gb, (n, c_out, ho, wo), "conv2d_backward")
    win = sliding_window_view(xb, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c_in * kh * kw)
    g2 = gb.transpose(0, 2, 3, 1).reshape(n * ho * wo, c_out)
    d_kernels = (g2.T @ cols).reshape(kernels.shape)
    d_bias = g2.sum(axis=0)
    dcols = (g2 @ kernels.reshape(c_out, -1)).reshape(n, ho, wo, c_in, kh, kw)
    dx = np.zeros_like(xb)
    sh, sw = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + sh:stride, j:j + sw:stride] += dcols[..., i, j].transpose(0, 3, 1, 2)
    return (dx[0] if single else dx), d_kernels, d_bias


# -------------------------------------------------------------------- pooling


def maxpool(x, pool: int, spatial: int = 1):
    """Non-overlapping max pooling over the trailing `spatial` axes.

    Remainders that do not fill a whole window are dropped. Returns the pooled
    values and, for each output cell, the flat index into `x` of the element
    that won (lowest flat index on ties).
    """
    x = as_tensor(x)
    if pool < 1:
        raise DimensionError("maxpool: pool must be >= 1")
    if spatial not in (1, 2) or x.ndim < spatial:
        raise DimensionError(f"maxpool: cannot pool {spatial} spatial axes of shape {x.shape}")
    lead = x.shape[: x.ndim - spatial]
    ext = x.shape[x.ndim - spatial:]
    for ax, e in enumerate(ext):
        if pool > e:
            raise DimensionError(f"maxpool: pool {pool} larger than spatial axis {x.ndim - spatial + ax} of extent {e}")
    flat_idx = np.arange(x.size).reshape(x.shape)
    if spatial == 1:
        lo = ext[0] // pool
        v = x[..., : lo * pool].reshape(*lead, lo, pool)
        ix = flat_idx[..., : lo * pool].reshape(*lead, lo, pool)
    else:
        ho, wo = ext[0] // pool, ext[1] // pool
        nl = len(lead)
        perm = tuple(range(nl)) + (nl, nl + 2, nl + 1, nl + 3)
        v = x[..., : ho * pool, : wo * pool].reshape(*lead, ho, pool, wo, pool)
        v = v.transpose(perm).reshape(*lead, ho, wo, pool * pool)
        ix = flat_idx[..., : ho * pool, : wo * pool].reshape(*lead, ho, pool, wo, pool)
        ix = ix.transpose(perm).reshape(*lead, ho, wo, pool * pool)
    # within-window order is row-major, so the first argmax is the lowest flat index
    arg = np.argmax(v, axis=-1)[..., None]
    out = np.take_along_axis(v, arg, axis=-1)[..., 0]
    argmax = np.take_along_axis(ix, arg, axis=-1)[..., 0]
    return out, argmax


def maxpool_backward(grad, argmax, input_shape) -> np.ndarray:
    grad = as_tensor(grad)
    _check_upstream(grad, argmax.shape, "maxpool_backward")
    dx = np.zeros(int(np.prod(input_shape)), dtype=DTYPE)
    dx[argmax.ravel()] = grad.ravel()
    return dx.reshape(input_shape)


# ---------------------------------------------------------------------- dense


def dense(x, weights, bias) -> np.ndarray:
    x, weights, bias = as_tensor(x), as_tensor(weights), as_tensor(bias)
    if weights.ndim != 2:
        raise DimensionError(f"dense: weights must be (N_out, N_in), got {weights.shape}")
    if x.ndim not in (1, 2):
        raise DimensionError(f"dense: input must be (N_in,) or (B, N_in), got {x.shape}")
    if x.shape[-1] != weights.shape[1]:
        raise DimensionError(f"dense: input axis {x.ndim - 1} has {x.shape[-1]}, weights expect {weights.shape[1]}")
    if bias.shape != (weights.shape[0],):
        raise DimensionError(f"dense: bias axis 0 must be {weights.shape[0]}, got {bias.shape}")
    return x @ weights.T + bias


def dense_backward(x, weights, grad):
    x, weights, grad = as_tensor(x), as_tensor(weights), as_tensor(grad)
    _check_upstream(grad, x.shape[:-1] + (weights.shape[0],), "dense_backward")
    g2 = np.atleast_2d(grad)
    x2 = np.atleast_2d(x)
    return grad @ weights, g2.T @ x2, g2.sum(axis=0)


# ---------------------------------------------------------------- activations


def relu(x) -> np.ndarray:
    return np.maximum(as_tensor(x), 0.0)


def relu_backward(x, grad) -> np.ndarray:
    x = as_tensor(x)
    _check_upstream(as_tensor(grad), x.shape, "relu_backward")
    return grad * (x > 0)


def sigmoid(x) -> np.ndarray:
    x = as_tensor(x)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ez = np.exp(x[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid_backward(y, grad) -> np.ndarray:
    """`y` is the sigmoid output."""
    y = as_tensor(y)
    _check_upstream(as_tensor(grad), y.shape, "sigmoid_backward")
    return grad * y * (1.0 - y)


def softmax(x) -> np.ndarray:
    x = as_tensor(x)
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def softmax_backward(y, grad) -> np.ndarray:
    """`y` is the softmax output."""
    y, grad = as_tensor(y), as_tensor(grad)
    _check_upstream(grad, y.shape, "softmax_backward")
    return y * (grad - (grad * y).sum(axis=-1, keepdims=True))


# ------------------------------------------------------------ gradient check


def grad_check(f: Callable, x, eps: float = 1e-5, indices=None) -> float:
    """Largest relative error between the analytic and central-difference gradient.

    `f(x)` must return ``(value, grad)`` with `grad` shaped like `x`. The
    per-coordinate error is ``|a - n| / max(1e-12, |a| + |n|)``. `indices`
    optionally restricts the check to a subset of flat coordinates.
    """
    x = as_tensor(x).copy()
    value, analytic = f(x)
    if not np.isfinite(value):
        raise EvaluationError(f"grad_check: f(x) is not finite ({value})")
    analytic = as_tensor(analytic)
    if analytic.shape != x.shape:
        raise DimensionError(f"grad_check: gradient shape {analytic.shape} != input shape {x.shape}")
    flat = x.reshape(-1)
    coords = range(flat.size) if indices is None else indices
    worst = 0.0
    for i in coords:
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)[0]
        flat[i] = orig - eps
        fm = f(x)[0]
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise EvaluationError(f"grad_check: f is not finite near coordinate {i}")
        num = (fp - fm) / (2 * eps)
        a = analytic.reshape(-1)[i]
        err = abs(a - num) / max(1e-12, abs(a) + abs(num))
        worst = max(worst, err)
    return float(worst)
