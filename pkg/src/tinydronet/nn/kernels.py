"""Float reference kernels, NCHW layout, each with an analytic backward.

Convolutions are expressed through strided sliding-window views so they run
at numpy speed; the arithmetic is the plain definition, no transform tricks.
"""
from __future__ import annotations

from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..model import LayerSpec

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class ShapeError(ValueError):
    pass


def _check_input(x: np.ndarray, spec: LayerSpec) -> None:
    if x.ndim != 4 or x.shape[1:] != (spec.in_ch, spec.in_h, spec.in_w):
        raise ShapeError(f"{spec.name}: expected (N, {spec.in_ch}, {spec.in_h}, {spec.in_w}), got {x.shape}")


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _windows(x: np.ndarray, k: int, stride: int, pad: int, out_h: int, out_w: int) -> np.ndarray:
    """(N, C, out_h, out_w, k, k) strided view over the zero-padded input."""
    win = sliding_window_view(_pad(x, pad), (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    return win[:, :, :out_h, :out_w]


def _tap(xp: np.ndarray, i: int, j: int, stride: int, out_h: int, out_w: int) -> np.ndarray:
    return xp[:, :, i:i + stride * (out_h - 1) + 1:stride, j:j + stride * (out_w - 1) + 1:stride]


def _unpad(dxp: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return dxp
    return dxp[:, :, pad:-pad, pad:-pad]


# --- standard convolution -----------------------------------------------------

def conv2d(x: np.ndarray, w: np.ndarray, b: Optional[np.ndarray], spec: LayerSpec) -> np.ndarray:
    _check_input(x, spec)
    if w.shape != spec.weight_shape:
        raise ShapeError(f"{spec.name}: weight shape {w.shape} != {spec.weight_shape}")
    win = _windows(x, spec.kernel, spec.stride, spec.pad, spec.out_h, spec.out_w)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b[None, :, None, None]
    return np.ascontiguousarray(out)


def conv2d_backward(x, w, grad, spec: LayerSpec, need_dx: bool = True):
    """Returns (dx, dw, db); dx is None when not requested."""
    k, s, p = spec.kernel, spec.stride, spec.pad
    win = _windows(x, k, s, p, spec.out_h, spec.out_w)
    dw = np.tensordot(grad, win, axes=([0, 2, 3], [0, 2, 3]))
    db = grad.sum(axis=(0, 2, 3))
    dx = None
    if need_dx:
        dcol = np.tensordot(grad, w, axes=([1], [0]))  # N, Ho, Wo, C, k, k
        dxp = np.zeros((x.shape[0], x.shape[1], x.shape[2] + 2 * p, x.shape[3] + 2 * p), dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                _tap(dxp, i, j, s, spec.out_h, spec.out_w)[...] += dcol[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        dx = _unpad(dxp, p)
    return dx, dw, db


# --- depthwise ----------------------------------------------------------------

def depthwise_conv2d(x: np.ndarray, w: np.ndarray, b: Optional[np.ndarray], spec: LayerSpec) -> np.ndarray:
    _check_input(x, spec)
    if w.shape != spec.weight_shape:
        raise ShapeError(f"{spec.name}: weight shape {w.shape} != {spec.weight_shape}")
    k, s = spec.kernel, spec.stride
    xp = _pad(x, spec.pad)
    out = np.zeros((x.shape[0], spec.out_ch, spec.out_h, spec.out_w), dtype=np.result_type(x, w))
    for i in range(k):
        for j in range(k):
            out += _tap(xp, i, j, s, spec.out_h, spec.out_w) * w[None, :, 0, i, j, None, None]
    if b is not None:
        out += b[None, :, None, None]
    return out


def depthwise_backward(x, w, grad, spec: LayerSpec, need_dx: bool = True):
    k, s, p = spec.kernel, spec.stride, spec.pad
    xp = _pad(x, p)
    dw = np.zeros_like(w)
    dxp = np.zeros_like(xp) if need_dx else None
    for i in range(k):
        for j in range(k):
            dw[:, 0, i, j] = np.einsum("nchw,nchw->c", grad, _tap(xp, i, j, s, spec.out_h, spec.out_w))
            if need_dx:
                _tap(dxp, i, j, s, spec.out_h, spec.out_w)[...] += grad * w[None, :, 0, i, j, None, None]
    db = grad.sum(axis=(0, 2, 3))
    return (_unpad(dxp, p) if need_dx else None), dw, db


# --- pointwise (1x1, optional stride) -------------------------------------------

def pointwise_conv2d(x: np.ndarray, w: np.ndarray, b: Optional[np.ndarray], spec: LayerSpec) -> np.ndarray:
    _check_input(x, spec)
    if w.shape != spec.weight_shape:
        raise ShapeError(f"{spec.name}: weight shape {w.shape} != {spec.weight_shape}")
    xs = x[:, :, ::spec.stride, ::spec.stride]
    out = np.einsum("oc,nchw->nohw", w[:, :, 0, 0], xs, optimize=True)
    if b is not None:
        out = out + b[None, :, None, None]
    return out


def pointwise_backward(x, w, grad, spec: LayerSpec, need_dx: bool = True):
    s = spec.stride
    xs = x[:, :, ::s, ::s]
    dw = np.einsum("nohw,nchw->oc", grad, xs, optimize=True)[:, :, None, None]
    db = grad.sum(axis=(0, 2, 3))
    dx = None
    if need_dx:
        dxs = np.einsum("oc,nohw->nchw", w[:, :, 0, 0], grad, optimize=True)
        if s == 1:
            dx = dxs
        else:
            dx = np.zeros_like(x)
            dx[:, :, ::s, ::s] = dxs
    return dx, dw, db


# --- batch norm ----------------------------------------------------------------

def batchnorm(x: np.ndarray, gamma, beta, running_mean, running_var, mode: str = "infer",
              eps: float = BN_EPS, momentum: float = BN_MOMENTUM):
    """Per-channel batch normalization.

    In ``train`` mode batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place. Returns ``(y, cache)``.
    """
    if mode == "train":
        n = x.shape[0] * x.shape[2] * x.shape[3]
        if n == 0:
            raise ShapeError("batchnorm: empty batch in train mode")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * (n / max(n - 1, 1))
    elif mode == "infer":
        if np.any(running_var <= 0):
            raise ValueError("batchnorm: running variance must be positive")
        mean, var = running_mean, running_var
    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    y = xhat * gamma[None, :, None, None] + beta[None, :, None, None]
    return y, (xhat, inv_std, mode)


def batchnorm_backward(grad, gamma, cache):
    xhat, inv_std, mode = cache
    dgamma = np.einsum("nchw,nchw->c", grad, xhat)
    dbeta = grad.sum(axis=(0, 2, 3))
    dxhat = grad * gamma[None, :, None, None]
    if mode == "infer":
        return dxhat * inv_std[None, :, None, None], dgamma, dbeta
    n = grad.shape[0] * grad.shape[2] * grad.shape[3]
    dx = (inv_std[None, :, None, None] / n) * (
        n * dxhat
        - dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
        - xhat * np.einsum("nchw,nchw->c", dxhat, xhat)[None, :, None, None]
    )
    return dx, dgamma, dbeta


# --- elementwise / pooling / dense -------------------------------------------------

def relu6(x: np.ndarray) -> np.ndarray:
    return np.minimum(np.maximum(x, 0), 6)


def relu6_backward(x: np.ndarray, grad: np.ndarray) -> np.ndarray:
    return grad * ((x > 0) & (x < 6))


def maxpool2d(x: np.ndarray, spec: LayerSpec) -> np.ndarray:
    _check_input(x, spec)
    k = spec.kernel
    if spec.stride != k:
        raise ShapeError("maxpool2d supports non-overlapping windows only")
    n, c = x.shape[:2]
    h, w = spec.out_h * k, spec.out_w * k
    return x[:, :, :h, :w].reshape(n, c, spec.out_h, k, spec.out_w, k).max(axis=(3, 5))


def maxpool2d_backward(x: np.ndarray, out: np.ndarray, grad: np.ndarray, spec: LayerSpec) -> np.ndarray:
    """Routes each gradient to the first maximal element of its window."""
    k = spec.kernel
    n, c = x.shape[:2]
    h, w = spec.out_h * k, spec.out_w * k
    win = x[:, :, :h, :w].reshape(n, c, spec.out_h, k, spec.out_w, k).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, spec.out_h, spec.out_w, k * k)
    first = win.argmax(axis=-1)
    mask = np.zeros_like(win)
    np.put_along_axis(mask, first[..., None], 1, axis=-1)
    d = (mask * grad[..., None]).reshape(n, c, spec.out_h, spec.out_w, k, k).transpose(0, 1, 2, 4, 3, 5)
    dx = np.zeros_like(x)
    dx[:, :, :h, :w] = d.reshape(n, c, h, w)
    return dx


def fully_connected(x: np.ndarray, w: np.ndarray, b: Optional[np.ndarray]) -> np.ndarray:
    out = x @ w.T
    if b is not None:
        out = out + b
    return out


def fully_connected_backward(x, w, grad, need_dx: bool = True):
    dw = grad.T @ x
    db = grad.sum(axis=0)
    dx = grad @ w if need_dx else None
    return dx, dw, db


def sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z)
    out = np.empty_like(z, dtype=np.result_type(z, np.float32))
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out
