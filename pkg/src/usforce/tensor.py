"""Layer primitives with hand-written backward passes.

Tensors are plain numpy arrays in channels-last layout.  Spatial ops accept a
single sample ``(H, W, C)`` or a batch ``(N, H, W, C)`` and return the same
rank they were given.  Every op preserves the floating dtype of its input
(float32 in the model, float64 in gradient checks); conv and dense products
run in the input's precision, reductions in float64.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import _kernels as _k

BN_EPS = 1e-3
BN_MOMENTUM = 0.99

# Reductions (batchnorm statistics, softmax) accumulate in float64.  Conv and
# dense products run as native-precision GEMMs: each dot product has at most
# 9*Cin terms, and a float64 GEMM doubles inference time.
ACC_DTYPE = np.float64


def _gemm_dtype(x: np.ndarray):
    return np.result_type(x.dtype, np.float32)


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 stream; identical seeds give bit-identical draws."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def _as_batch(x: np.ndarray, rank: int) -> tuple[np.ndarray, bool]:
    if x.ndim == rank - 1:
        return x[None], True
    if x.ndim != rank:
        raise ValueError(f"expected a {rank - 1}-d sample or {rank}-d batch, got shape {x.shape}")
    return x, False


# --- convolution -----------------------------------------------------------

def im2col3x3(x: np.ndarray) -> np.ndarray:
    """Zero-padded 3x3 patches of ``x`` (N,H,W,C) as rows of shape (N*H*W, 9*C)."""
    n, h, w, c = x.shape
    xp = np.zeros((n, h + 2, w + 2, c), dtype=x.dtype)
    xp[:, 1:-1, 1:-1, :] = x
    cols = np.empty((n, h, w, 3, 3, c), dtype=x.dtype)
    for u in range(3):
        for v in range(3):
            cols[:, :, :, u, v, :] = xp[:, u:u + h, v:v + w, :]
    return cols.reshape(n * h * w, 9 * c)


def col2im3x3(cols: np.ndarray, shape: tuple[int, int, int, int]) -> np.ndarray:
    """Adjoint of :func:`im2col3x3`: scatter-add patch rows back onto the image."""
    n, h, w, c = shape
    cols = cols.reshape(n, h, w, 3, 3, c)
    xp = np.zeros((n, h + 2, w + 2, c), dtype=cols.dtype)
    for u in range(3):
        for v in range(3):
            xp[:, u:u + h, v:v + w, :] += cols[:, :, :, u, v, :]
    return xp[:, 1:-1, 1:-1, :]


def _check_conv(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray | None) -> None:
    if kernel.ndim != 4 or kernel.shape[:2] != (3, 3):
        raise ValueError(f"kernel must be (3, 3, Cin, Cout), got {kernel.shape}")
    if x.shape[-1] != kernel.shape[2]:
        raise ValueError(
            f"input channels {x.shape[-1]} do not match kernel Cin {kernel.shape[2]}"
        )
    if bias is not None and bias.shape != (kernel.shape[3],):
        raise ValueError(f"bias length {bias.shape} does not match kernel Cout {kernel.shape[3]}")


def conv2d(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """3x3, stride-1, zero 'same' padded convolution (cross-correlation)."""
    out, _ = conv2d_forward(x, kernel, bias)
    return out


# Below this many input channels the patch matrix is cheaper than shifted products.
_IM2COL_MAX_CIN = 4


def _pad_flat(xb: np.ndarray) -> np.ndarray:
    # Rows of the zero-padded grid, plus a tail so every shifted view stays in bounds.
    n, h, w, c = xb.shape
    hp, wp = h + 2, w + 2
    size = n * hp * wp
    xp = np.zeros((size + 2 * wp + 2, c), dtype=_gemm_dtype(xb))
    xp[:size].reshape(n, hp, wp, c)[:, 1:-1, 1:-1, :] = xb
    return xp


def conv2d_forward(x, kernel, bias=None):
    """Like :func:`conv2d` but also returns a cache for :func:`conv2d_backward`.

    Small ``Cin`` uses an explicit patch matrix.  Otherwise the padded input
    is laid out as one flat row buffer, and each of the nine kernel taps
    becomes a matmul on a contiguous shifted view of it.  Outputs computed at
    padding positions are discarded.
    """
    _check_conv(x, kernel, bias)
    xb, squeeze = _as_batch(x, 4)
    n, h, w, cin = xb.shape
    cout = kernel.shape[3]
    acc = _gemm_dtype(xb)
    k = kernel.astype(acc, copy=False)
    if cin < _IM2COL_MAX_CIN:
        cols = im2col3x3(xb.astype(acc, copy=False))
        out = cols @ k.reshape(-1, cout)
        out = out.reshape(n, h, w, cout)
        cache = ("cols", cols)
    else:
        wp = w + 2
        size = n * (h + 2) * wp
        xp = _pad_flat(xb)
        full = xp[0:size] @ k[0, 0]
        tmp = np.empty_like(full)
        for u in range(3):
            for v in range(3):
                if u == v == 0:
                    continue
                o = u * wp + v
                np.matmul(xp[o:o + size], k[u, v], out=tmp)
                full += tmp
        out = full.reshape(n, h + 2, wp, cout)[:, :h, :w, :]
        cache = ("shift", xp)
    if bias is not None:
        out += bias.astype(acc, copy=False)
    out = np.ascontiguousarray(out, dtype=x.dtype)
    return (out[0] if squeeze else out), cache


def conv2d_backward(x, kernel, grad_out, cache=None, need_input_grad=True):
    """Gradients of :func:`conv2d` w.r.t. input, kernel and bias."""
    _check_conv(x, kernel, None)
    xb, squeeze = _as_batch(x, 4)
    gb, _ = _as_batch(grad_out, 4)
    if gb.shape[:3] != xb.shape[:3] or gb.shape[3] != kernel.shape[3]:
        raise ValueError(
            f"grad_out shape {grad_out.shape} inconsistent with input {x.shape} "
            f"and kernel {kernel.shape}"
        )
    n, h, w, cin = xb.shape
    cout = kernel.shape[3]
    acc = _gemm_dtype(xb)
    k = kernel.astype(acc, copy=False)
    if cache is None:
        cache = conv2d_forward(xb, kernel)[1]
    kind, buf = cache
    grad_bias = _colsum(gb.reshape(-1, cout)).astype(kernel.dtype)
    grad_input = None
    if kind == "cols":
        g = gb.reshape(-1, cout).astype(acc, copy=False)
        grad_kernel = (buf.T @ g).reshape(kernel.shape)
        if need_input_grad:
            gcols = g @ k.reshape(-1, cout).T
            grad_input = col2im3x3(gcols, xb.shape)
    else:
        wp = w + 2
        size = n * (h + 2) * wp
        gfull = np.zeros((n, h + 2, wp, cout), dtype=acc)
        gfull[:, :h, :w, :] = gb
        gfull = gfull.reshape(size, cout)
        grad_kernel = np.empty(kernel.shape, dtype=acc)
        gxp = np.zeros_like(buf) if need_input_grad else None
        for u in range(3):
            for v in range(3):
                o = u * wp + v
                grad_kernel[u, v] = buf[o:o + size].T @ gfull
                if need_input_grad:
                    gxp[o:o + size] += gfull @ k[u, v].T
        if need_input_grad:
            grad_input = gxp[:size].reshape(n, h + 2, wp, cin)[:, 1:-1, 1:-1, :]
    if grad_input is not None:
        grad_input = grad_input.astype(x.dtype)
        if squeeze:
            grad_input = grad_input[0]
    return grad_input, grad_kernel.astype(kernel.dtype), grad_bias


# --- elementwise -----------------------------------------------------------

def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0).astype(x.dtype, copy=False)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    if x.shape != grad_out.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {grad_out.shape}")
    return _k.relu_gate(np.ascontiguousarray(x), np.ascontiguousarray(grad_out))


# --- batch normalization ---------------------------------------------------

def _colsum(x2: np.ndarray) -> np.ndarray:
    # Per-channel sums of an (M, C) matrix, accumulated in float64.
    return np.ones(x2.shape[0], dtype=ACC_DTYPE) @ x2


def batchnorm(x, gamma, beta, running_mean, running_var, mode="infer",
              eps=BN_EPS, momentum=BN_MOMENTUM):
    """Per-channel batch normalization over every axis but the last.

    Returns ``(out, new_running_mean, new_running_var, cache)``.  In infer
    mode the running statistics are returned unchanged and ``cache`` is None.
    Train mode normalizes by the biased batch variance.
    """
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"gamma/beta must have length {c}, got {gamma.shape} and {beta.shape}")
    if mode == "infer":
        inv = 1.0 / np.sqrt(running_var.astype(ACC_DTYPE) + eps)
        scale = (gamma * inv).astype(x.dtype)
        shift = (beta - running_mean * gamma * inv).astype(x.dtype)
        return x * scale + shift, running_mean, running_var, None
    if mode != "train":
        raise ValueError(f"unknown mode {mode!r}")
    m = x.size // c if c else 0
    if m < 2:
        raise ValueError("train-mode batchnorm needs at least 2 values per channel")
    x2 = np.ascontiguousarray(x).reshape(m, c)
    out, xhat, mean, var, inv = _k.bn_train_forward(
        x2, gamma.astype(x.dtype), beta.astype(x.dtype), float(eps))
    out = out.reshape(x.shape)
    new_mean = (momentum * running_mean + (1 - momentum) * mean).astype(running_mean.dtype)
    new_var = (momentum * running_var + (1 - momentum) * var).astype(running_var.dtype)
    return out, new_mean, new_var, (xhat, inv, gamma)


def batchnorm_backward(grad_out, cache):
    """Backward of train-mode :func:`batchnorm`; returns (grad_x, grad_gamma, grad_beta)."""
    xhat, inv, gamma = cache
    m, c = xhat.shape
    g2 = np.ascontiguousarray(grad_out, dtype=xhat.dtype).reshape(m, c)
    gx, grad_gamma, grad_beta = _k.bn_backward(g2, xhat, gamma.astype(ACC_DTYPE), inv)
    return gx.reshape(grad_out.shape), grad_gamma.astype(gamma.dtype), grad_beta.astype(gamma.dtype)


# --- pooling ---------------------------------------------------------------

def _windows(xb: np.ndarray):
    h2, w2 = xb.shape[1] // 2, xb.shape[2] // 2
    return [xb[:, u:2 * h2:2, v:2 * w2:2, :] for u in (0, 1) for v in (0, 1)]


def maxpool2(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2/stride-2 max pooling; an odd trailing row or column is dropped.

    Returns the pooled tensor and the winning position (0..3, row-major
    within the window) of every output element.  Ties go to the first.
    """
    xb, squeeze = _as_batch(x, 4)
    if xb.shape[1] < 2 or xb.shape[2] < 2:
        raise ValueError(f"maxpool2 needs H >= 2 and W >= 2, got {xb.shape[1]}x{xb.shape[2]}")
    out, idx = _k.maxpool2_forward(np.ascontiguousarray(xb))
    if squeeze:
        return out[0], idx[0]
    return out, idx


def maxpool2_infer(x: np.ndarray) -> np.ndarray:
    """Pooled values only (no argmax bookkeeping)."""
    xb, squeeze = _as_batch(x, 4)
    if xb.shape[1] < 2 or xb.shape[2] < 2:
        raise ValueError(f"maxpool2 needs H >= 2 and W >= 2, got {xb.shape[1]}x{xb.shape[2]}")
    a, b, c, d = _windows(xb)
    out = np.maximum(np.maximum(a, b), np.maximum(c, d))
    return out[0] if squeeze else out


def relu_batchnorm_pool_infer(z, gamma, beta, running_mean, running_var, eps=BN_EPS):
    """``maxpool2_infer(batchnorm(relu(z), ..., "infer"))`` in one pass over ``z``."""
    zb, squeeze = _as_batch(z, 4)
    if zb.shape[1] < 2 or zb.shape[2] < 2:
        raise ValueError(f"maxpool2 needs H >= 2 and W >= 2, got {zb.shape[1]}x{zb.shape[2]}")
    inv = 1.0 / np.sqrt(running_var.astype(ACC_DTYPE) + eps)
    scale = (gamma * inv).astype(z.dtype)
    shift = (beta - running_mean * gamma * inv).astype(z.dtype)
    out = _k.relu_affine_pool(zb, scale, shift)
    return out[0] if squeeze else out


def maxpool2_backward(input_shape, argmax: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Route each pooled gradient to the recorded argmax of its window."""
    squeeze = len(input_shape) == 3
    gb = grad_out[None] if squeeze else grad_out
    ib = argmax[None] if squeeze else argmax
    shape = (1, *input_shape) if squeeze else tuple(input_shape)
    grad = _k.maxpool2_backward(tuple(int(v) for v in shape), np.ascontiguousarray(ib),
                                np.ascontiguousarray(gb))
    return grad[0] if squeeze else grad


# --- dense / dropout / softmax ---------------------------------------------

def dense(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ValueError(f"cannot multiply input {x.shape} by weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ValueError(f"bias shape {bias.shape} does not match {weight.shape[1]} outputs")
    acc = _gemm_dtype(x)
    out = x.astype(acc, copy=False) @ weight.astype(acc, copy=False)
    if bias is not None:
        out += bias.astype(acc, copy=False)
    return out.astype(x.dtype, copy=False)


def dense_backward(x, weight, grad_out):
    """Returns (grad_x, grad_weight, grad_bias); batched inputs sum over the batch."""
    acc = _gemm_dtype(x)
    g = grad_out.astype(acc, copy=False)
    xa = x.astype(acc, copy=False)
    grad_x = (g @ weight.T.astype(acc, copy=False)).astype(x.dtype, copy=False)
    if x.ndim == 1:
        grad_w = np.outer(xa, g)
        grad_b = g
    else:
        grad_w = xa.T @ g
        grad_b = g.sum(axis=0)
    return grad_x, grad_w.astype(weight.dtype), grad_b.astype(weight.dtype)


def dropout_mask(shape, p: float, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """Inverted-dropout mask: 0 with probability ``p``, else ``1/(1-p)``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    if p == 0.0:
        return np.ones(shape, dtype=dtype)
    keep = rng.random(shape) >= p
    return (keep * (1.0 / (1.0 - p))).astype(dtype)


def dropout(x: np.ndarray, p: float, rng: np.random.Generator | None, mode: str = "infer") -> np.ndarray:
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    if mode == "infer" or p == 0.0:
        return x
    if mode != "train":
        raise ValueError(f"unknown mode {mode!r}")
    return x * dropout_mask(x.shape, p, rng, x.dtype)


def softmax(x: np.ndarray) -> np.ndarray:
    z = x.astype(ACC_DTYPE)
    z = np.exp(z - z.max(axis=-1, keepdims=True))
    return (z / z.sum(axis=-1, keepdims=True)).astype(x.dtype)


def flatten(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x).reshape(-1)


# --- gradient oracle -------------------------------------------------------

def finite_difference_grad(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-3) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(x))
        flat[i] = orig - eps
        lo = float(f(x))
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


def finite_difference_check(f, x, analytic_grad, eps: float = 1e-3) -> float:
    """Max elementwise relative error between ``analytic_grad`` and central differences."""
    fd = finite_difference_grad(f, x, eps)
    an = np.asarray(analytic_grad, dtype=np.float64)
    if an.shape != fd.shape:
        raise ValueError(f"analytic gradient shape {an.shape} != input shape {fd.shape}")
    denom = np.maximum(np.maximum(np.abs(fd), np.abs(an)), 1e-8)
    return float(np.max(np.abs(fd - an) / denom))
