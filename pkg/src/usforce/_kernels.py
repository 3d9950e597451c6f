"""Fused loops for the memory-bound layers (batchnorm, pooling, ReLU gate).

Sequential loops only, so results are bit-reproducible.  Per-channel sums
accumulate in float64 whatever the tensor dtype.
"""
import numpy as np
from numba import njit


@njit(cache=True)
def bn_train_forward(x2, gamma, beta, eps):
    m, c = x2.shape
    mean = np.zeros(c)
    var = np.zeros(c)
    for i in range(m):
        for j in range(c):
            mean[j] += x2[i, j]
    for j in range(c):
        mean[j] /= m
    for i in range(m):
        for j in range(c):
            d = x2[i, j] - mean[j]
            var[j] += d * d
    inv = np.empty(c)
    for j in range(c):
        var[j] /= m
        inv[j] = 1.0 / np.sqrt(var[j] + eps)
    xhat = np.empty_like(x2)
    out = np.empty_like(x2)
    for i in range(m):
        for j in range(c):
            h = (x2[i, j] - mean[j]) * inv[j]
            xhat[i, j] = h
            out[i, j] = h * gamma[j] + beta[j]
    return out, xhat, mean, var, inv


@njit(cache=True)
def bn_backward(g2, xhat, gamma, inv):
    m, c = g2.shape
    gbeta = np.zeros(c)
    ggamma = np.zeros(c)
    for i in range(m):
        for j in range(c):
            gbeta[j] += g2[i, j]
            ggamma[j] += g2[i, j] * xhat[i, j]
    scale = np.empty(c)
    for j in range(c):
        scale[j] = gamma[j] * inv[j] / m
    gx = np.empty_like(g2)
    for i in range(m):
        for j in range(c):
            gx[i, j] = scale[j] * (m * g2[i, j] - gbeta[j] - xhat[i, j] * ggamma[j])
    return gx, ggamma, gbeta


@njit(cache=True)
def maxpool2_forward(x):
    n, h, w, c = x.shape
    h2 = h // 2
    w2 = w // 2
    out = np.empty((n, h2, w2, c), dtype=x.dtype)
    idx = np.empty((n, h2, w2, c), dtype=np.int8)
    for b in range(n):
        for i in range(h2):
            for j in range(w2):
                for k in range(c):
                    best = x[b, 2 * i, 2 * j, k]
                    pos = 0
                    v = x[b, 2 * i, 2 * j + 1, k]
                    if v > best:
                        best = v
                        pos = 1
                    v = x[b, 2 * i + 1, 2 * j, k]
                    if v > best:
                        best = v
                        pos = 2
                    v = x[b, 2 * i + 1, 2 * j + 1, k]
                    if v > best:
                        best = v
                        pos = 3
                    out[b, i, j, k] = best
                    idx[b, i, j, k] = pos
    return out, idx


@njit(cache=True)
def maxpool2_backward(shape, idx, g):
    n, h2, w2, c = g.shape
    grad = np.zeros(shape, dtype=g.dtype)
    for b in range(n):
        for i in range(h2):
            for j in range(w2):
                for k in range(c):
                    p = idx[b, i, j, k]
                    grad[b, 2 * i + p // 2, 2 * j + p % 2, k] = g[b, i, j, k]
    return grad


@njit(cache=True)
def relu_gate(x, g):
    out = np.empty_like(g)
    xf = x.ravel()
    gf = g.ravel()
    of = out.ravel()
    for i in range(xf.size):
        of[i] = gf[i] if xf[i] > 0 else 0.0
    return out


@njit(cache=True)
def relu_affine_pool(z, scale, shift):
    # Inference-only fusion of ReLU -> per-channel x*scale+shift -> 2x2 max pool.
    # Same float ops, same rounding as running the three passes separately.
    n, h, w, c = z.shape
    h2 = h // 2
    w2 = w // 2
    out = np.empty((n, h2, w2, c), dtype=z.dtype)
    zero = np.zeros(1, dtype=z.dtype)[0]
    for b in range(n):
        for i in range(h2):
            for j in range(w2):
                for k in range(c):
                    best = zero
                    for u in range(2):
                        for v in range(2):
                            t = z[b, 2 * i + u, 2 * j + v, k]
                            if t < zero:
                                t = zero
                            t = t * scale[k] + shift[k]
                            if (u == 0 and v == 0) or t > best:
                                best = t
                    out[b, i, j, k] = best
    return out
