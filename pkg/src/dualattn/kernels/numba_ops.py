"""Numba-jitted twins of the kernels in ``numpy_ops.py``.

Plain loops: numba fuses them into single passes without the temporaries the
numpy versions allocate. No fastmath, so results stay reproducible
run-to-run; tiny last-bit differences against the numpy backend are allowed
(different summation order).
"""

import numpy as np
from numba import njit


@njit(cache=True)
def softmax_fwd(x):
    n, d = x.shape
    y = np.empty_like(x)
    for i in range(n):
        mx = x[i, 0]
        for j in range(1, d):
            if x[i, j] > mx:
                mx = x[i, j]
        s = 0.0
        for j in range(d):
            e = np.exp(x[i, j] - mx)
            y[i, j] = e
            s += e
        inv = 1.0 / s
        for j in range(d):
            y[i, j] *= inv
    return y


@njit(cache=True)
def softmax_bwd(y, dy):
    n, d = y.shape
    dx = np.empty_like(y)
    for i in range(n):
        dot = 0.0
        for j in range(d):
            dot += dy[i, j] * y[i, j]
        for j in range(d):
            dx[i, j] = (dy[i, j] - dot) * y[i, j]
    return dx


@njit(cache=True)
def layernorm_fwd(x, gain, bias, eps):
    n, d = x.shape
    y = np.empty_like(x)
    xhat = np.empty_like(x)
    inv_std = np.empty(n, dtype=x.dtype)
    for i in range(n):
        mean = 0.0
        for j in range(d):
            mean += x[i, j]
        mean /= d
        var = 0.0
        for j in range(d):
            c = x[i, j] - mean
            var += c * c
        var /= d
        istd = 1.0 / np.sqrt(var + eps)
        inv_std[i] = istd
        for j in range(d):
            h = (x[i, j] - mean) * istd
            xhat[i, j] = h
            y[i, j] = h * gain[j] + bias[j]
    return y, xhat, inv_std


@njit(cache=True)
def layernorm_bwd(dy, xhat, inv_std, gain):
    n, d = dy.shape
    dx = np.empty_like(dy)
    dgain = np.zeros(d, dtype=dy.dtype)
    dbias = np.zeros(d, dtype=dy.dtype)
    for i in range(n):
        m1 = 0.0
        m2 = 0.0
        for j in range(d):
            dbias[j] += dy[i, j]
            dgain[j] += dy[i, j] * xhat[i, j]
            dh = dy[i, j] * gain[j]
            m1 += dh
            m2 += dh * xhat[i, j]
        m1 /= d
        m2 /= d
        for j in range(d):
            dh = dy[i, j] * gain[j]
            dx[i, j] = (dh - m1 - xhat[i, j] * m2) * inv_std[i]
    return dx, dgain, dbias


@njit(cache=True)
def adam_update(p, g, m, v, step, lr, beta1, beta2, eps):
    c1 = 1.0 - beta1 ** step
    c2 = 1.0 - beta2 ** step
    for i in range(p.shape[0]):
        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i]
        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i]
        p[i] -= lr * (m[i] / c1) / (np.sqrt(v[i] / c2) + eps)


@njit(cache=True)
def cross_entropy_fwd(logits, targets, active, smoothing):
    n, vocab = logits.shape
    nll = np.zeros(n, dtype=logits.dtype)
    probs = np.empty_like(logits)
    for i in range(n):
        mx = logits[i, 0]
        for j in range(1, vocab):
            if logits[i, j] > mx:
                mx = logits[i, j]
        s = 0.0
        total = 0.0
        for j in range(vocab):
            e = np.exp(logits[i, j] - mx)
            probs[i, j] = e
            s += e
            total += logits[i, j]
        inv = 1.0 / s
        for j in range(vocab):
            probs[i, j] *= inv
        if active[i]:
            logz = mx + np.log(s)
            nll[i] = (
                logz
                - (1.0 - smoothing) * logits[i, targets[i]]
                - (smoothing / vocab) * total
            )
    return nll, probs


@njit(cache=True)
def cross_entropy_bwd(probs, targets, active, smoothing, scale):
    n, vocab = probs.shape
    d = np.zeros_like(probs)
    off = smoothing / vocab
    for i in range(n):
        if not active[i]:
            continue
        for j in range(vocab):
            d[i, j] = scale * (probs[i, j] - off)
        d[i, targets[i]] -= scale * (1.0 - smoothing)
    return d
