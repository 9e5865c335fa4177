"""Pure-numpy reference implementations of the hot kernels.

Every function here has a numba twin in ``numba_ops.py`` with the same
signature and semantics; ``dualattn.kernels`` picks one of the two at import
time. All 2-d inputs are C-contiguous float64, rows are independent.
"""

import numpy as np


def softmax_fwd(x):
    """Row softmax, stabilised by subtracting the row maximum."""
    shifted = x - x.max(axis=1, keepdims=True)
    y = np.exp(shifted)
    y /= y.sum(axis=1, keepdims=True)
    return y


def softmax_bwd(y, dy):
    """Gradient of row softmax given its output ``y``."""
    dot = (dy * y).sum(axis=1, keepdims=True)
    return (dy - dot) * y


def layernorm_fwd(x, gain, bias, eps):
    """Row layer norm. Returns (y, xhat, inv_std) for the backward pass."""
    mean = x.mean(axis=1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    return xhat * gain + bias, xhat, inv_std[:, 0].copy()


def layernorm_bwd(dy, xhat, inv_std, gain):
    """Gradients of row layer norm w.r.t. input, gain and bias."""
    dbias = dy.sum(axis=0)
    dgain = (dy * xhat).sum(axis=0)
    dxhat = dy * gain
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    dx = (dxhat - m1 - xhat * m2) * inv_std[:, None]
    return dx, dgain, dbias


def adam_update(p, g, m, v, step, lr, beta1, beta2, eps):
    """One bias-corrected Adam step, in place on flat views p/m/v."""
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    mhat = m / (1.0 - beta1 ** step)
    vhat = v / (1.0 - beta2 ** step)
    p -= lr * mhat / (np.sqrt(vhat) + eps)


def cross_entropy_fwd(logits, targets, active, smoothing):
    """Label-smoothed NLL per row plus the softmax probabilities.

    Inactive rows get nll 0 and are skipped by the backward kernel. The
    smoothed loss per row is logZ - (1-eps)*x[t] - (eps/V)*sum(x).
    """
    n, vocab = logits.shape
    mx = logits.max(axis=1)
    shifted = logits - mx[:, None]
    ex = np.exp(shifted)
    logz = mx + np.log(ex.sum(axis=1))
    probs = ex / ex.sum(axis=1, keepdims=True)
    picked = logits[np.arange(n), targets]
    nll = logz - (1.0 - smoothing) * picked - (smoothing / vocab) * logits.sum(axis=1)
    nll = np.where(active, nll, 0.0)
    return nll, probs


def cross_entropy_bwd(probs, targets, active, smoothing, scale):
    """d(loss)/d(logits) for the smoothed NLL, scaled by ``scale`` per row."""
    n, vocab = probs.shape
    d = probs - smoothing / vocab
    d[np.arange(n), targets] -= 1.0 - smoothing
    d *= scale * active[:, None]
    return d
