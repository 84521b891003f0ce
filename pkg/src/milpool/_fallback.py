"""Pure numpy versions of the compiled kernels in ``_kernels.pyx``.

Both modules expose the same functions with the same argument conventions;
``milpool._backend`` picks one at import time.
"""

import numpy as np


def power_pool_forward(y, n):
    """Power pooling over axis 1 of a (B, T, C) array.

    ``y`` must already be clamped to (0, 1]; ``n`` has shape (C,).
    Returns ``(clip, weights)`` where ``weights`` are the normalised
    ``y**n / sum(y**n)`` per (batch, class).
    """
    logw = n[None, None, :] * np.log(y)
    logw = logw - logw.max(axis=1, keepdims=True)
    w = np.exp(logw)
    w /= w.sum(axis=1, keepdims=True)
    clip = np.einsum("btc,btc->bc", w, y)
    return clip, w


def power_pool_backward(y, n, weights, clip, upstream):
    """Returns ``(dy, dn)`` with dy shaped like y and dn shaped (B, C)."""
    centred = y - clip[:, None, :]
    g = upstream[:, None, :] * weights
    dy = g * (1.0 + n[None, None, :] * centred / y)
    dn = np.einsum("btc,btc->bc", g * centred, np.log(y))
    return dy, dn


def median_filter_binary(x, window):
    """Median of a 0/1 sequence over a centred window that shrinks at the edges."""
    x = np.asarray(x, dtype=np.int64)
    t = x.shape[0]
    half = window // 2
    csum = np.concatenate(([0], np.cumsum(x)))
    idx = np.arange(t)
    radius = np.minimum(half, np.minimum(idx, t - 1 - idx))
    ones = csum[idx + radius + 1] - csum[idx - radius]
    return (ones > radius).astype(np.int8)
