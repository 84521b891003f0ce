"""Random streams, small dense-matrix helpers and the finite-difference oracle."""

from __future__ import annotations

import zlib
from typing import Callable

import numpy as np
from scipy.special import expit

DEFAULT_FD_STEP = 1e-5


def _stream_key(stream) -> int:
    if isinstance(stream, str):
        return zlib.crc32(stream.encode("utf-8"))
    return int(stream)


class RngStream:
    """A seeded PCG64 generator addressed by ``(seed, *stream ids)``.

    Substreams are derived through ``numpy.random.SeedSequence`` spawn keys, so
    ``RngStream(42, "noise", 3)`` yields the same draws no matter what other
    streams have been consumed before it.
    """

    def __init__(self, seed: int, *stream):
        if seed < 0 or seed >= 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.stream = tuple(stream)
        key = tuple(_stream_key(s) for s in self.stream)
        self.generator = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=key))
        )

    def substream(self, *stream) -> "RngStream":
        return RngStream(self.seed, *self.stream, *stream)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream={self.stream!r})"


def gaussian(rng: RngStream, mean: float = 0.0, std: float = 1.0, size=None):
    if std < 0:
        raise ValueError("std must be non-negative")
    if std == 0:
        if size is None:
            return float(mean)
        return np.full(size, float(mean))
    draw = rng.generator.normal(mean, std, size=size)
    return float(draw) if size is None else draw


def finite_diff_gradient(
    f: Callable[[np.ndarray], float], x, h: float = DEFAULT_FD_STEP
) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if h <= 0:
        raise ValueError("step h must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.empty(x.size)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value at coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.shape)


def relative_error(a, b, floor: float = 1e-12) -> float:
    """Norm-wise relative error ||a - b|| / max(||a||, ||b||).

    Taken over the whole gradient vector so that isolated near-zero entries
    do not dominate the comparison.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


def require_finite(arr, what: str = "array"):
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values in {what}")
    return arr


def sigmoid(z):
    return expit(np.asarray(z, dtype=np.float64))


def leaky_relu(z, slope: float = 0.01):
    if 0.0 <= slope <= 1.0:
        return np.maximum(z, slope * z)
    return np.where(z > 0, z, slope * z)


def leaky_relu_grad(z, slope: float = 0.01):
    return np.where(z > 0, 1.0, slope)


def matmul(a, b):
    return np.asarray(a, dtype=np.float64) @ np.asarray(b, dtype=np.float64)
