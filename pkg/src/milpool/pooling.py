"""Clip-level aggregation of frame probabilities (multiple-instance pooling).

Every pooling kind here is a weighted average of the frame probabilities
``y`` of one class::

    clip = sum_i y_i * w_i / sum_i w_i

with ``w_i = y_i ** n`` (power), ``w_i = y_i`` (linear), ``w_i = 1`` (mean),
``w_i = exp(beta * y_i)`` (auto) or ``w_i = exp(h_i . a + b)`` (attention).
Max pooling is the ``n -> inf`` limit and is kept as its own kind.

Gradients are analytic. For power pooling, writing ``p_i = w_i / sum w``::

    d clip / d y_i = p_i * (1 + n * (y_i - clip) / y_i)
                   = ((n + 1) y_i**n - n y_i**(n-1) clip) / sum_j y_j**n
    d clip / d n   = sum_i p_i * (y_i - clip) * log(y_i)

The second line follows from ``d w_i / d n = w_i log y_i``; the frame
gradient changes sign exactly where ``y_i = clip * n / (n + 1)``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import _backend

CLAMP_EPS = 1e-7
DEFAULT_N_INIT = 1.2
DEFAULT_N_MAX = 20.0
NEGATIVE_N_MARGIN = 0.05


class PoolKind(str, Enum):
    MAX = "max"
    MEAN = "mean"
    LINEAR = "linear"
    AUTO = "auto"
    ATTENTION = "attention"
    POWER = "power"


class NSharing(str, Enum):
    SHARED = "shared"
    PER_CLASS = "per-class"


def _vec(x) -> np.ndarray:
    return np.atleast_1d(np.asarray(x, dtype=np.float64)).copy()


@dataclass
class PoolingSpec:
    """Which aggregator to use and the current values of its parameters.

    ``n`` and ``beta`` have shape ``(1,)`` when shared across classes and
    ``(C,)`` in per-class mode. ``attention_weights`` is ``(H, C)`` and
    ``attention_bias`` is ``(C,)``; both are ``None`` for other kinds.
    """

    kind: PoolKind = PoolKind.POWER
    n: np.ndarray = field(default_factory=lambda: np.array([DEFAULT_N_INIT]))
    beta: np.ndarray = field(default_factory=lambda: np.array([0.0]))
    attention_weights: np.ndarray | None = None
    attention_bias: np.ndarray | None = None
    n_sharing: NSharing = NSharing.SHARED
    n_max: float = DEFAULT_N_MAX
    allow_negative_n: bool = False

    def __post_init__(self):
        self.kind = PoolKind(self.kind)
        self.n_sharing = NSharing(self.n_sharing)
        self.n = _vec(self.n)
        self.beta = _vec(self.beta)
        if self.kind is PoolKind.POWER:
            if np.any(self.n < self.n_min) or np.any(self.n > self.n_max):
                raise ValueError(
                    f"power exponent {self.n} outside [{self.n_min}, {self.n_max}]"
                )
        if self.kind is PoolKind.ATTENTION and self.attention_weights is None:
            raise ValueError("attention pooling needs attention_weights")
        if self.attention_weights is not None:
            self.attention_weights = np.array(self.attention_weights, dtype=np.float64)
            if self.attention_bias is None:
                self.attention_bias = np.zeros(self.attention_weights.shape[1])
            self.attention_bias = _vec(self.attention_bias)

    @classmethod
    def create(
        cls,
        kind="power",
        num_classes: int = 1,
        hidden_dim: int | None = None,
        n_init: float = DEFAULT_N_INIT,
        beta_init: float = 0.0,
        n_sharing="shared",
        n_max: float = DEFAULT_N_MAX,
        allow_negative_n: bool = False,
        rng: np.random.Generator | None = None,
    ) -> "PoolingSpec":
        kind = PoolKind(kind)
        size = num_classes if NSharing(n_sharing) is NSharing.PER_CLASS else 1
        weights = bias = None
        if kind is PoolKind.ATTENTION:
            if hidden_dim is None:
                raise ValueError("attention pooling needs hidden_dim")
            rng = rng or np.random.default_rng(0)
            weights = rng.normal(0.0, 1.0 / np.sqrt(hidden_dim), size=(hidden_dim, num_classes))
            bias = np.zeros(num_classes)
        return cls(
            kind=kind,
            n=np.full(size, float(n_init)),
            beta=np.full(size, float(beta_init)),
            attention_weights=weights,
            attention_bias=bias,
            n_sharing=n_sharing,
            n_max=n_max,
            allow_negative_n=allow_negative_n,
        )

    @property
    def n_min(self) -> float:
        return -1.0 + NEGATIVE_N_MARGIN if self.allow_negative_n else 0.0

    def parameters(self) -> dict[str, np.ndarray]:
        """Trainable parameters of the active kind, keyed by name."""
        if self.kind is PoolKind.POWER:
            return {"n": self.n}
        if self.kind is PoolKind.AUTO:
            return {"beta": self.beta}
        if self.kind is PoolKind.ATTENTION:
            return {
                "attention_weights": self.attention_weights,
                "attention_bias": self.attention_bias,
            }
        return {}

    def with_parameters(self, **values) -> "PoolingSpec":
        return dataclasses.replace(
            self, **{k: np.array(v, dtype=np.float64) for k, v in values.items()}
        )

    def clamp_n(self, n) -> np.ndarray:
        """Project raw exponent values onto the admissible range."""
        return np.clip(np.asarray(n, dtype=np.float64), self.n_min, self.n_max)

    def clamped(self) -> "PoolingSpec":
        if self.kind is not PoolKind.POWER:
            return self
        return dataclasses.replace(self, n=self.clamp_n(self.n))

    def as_kind(self, kind) -> "PoolingSpec":
        """Same parameters, different aggregator (used to force max pooling)."""
        return dataclasses.replace(self, kind=PoolKind(kind))

    def threshold(self) -> np.ndarray:
        return power_threshold(self.n)

    def header(self) -> dict:
        """JSON-friendly description; parameter values live in the checkpoint blob."""
        return {
            "kind": self.kind.value,
            "n_sharing": self.n_sharing.value,
            "n_max": self.n_max,
            "allow_negative_n": self.allow_negative_n,
        }


@dataclass
class PoolResult:
    clip_prob: np.ndarray
    frame_grads: np.ndarray
    param_grads: dict[str, np.ndarray]
    feature_grads: np.ndarray | None = None


def power_threshold(n):
    """Frame value, relative to the clip value, above which the gradient is positive."""
    n = np.asarray(n, dtype=np.float64)
    out = n / (n + 1.0)
    return float(out) if out.ndim == 0 else out


def _to3d(arr, name="frame_probs"):
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 1:
        out, squeeze = arr[None, :, None], 1
    elif arr.ndim == 2:
        out, squeeze = arr[None, :, :], 2
    elif arr.ndim == 3:
        out, squeeze = arr, 3
    else:
        raise ValueError(f"{name} must be 1-, 2- or 3-dimensional, got shape {arr.shape}")
    if out.shape[1] == 0:
        raise ValueError(f"{name} has no frames")
    if not np.all(np.isfinite(out)):
        raise ValueError(f"{name} contains non-finite values")
    return np.ascontiguousarray(out), squeeze


def _features3d(feats, squeeze):
    feats = np.asarray(feats, dtype=np.float64)
    if squeeze in (1, 2):
        feats = feats[None]
    if feats.ndim != 3:
        raise ValueError("attention_features must be (T, H) or (B, T, H)")
    if not np.all(np.isfinite(feats)):
        raise ValueError("attention_features contains non-finite values")
    return feats


def _restore_clip(clip, squeeze):
    if squeeze == 1:
        return float(clip[0, 0])
    if squeeze == 2:
        return clip[0]
    return clip


def _restore_frames(dy, squeeze):
    if squeeze == 1:
        return dy[0, :, 0]
    if squeeze == 2:
        return dy[0]
    return dy


def _per_class(values, num_classes):
    if values.size == 1:
        return np.full(num_classes, values[0])
    if values.size != num_classes:
        raise ValueError(f"per-class parameter has {values.size} entries for {num_classes} classes")
    return values


def _reduce_param(grad_bc, like):
    """Sum a (B, C) gradient down to the parameter's own shape."""
    per_class = grad_bc.sum(axis=0)
    return np.array([per_class.sum()]) if like.size == 1 else per_class


class _Cache:
    __slots__ = ("kind", "y", "clip", "weights", "mask", "extra", "squeeze")


def forward_batch(y, spec: PoolingSpec, feats=None):
    """(B, T, C) frames -> (B, C) clips plus a cache for :func:`backward_batch`."""
    kind = spec.kind
    cache = _Cache()
    cache.kind = kind
    cache.mask = None
    cache.extra = None
    _, T, C = y.shape
    if kind in (PoolKind.POWER, PoolKind.LINEAR, PoolKind.AUTO):
        cache.mask = (y >= CLAMP_EPS) & (y <= 1.0)
        y = np.clip(y, CLAMP_EPS, 1.0)
    cache.y = y
    if kind is PoolKind.MEAN:
        clip = y.mean(axis=1)
    elif kind is PoolKind.MAX:
        idx = y.argmax(axis=1)
        cache.extra = idx
        clip = np.take_along_axis(y, idx[:, None, :], axis=1)[:, 0, :]
    elif kind is PoolKind.LINEAR:
        s = y.sum(axis=1)
        clip = (y * y).sum(axis=1) / s
        cache.extra = s
    elif kind is PoolKind.POWER:
        n = np.ascontiguousarray(_per_class(spec.n, C))
        clip, w = _backend.power_pool_forward(y, n)
        cache.weights = w
        cache.extra = n
    else:
        if kind is PoolKind.AUTO:
            logw = _per_class(spec.beta, C)[None, None, :] * y
        else:
            if feats is None:
                raise ValueError("attention pooling needs attention_features")
            if feats.shape[:2] != y.shape[:2]:
                raise ValueError("attention_features do not align with frame_probs")
            logw = feats @ spec.attention_weights + spec.attention_bias
            cache.extra = feats
        logw = logw - logw.max(axis=1, keepdims=True)
        w = np.exp(logw)
        w /= w.sum(axis=1, keepdims=True)
        cache.weights = w
        clip = (w * y).sum(axis=1)
    cache.clip = clip
    return clip, cache


def backward_batch(cache: _Cache, spec: PoolingSpec, upstream):
    """Returns ``(frame_grads, param_grads, feature_grads)`` for a (B, C) upstream."""
    kind = cache.kind
    y, clip = cache.y, cache.clip
    B, T, C = y.shape
    g = np.broadcast_to(np.asarray(upstream, dtype=np.float64), (B, C))
    if not np.all(np.isfinite(g)):
        raise ValueError("upstream gradient contains non-finite values")
    params: dict[str, np.ndarray] = {}
    dfeat = None
    if kind is PoolKind.MEAN:
        dy = np.broadcast_to(g[:, None, :] / T, y.shape).copy()
    elif kind is PoolKind.MAX:
        dy = np.zeros_like(y)
        np.put_along_axis(dy, cache.extra[:, None, :], g[:, None, :], axis=1)
    elif kind is PoolKind.LINEAR:
        dy = g[:, None, :] * (2.0 * y - clip[:, None, :]) / cache.extra[:, None, :]
    elif kind is PoolKind.POWER:
        dy, dn = _backend.power_pool_backward(
            y, cache.extra, cache.weights, np.ascontiguousarray(clip), np.ascontiguousarray(g)
        )
        params["n"] = _reduce_param(dn, spec.n)
    else:
        p = cache.weights
        centred = y - clip[:, None, :]
        gp = g[:, None, :] * p
        if kind is PoolKind.AUTO:
            beta = _per_class(spec.beta, C)
            dy = gp * (1.0 + beta[None, None, :] * centred)
            params["beta"] = _reduce_param((gp * centred * y).sum(axis=1), spec.beta)
        else:
            dy = gp
            dz = gp * centred
            feats = cache.extra
            params["attention_weights"] = np.einsum("bth,btc->hc", feats, dz)
            params["attention_bias"] = dz.sum(axis=(0, 1))
            dfeat = dz @ spec.attention_weights.T
    if cache.mask is not None:
        dy = dy * cache.mask
    return dy, params, dfeat


def pool_forward(frame_probs, spec: PoolingSpec, attention_features=None):
    """Clip probability per class.

    ``frame_probs`` may be ``(T,)`` (returns a float), ``(T, C)`` (returns
    ``(C,)``) or ``(B, T, C)`` (returns ``(B, C)``).
    """
    y, squeeze = _to3d(frame_probs)
    feats = None if attention_features is None else _features3d(attention_features, squeeze)
    clip, _ = forward_batch(y, spec, feats)
    return _restore_clip(clip, squeeze)


def pool_backward(frame_probs, spec: PoolingSpec, upstream=1.0, attention_features=None) -> PoolResult:
    """Forward pass plus gradients of ``upstream * clip`` w.r.t. frames and parameters."""
    y, squeeze = _to3d(frame_probs)
    feats = None if attention_features is None else _features3d(attention_features, squeeze)
    clip, cache = forward_batch(y, spec, feats)
    up = np.asarray(upstream, dtype=np.float64)
    if squeeze == 2 and up.ndim == 1:
        up = up[None]
    dy, params, dfeat = backward_batch(cache, spec, up)
    if dfeat is not None and squeeze in (1, 2):
        dfeat = dfeat[0]
    return PoolResult(
        clip_prob=_restore_clip(clip, squeeze),
        frame_grads=_restore_frames(dy, squeeze),
        param_grads=params,
        feature_grads=dfeat,
    )
