"""Frame-wise predictor with parallel class and confidence heads.

Architecture, applied independently to every clip::

    window  = frames t-r .. t+r concatenated        (edge-replicated at clip ends)
    h       = leaky_relu(... leaky_relu(window @ W0 + b0) ... )
    y_frame = sigmoid(h @ Wc + bc)                   class head
    conf    = sigmoid(h @ Wk + bk)                   confidence head
    y_clip  = pool(y_frame)                          per class, see ``pooling``

Forward and backward passes are written out by hand; every array carries a
leading batch axis internally, so a single clip is a batch of one.

Parameter field order (also the checkpoint blob order)::

    layer0.W, layer0.b, ..., layer{L-1}.W, layer{L-1}.b,
    class_head.W, class_head.b, confidence_head.W, confidence_head.b,
    then the pooling parameters: pool.n (power), pool.beta (auto) or
    pool.attention_weights, pool.attention_bias (attention)
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from .numerics import RngStream, leaky_relu, leaky_relu_grad, sigmoid
from .pooling import PoolingSpec, PoolKind, backward_batch, forward_batch

LEAKY_SLOPE = 0.01
CLASS_HEAD = ("class_head.W", "class_head.b")
CONFIDENCE_HEAD = ("confidence_head.W", "confidence_head.b")


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    num_classes: int
    hidden_dims: tuple[int, ...] = (32,)
    context_radius: int = 2
    seed: int = 0
    pooling: str = "power"
    n_init: float = 1.2
    n_sharing: str = "shared"
    n_max: float = 20.0
    allow_negative_n: bool = False

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1 or self.num_classes < 1 or not self.hidden_dims:
            raise ValueError("input_dim, num_classes and hidden_dims must be non-empty / >= 1")
        if any(h < 1 for h in self.hidden_dims) or self.context_radius < 0:
            raise ValueError("hidden widths must be >= 1 and context_radius >= 0")
        PoolKind(self.pooling)

    @property
    def window(self) -> int:
        return 2 * self.context_radius + 1

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class ModelParams:
    """All trainable arrays of one model plus the static pooling settings."""

    config: ModelConfig
    arrays: dict[str, np.ndarray]
    pooling_template: PoolingSpec

    @property
    def pooling(self) -> PoolingSpec:
        values = {k[5:]: v for k, v in self.arrays.items() if k.startswith("pool.")}
        return self.pooling_template.with_parameters(**values)

    @property
    def num_layers(self) -> int:
        return len(self.config.hidden_dims)

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.arrays.items()}, self.pooling_template)

    def with_pooling_kind(self, kind) -> "ModelParams":
        """Same weights, different clip aggregator (parameters of the old kind kept)."""
        template = dataclasses.replace(self.pooling_template, kind=PoolKind(kind))
        if template.kind is PoolKind.ATTENTION and "pool.attention_weights" not in self.arrays:
            raise ValueError("model has no attention head to switch to")
        return ModelParams(self.config, self.arrays, template)

    def count(self) -> int:
        return sum(v.size for v in self.arrays.values())

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.arrays.items()}

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.arrays.values()])

    def from_flat(self, vec) -> "ModelParams":
        out, i = {}, 0
        for k, v in self.arrays.items():
            out[k] = np.asarray(vec[i : i + v.size], dtype=np.float64).reshape(v.shape).copy()
            i += v.size
        return ModelParams(self.config, out, self.pooling_template)

    def header(self) -> dict:
        return {"config": self.config.to_dict(), "pooling": self.pooling_template.header()}


def init_params(config: ModelConfig) -> ModelParams:
    """Weights ~ N(0, 1/fan_in) from the config seed, biases zero."""
    rng = RngStream(config.seed, "init").generator
    arrays: dict[str, np.ndarray] = {}
    fan_in = config.window * config.input_dim
    for i, width in enumerate(config.hidden_dims):
        arrays[f"layer{i}.W"] = rng.normal(0.0, np.sqrt(1.0 / fan_in), size=(fan_in, width))
        arrays[f"layer{i}.b"] = np.zeros(width)
        fan_in = width
    C = config.num_classes
    for head in ("class_head", "confidence_head"):
        arrays[f"{head}.W"] = rng.normal(0.0, np.sqrt(1.0 / fan_in), size=(fan_in, C))
        arrays[f"{head}.b"] = np.zeros(C)
    kind = PoolKind(config.pooling)
    # own stream: trunk and head weights must not depend on the pooling kind
    attn_rng = RngStream(config.seed, "init", "attention").generator
    spec = PoolingSpec.create(
        kind,
        num_classes=C,
        hidden_dim=fan_in,
        n_init=config.n_init,
        n_sharing=config.n_sharing,
        n_max=config.n_max,
        allow_negative_n=config.allow_negative_n,
        rng=attn_rng,
    )
    for name, value in spec.parameters().items():
        arrays[f"pool.{name}"] = value.copy()
    return ModelParams(config, arrays, spec)


@dataclass
class PredictionBundle:
    frame_probs: np.ndarray
    clip_probs: np.ndarray
    confidence: np.ndarray
    hidden: np.ndarray
    _cache: dict | None = field(default=None, repr=False, compare=False)

    def squeezed(self) -> "PredictionBundle":
        """Drop a leading batch axis of size one."""
        if self.frame_probs.ndim == 3 and self.frame_probs.shape[0] == 1:
            return PredictionBundle(
                self.frame_probs[0], self.clip_probs[0], self.confidence[0], self.hidden[0], self._cache
            )
        return self


def context_windows(features: np.ndarray, radius: int) -> np.ndarray:
    """(B, T, F) -> (B, T, (2r+1)*F), offset-major, edge-replicated."""
    if radius == 0:
        return features
    padded = np.pad(features, ((0, 0), (radius, radius), (0, 0)), mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(padded, 2 * radius + 1, axis=1)
    B, T, F, W = win.shape
    return np.ascontiguousarray(win.transpose(0, 1, 3, 2)).reshape(B, T, W * F)


def forward(features, params: ModelParams, train_mode: bool = False) -> PredictionBundle:
    """Frame posteriors, clip posteriors and confidence for one clip or a batch.

    ``train_mode`` is accepted for interface symmetry; noise is injected by
    the caller (see ``mean_teacher.apply_noise``), never here.
    """
    x = np.asarray(features, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3 or x.shape[2] != params.config.input_dim:
        raise ValueError(f"features must be (T, {params.config.input_dim}) or (B, T, F); got {x.shape}")
    if x.shape[1] < params.config.window:
        raise ValueError(f"clip has {x.shape[1]} frames, fewer than the context window {params.config.window}")
    if not np.all(np.isfinite(x)):
        raise ValueError("features contain non-finite values")
    B, T, _ = x.shape
    a = context_windows(x, params.config.context_radius).reshape(B * T, -1)
    inputs, pre = [], []
    for i in range(params.num_layers):
        inputs.append(a)
        z = a @ params.arrays[f"layer{i}.W"] + params.arrays[f"layer{i}.b"]
        pre.append(z)
        a = leaky_relu(z, LEAKY_SLOPE)
    h = a
    y = sigmoid(h @ params.arrays["class_head.W"] + params.arrays["class_head.b"]).reshape(B, T, -1)
    c = sigmoid(h @ params.arrays["confidence_head.W"] + params.arrays["confidence_head.b"]).reshape(B, T, -1)
    spec = params.pooling
    h3 = h.reshape(B, T, -1)
    clip, pool_cache = forward_batch(y, spec, h3 if spec.kind is PoolKind.ATTENTION else None)
    if not (np.all(np.isfinite(y)) and np.all(np.isfinite(clip)) and np.all(np.isfinite(c))):
        raise FloatingPointError("non-finite activations in forward pass")
    cache = {"inputs": inputs, "pre": pre, "h": h, "pool": pool_cache, "spec": spec, "shape": (B, T)}
    bundle = PredictionBundle(y, clip, c, h3, cache)
    return bundle.squeezed() if single else bundle


def _batched(arr, ndim):
    if arr is None:
        return None
    arr = np.asarray(arr, dtype=np.float64)
    return arr[None] if arr.ndim == ndim - 1 else arr


def backward(features, params: ModelParams, bundle: PredictionBundle, loss_grads: dict, skip_trunk: bool = False) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of a scalar loss w.r.t. every parameter.

    ``loss_grads`` maps any of ``"frame_probs"``, ``"clip_probs"`` and
    ``"confidence"`` to the loss gradient w.r.t. that output (missing keys
    mean zero). With ``skip_trunk`` only head and pooling gradients are
    computed; trunk entries are returned as zeros.
    """
    if bundle._cache is None:
        bundle = forward(features, params)
    cache = bundle._cache
    B, T = cache["shape"]
    C = params.config.num_classes
    y = bundle.frame_probs.reshape(B, T, C)
    c = bundle.confidence.reshape(B, T, C)
    gy = _batched(loss_grads.get("frame_probs"), 3)
    gc = _batched(loss_grads.get("clip_probs"), 2)
    gk = _batched(loss_grads.get("confidence"), 3)
    for g, shape in ((gy, (B, T, C)), (gc, (B, C)), (gk, (B, T, C))):
        if g is not None and g.shape != shape:
            raise ValueError(f"loss gradient of shape {g.shape}, expected {shape}")
    grads = params.zeros_like()
    spec = cache["spec"]
    dy = np.zeros((B, T, C)) if gy is None else gy.copy()
    dh_attn = None
    if gc is not None:
        dy_pool, pgrads, dh_attn = backward_batch(cache["pool"], spec, gc)
        dy += dy_pool
        for name, g in pgrads.items():
            grads[f"pool.{name}"] = g
    du = (dy * y * (1.0 - y)).reshape(B * T, C)
    dv = (np.zeros((B, T, C)) if gk is None else gk * c * (1.0 - c)).reshape(B * T, C)
    h = cache["h"]
    grads["class_head.W"] = h.T @ du
    grads["class_head.b"] = du.sum(axis=0)
    grads["confidence_head.W"] = h.T @ dv
    grads["confidence_head.b"] = dv.sum(axis=0)
    if skip_trunk:
        return grads
    dh = du @ params.arrays["class_head.W"].T + dv @ params.arrays["confidence_head.W"].T
    if dh_attn is not None:
        dh += dh_attn.reshape(B * T, -1)
    for i in reversed(range(params.num_layers)):
        dz = dh * leaky_relu_grad(cache["pre"][i], LEAKY_SLOPE)
        grads[f"layer{i}.W"] = cache["inputs"][i].T @ dz
        grads[f"layer{i}.b"] = dz.sum(axis=0)
        if i:
            dh = dz @ params.arrays[f"layer{i}.W"].T
    return grads


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, params: ModelParams) -> "AdamState":
        return cls(params.zeros_like(), params.zeros_like())

    def copy(self) -> "AdamState":
        return AdamState(
            {k: v.copy() for k, v in self.m.items()},
            {k: v.copy() for k, v in self.v.items()},
            self.t, self.beta1, self.beta2, self.eps,
        )


def optimizer_step(
    params: ModelParams,
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    trainable=None,
    lr_scale: dict[str, float] | None = None,
) -> tuple[ModelParams, AdamState]:
    """One Adam update, then the pooling clamp.

    ``trainable`` restricts the update (and the moment estimates) to the named
    parameters; everything else is copied through bit for bit.
    """
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {k}")
    keys = list(params.arrays) if trainable is None else [k for k in params.arrays if k in trainable]
    state = state.copy()
    state.t += 1
    t = state.t
    new = dict(params.arrays)
    for k in keys:
        g = grads[k]
        state.m[k] = state.beta1 * state.m[k] + (1.0 - state.beta1) * g
        state.v[k] = state.beta2 * state.v[k] + (1.0 - state.beta2) * g * g
        m_hat = state.m[k] / (1.0 - state.beta1**t)
        v_hat = state.v[k] / (1.0 - state.beta2**t)
        step = lr * (lr_scale or {}).get(k, 1.0)
        new[k] = params.arrays[k] - step * m_hat / (np.sqrt(v_hat) + state.eps)
    if "pool.n" in new:
        new["pool.n"] = params.pooling_template.clamp_n(new["pool.n"])
    return ModelParams(params.config, new, params.pooling_template), state


def trainable_keys(params: ModelParams, phase: str) -> tuple[str, ...]:
    """Parameter names updated in a training phase.

    ``classification`` trains everything except the confidence head;
    ``confidence`` trains only the confidence head.
    """
    if phase == "classification":
        return tuple(k for k in params.arrays if k not in CONFIDENCE_HEAD)
    if phase == "confidence":
        return CONFIDENCE_HEAD
    raise ValueError(f"unknown phase {phase!r}")


def save_params(path, params: ModelParams, role: str = "student", epoch: int = 0, loss_curve=(), extra: dict | None = None):
    header = {"format": "milpool-model", "role": role, "epoch": int(epoch), "loss_curve": list(loss_curve)}
    header.update(params.header())
    if extra:
        header.update(extra)
    checkpoint.save(path, header, params.arrays)


def params_from_checkpoint(header: dict, arrays: dict[str, np.ndarray], prefix: str = "") -> ModelParams:
    config = ModelConfig.from_dict(header["config"])
    pool = header["pooling"]
    fields = {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
    template = PoolingSpec(
        kind=pool["kind"],
        n=fields.get("pool.n", np.array([config.n_init])),
        beta=fields.get("pool.beta", np.array([0.0])),
        attention_weights=fields.get("pool.attention_weights"),
        attention_bias=fields.get("pool.attention_bias"),
        n_sharing=pool["n_sharing"],
        n_max=pool["n_max"],
        allow_negative_n=pool["allow_negative_n"],
    )
    expected = init_params(config)
    missing = [k for k in expected.arrays if k not in fields]
    if missing:
        raise checkpoint.CheckpointError(f"checkpoint lacks fields {missing}")
    for k, v in expected.arrays.items():
        if fields[k].shape != v.shape:
            raise checkpoint.CheckpointError(f"field {k} has shape {fields[k].shape}, expected {v.shape}")
    return ModelParams(config, {k: fields[k] for k in expected.arrays}, template)


def load_params(path) -> tuple[ModelParams, dict]:
    header, arrays = checkpoint.load(path)
    if header.get("format") != "milpool-model":
        raise checkpoint.CheckpointError(f"{path} is not a model checkpoint")
    return params_from_checkpoint(header, arrays), header
