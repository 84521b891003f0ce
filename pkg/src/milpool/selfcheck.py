"""Quick numerical self-tests behind ``milpool check``.

Each check returns ``(name, passed, detail)``. They re-derive gradients by
central differences and compare against the analytic backward passes, so a
broken build or a miscompiled kernel shows up without the test suite.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import _backend
from .frame_model import ModelConfig, backward, forward, init_params
from .losses import FrameTargets, LossWeights, stage1_loss
from .mean_teacher import TeacherState, ema_update
from .numerics import RngStream, finite_diff_gradient, relative_error
from .pooling import PoolingSpec, pool_backward, pool_forward

CheckResult = tuple[str, bool, str]


def _pool_cases(rng: np.random.Generator, T: int):
    y = rng.uniform(0.05, 0.95, size=T)
    h = rng.normal(size=(T, 3))
    yield "linear", PoolingSpec.create("linear"), y, None
    for n in (0.4, 1.0, 2.0, 5.0):
        yield f"power(n={n})", PoolingSpec.create("power", n_init=n), y, None
    yield "auto", PoolingSpec.create("auto", beta_init=rng.normal()), y, None
    yield "attention", PoolingSpec.create("attention", 1, 3, rng=rng), y, h
    yield "mean", PoolingSpec.create("mean"), y, None
    yield "max", PoolingSpec.create("max"), y, None


def check_pooling_gradients(trials: int = 20, tol: float = 1e-5) -> CheckResult:
    rng = np.random.default_rng(0)
    worst = 0.0
    for trial in range(trials):
        for T in (5, 20):
            for name, spec, y, h in _pool_cases(rng, T):
                res = pool_backward(y, spec, attention_features=h)
                analytic = [res.frame_grads.ravel()]
                numeric = [finite_diff_gradient(lambda v: pool_forward(v, spec, h), y).ravel()]
                for pname, value in spec.parameters().items():
                    def f(v, pname=pname):
                        return pool_forward(y, spec.with_parameters(**{pname: v}), h)

                    analytic.append(res.param_grads[pname].ravel())
                    numeric.append(finite_diff_gradient(f, value).ravel())
                # one vector per case: the attention bias gradient is exactly zero
                # for a single class, so it is compared together with the frames
                worst = max(worst, relative_error(np.concatenate(analytic), np.concatenate(numeric)))
    return "pooling gradients", worst < tol, f"max relative error {worst:.2e}"


def check_threshold_law(trials: int = 200) -> CheckResult:
    rng = np.random.default_rng(1)
    bad = 0
    for _ in range(trials):
        n = rng.uniform(0.05, 8.0)
        y = rng.uniform(0.01, 1.0, size=rng.integers(2, 30))
        spec = PoolingSpec.create("power", n_init=n)
        res = pool_backward(y, spec)
        theta = n / (n + 1.0)
        margin = y - theta * res.clip_prob
        decided = np.abs(margin) > 1e-9
        bad += int(np.sum(np.sign(res.frame_grads[decided]) != np.sign(margin[decided])))
    return "threshold law", bad == 0, f"{bad} sign mismatches"


def check_model_gradients(tol: float = 1e-4) -> CheckResult:
    cfg = ModelConfig(input_dim=3, num_classes=2, hidden_dims=(4,), context_radius=1, seed=3)
    params = init_params(cfg)
    rng = RngStream(3, "selfcheck").generator
    x = rng.normal(size=(2, 6, 3))
    xt = x + 0.1 * rng.normal(size=x.shape)
    targets = [FrameTargets.strong((rng.uniform(size=(6, 2)) > 0.5).astype(float)), FrameTargets.weak(np.array([1.0, 0.0]))]
    weights = LossWeights()
    teacher = forward(xt, params)
    worst = 0.0
    for phase in ("classification", "confidence"):

        def loss(flat, phase=phase):
            p = params.from_flat(flat)
            return stage1_loss(forward(x, p), teacher, targets, 3, weights, phase).total

        bundle = forward(x, params)
        sl = stage1_loss(bundle, teacher, targets, 3, weights, phase)
        grads = backward(x, params, bundle, sl.grads)
        analytic = np.concatenate([grads[k].ravel() for k in params.arrays])
        worst = max(worst, relative_error(analytic, finite_diff_gradient(loss, params.flat())))
    return "model gradients", worst < tol, f"max relative error {worst:.2e}"


def check_ema(steps: int = 100, tol: float = 1e-10) -> CheckResult:
    cfg = ModelConfig(input_dim=2, num_classes=1, hidden_dims=(3,), context_radius=0, seed=5)
    student = init_params(cfg)
    teacher0 = init_params(ModelConfig(input_dim=2, num_classes=1, hidden_dims=(3,), context_radius=0, seed=6))
    state = TeacherState(teacher0, 0.9)
    for _ in range(steps):
        state = ema_update(state, student)
    d = 0.9**steps
    expect = d * teacher0.flat() + (1 - d) * student.flat()
    err = float(np.max(np.abs(state.params.flat() - expect)))
    return "ema closed form", err < tol, f"max abs error {err:.2e}"


def check_backend() -> CheckResult:
    from . import _fallback

    rng = np.random.default_rng(2)
    y = np.clip(rng.uniform(size=(3, 17, 4)), 1e-7, 1.0)
    n = rng.uniform(0.1, 4.0, size=4)
    clip_a, w_a = _backend.power_pool_forward(y, n)
    clip_b, w_b = _fallback.power_pool_forward(y, n)
    err = float(np.max(np.abs(clip_a - clip_b)))
    return f"kernel parity ({_backend.BACKEND})", err < 1e-12, f"max abs diff {err:.2e}"


CHECKS: tuple[Callable[[], CheckResult], ...] = (
    check_backend,
    check_pooling_gradients,
    check_threshold_law,
    check_model_gradients,
    check_ema,
)


def run_all() -> list[CheckResult]:
    return [c() for c in CHECKS]
