"""Finite-difference verification of every differentiable primitive and of
the end-to-end predictor and losses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .model import ModelConfig, STRPMNet, rollout
from .objectives import Discriminator, gan_loss_d, gan_loss_p, lp_loss
from .tensor import Tensor, grad_check

PRIMITIVE_TOL = 1e-4
MODEL_TOL = 1e-3
EPS = 1e-5


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.error < self.tolerance


def _readout(y: Tensor, rng) -> Tensor:
    """Random linear functional of ``y`` so every output element matters."""
    if y.data.ndim == 0:
        return y
    return T.sum(T.hadamard(y, Tensor(rng.standard_normal(y.shape))))


def _leaf(rng, shape, scale=1.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def primitive_checks(seed: int = 0, eps: float = EPS) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    shape = (2, 4, 6, 6)
    results = []

    def check(name: str, fn: Callable[[], Tensor], wrt: list[tuple[str, Tensor]]):
        r = np.random.default_rng(rng.integers(2**32))
        probe = fn()
        weights = Tensor(r.standard_normal(probe.shape)) if probe.data.ndim else None

        def f(_):
            y = fn()
            return y if weights is None else T.sum(T.hadamard(y, weights))

        worst = max(grad_check(f, x, eps) for _, x in wrt)
        results.append(CheckResult(name, worst, PRIMITIVE_TOL))

    x = _leaf(rng, shape)
    y = _leaf(rng, shape)
    w = _leaf(rng, (3, 4, 3, 3), 0.3)
    b = _leaf(rng, (3,), 0.3)
    check("conv2d", lambda: T.conv2d(x, w, b, stride=1, padding=1), [("x", x), ("w", w), ("b", b)])
    check("conv2d_stride2", lambda: T.conv2d(x, w, b, stride=2, padding=1), [("x", x), ("w", w), ("b", b)])
    wt = _leaf(rng, (4, 3, 4, 4), 0.3)
    xs = _leaf(rng, (2, 4, 3, 3))
    check("conv_transpose2d", lambda: T.conv_transpose2d(xs, wt, b, stride=2, padding=1),
          [("x", xs), ("w", wt), ("b", b)])
    check("sigmoid", lambda: T.sigmoid(x), [("x", x)])
    check("tanh", lambda: T.tanh(x), [("x", x)])
    check("add", lambda: T.add(x, y), [("x", x), ("y", y)])
    check("hadamard", lambda: T.hadamard(x, y), [("x", x), ("y", y)])
    check("scale", lambda: T.scale(x, -1.7), [("x", x)])
    check("concat_channels", lambda: T.concat_channels([x, y]), [("x", x), ("y", y)])
    check("concat_batch", lambda: T.concat_batch([x, y]), [("x", x), ("y", y)])
    pos = Tensor(rng.uniform(0.5, 2.0, shape), requires_grad=True)
    check("log", lambda: T.log(pos), [("x", pos)])
    mid = Tensor(rng.uniform(0.05, 0.95, shape), requires_grad=True)
    check("clamp", lambda: T.clamp(mid, 0.0, 1.0), [("x", mid)])
    check("global_avg_pool", lambda: T.global_avg_pool(x), [("x", x)])
    check("sum", lambda: T.sum(x), [("x", x)])
    check("mean", lambda: T.mean(x), [("x", x)])
    check("mse", lambda: T.mse(x, y), [("x", x), ("y", y)])
    check("shared_subexpression", lambda: T.hadamard(T.tanh(x), T.add(T.tanh(x), x)), [("x", x)])
    return results


def _sample_indices(rng, size: int, k: int) -> list[int]:
    return list(rng.choice(size, size=min(k, size), replace=False))


def model_checks(base: ModelConfig | None = None, seed: int = 0, eps: float = EPS,
                 per_param: int = 4) -> list[CheckResult]:
    """End-to-end checks on a 2-layer, 4-channel predictor over 8x8 frames."""
    base = base or ModelConfig()
    cfg = base.replace(layers=2, hidden=4, tau=min(base.tau, 2), theta=min(base.theta, 2), disc_layers=2, k_tap=-1)
    rng = np.random.default_rng(seed)
    net = STRPMNet(cfg, seed)
    context = [Tensor(rng.uniform(0, 1, (1, cfg.in_channels, 8, 8))) for _ in range(3)]
    target = Tensor(rng.uniform(0, 1, (1, cfg.in_channels, 8, 8)))

    def loss(_):
        return T.mse(rollout(net, context, 1)[0], target)

    results = []
    worst = 0.0
    for x in context:
        x.requires_grad = True
        worst = max(worst, grad_check(loss, x, eps))
    for name, p in net.parameters().items():
        idx = _sample_indices(rng, p.size, per_param)
        worst = max(worst, grad_check(loss, p, eps, idx))
    results.append(CheckResult("model_rollout_mse", worst, MODEL_TOL))

    disc = Discriminator.from_config(cfg, seed + 1)
    real = [Tensor(rng.uniform(0, 1, (2, cfg.in_channels, 8, 8))) for _ in range(2)]
    fake = [Tensor(rng.uniform(0, 1, (2, cfg.in_channels, 8, 8)), requires_grad=True) for _ in range(2)]

    def disc_params_worst(fn):
        w = 0.0
        for _, p in disc.parameters().items():
            w = max(w, grad_check(fn, p, eps, _sample_indices(rng, p.size, per_param)))
        return w

    d_fn = lambda _: gan_loss_d(disc, real, fake)  # noqa: E731
    results.append(CheckResult("gan_loss_d", disc_params_worst(d_fn), MODEL_TOL))
    p_fn = lambda _: gan_loss_p(disc, fake)  # noqa: E731
    results.append(CheckResult("gan_loss_p", max(grad_check(p_fn, f, eps) for f in fake), MODEL_TOL))
    lp_fn = lambda _: lp_loss(disc, real, fake)  # noqa: E731
    results.append(CheckResult("lp_loss", max(max(grad_check(lp_fn, f, eps) for f in fake),
                                              disc_params_worst(lp_fn)), MODEL_TOL))
    return results


def run_suite(base: ModelConfig | None = None, seed: int = 0) -> list[CheckResult]:
    return primitive_checks(seed) + model_checks(base, seed)
