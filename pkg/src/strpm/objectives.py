"""Discriminator and the adversarial / learned-perceptual / combined losses."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .layers import ConvParams, Module
from .model import ModelConfig
from .tensor import Tensor

PROB_EPS = 1e-7


class Discriminator(Module):
    """Stride-2 conv stack with tanh, global average pooling and a linear head.

    ``k_tap`` selects the layer whose (post-tanh) activation is returned as
    the perceptual feature map; negative values index from the deepest layer.
    """

    _children = ("convs", "head")

    def __init__(self, in_channels: int = 1, width: int = 16, n_layers: int = 4, k_tap: int = -1,
                 seed: int | None = 0):
        if not -n_layers <= k_tap < n_layers:
            raise ValueError(f"k_tap={k_tap} out of range for {n_layers} layers")
        rng = None if seed is None else np.random.default_rng(seed)
        self.width, self.n_layers = width, n_layers
        self.k_tap = k_tap % n_layers
        self.convs = [ConvParams(in_channels if i == 0 else width, width, 4, 2, 1, rng=rng)
                      for i in range(n_layers)]
        self.head = ConvParams(width, 1, 1, rng=rng)

    @classmethod
    def from_config(cls, cfg: ModelConfig, seed: int | None = 0) -> "Discriminator":
        return cls(cfg.in_channels, cfg.hidden, cfg.disc_layers, cfg.k_tap, seed)

    def __call__(self, frame: Tensor) -> tuple[Tensor, Tensor]:
        return disc_forward(self, frame)

    def features(self, frame: Tensor) -> Tensor:
        x = frame
        for i, conv in enumerate(self.convs):
            x = T.tanh(conv(x))
            if i == self.k_tap:
                return x
        raise AssertionError("unreachable")


def disc_forward(D: Discriminator, frame: Tensor) -> tuple[Tensor, Tensor]:
    """Return ``(probability (n,1,1,1), tap feature map)``."""
    if frame.data.ndim != 4 or frame.shape[1] != D.convs[0].in_c:
        raise ValueError(f"discriminator got frame of shape {frame.shape}")
    x = frame
    tap = None
    for i, conv in enumerate(D.convs):
        x = T.tanh(conv(x))
        if i == D.k_tap:
            tap = x
    prob = T.sigmoid(D.head(T.global_avg_pool(x)))
    return prob, tap


def _probs(D, frames: Sequence[Tensor]) -> tuple[Tensor, int]:
    n = frames[0].shape[0]
    prob, _ = D(T.concat_batch(list(frames)))
    return T.clamp(prob, PROB_EPS, 1.0 - PROB_EPS), n


def gan_loss_d(D, real: Sequence[Tensor], fake: Sequence[Tensor]) -> Tensor:
    """-sum_t mean_batch[log D(v_t) + log(1 - D(v̂_t))], fakes detached."""
    if len(real) != len(fake):
        raise ValueError(f"{len(real)} real frames vs {len(fake)} fake frames")
    if not real:
        raise ValueError("no frames")
    p_real, n = _probs(D, real)
    p_fake, _ = _probs(D, [f.detach() for f in fake])
    total = T.sum(T.log(p_real)) + T.sum(T.log(1.0 - p_fake))
    return T.scale(total, -1.0 / n)


def gan_loss_p(D, fake: Sequence[Tensor]) -> Tensor:
    """-sum_t mean_batch log D(v̂_t); gradients flow into the predictor."""
    if not fake:
        raise ValueError("no frames")
    p_fake, n = _probs(D, fake)
    return T.scale(T.sum(T.log(p_fake)), -1.0 / n)


def lp_loss(D, real: Sequence[Tensor], fake: Sequence[Tensor]) -> Tensor:
    """Sum over time of the MSE between tap features of real and predicted frames."""
    if len(real) != len(fake):
        raise ValueError(f"{len(real)} real frames vs {len(fake)} fake frames")
    if not real:
        raise ValueError("no frames")
    total = None
    for v, v_hat in zip(real, fake):
        term = T.mse(D(v)[1], D(v_hat)[1])
        total = term if total is None else total + term
    return total


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.01
    lambda2: float = 0.001

    def __post_init__(self):
        for v in (self.lambda1, self.lambda2):
            if not math.isfinite(v) or v < 0:
                raise ValueError("loss weights must be finite and non-negative")


def predictor_loss(mse_term, lp_term, gan_term, w: LossWeights):
    """mse + lambda1 * lp + lambda2 * gan. Works on floats and on tensors."""
    for term in (mse_term, lp_term, gan_term):
        value = term.data if isinstance(term, Tensor) else term
        if not np.all(np.isfinite(value)):
            raise ValueError("predictor_loss got a non-finite term")
    total, const = None, 0.0
    for term, lam in ((mse_term, 1.0), (lp_term, w.lambda1), (gan_term, w.lambda2)):
        if isinstance(term, Tensor):
            if lam != 0.0:
                scaled = term if lam == 1.0 else T.scale(term, lam)
                total = scaled if total is None else total + scaled
        else:
            const += lam * term
    if total is None:
        return const
    return total if const == 0.0 else T.add_scalar(total, const)
