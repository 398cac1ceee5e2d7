"""The STRPM predictor: spatiotemporal encoders/decoders around a stack of
residual predictive memory (RPM) cells."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .layers import ConvParams, Module
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 4
    hidden: int = 16
    kernel: int = 5
    tau: int = 2
    theta: int = 2
    downsample: int = 4
    in_channels: int = 1
    residual_enabled: bool = True
    # alternative "w/o residual" reading: drop the R_T/R_S gates
    residual_gates: bool = True
    # ablation without separate encoder/decoder pairs
    shared_encoder: bool = False
    lambda1: float = 0.01
    lambda2: float = 0.001
    disc_layers: int = 4
    k_tap: int = -1

    def __post_init__(self):
        for name in ("layers", "hidden", "kernel", "tau", "theta", "downsample", "in_channels", "disc_layers"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.kernel % 2 == 0:
            raise ValueError("kernel must be odd for same padding")
        if self.downsample & (self.downsample - 1):
            raise ValueError("downsample must be a power of two")
        if self.theta > self.layers:
            raise ValueError(f"theta={self.theta} exceeds layers={self.layers}")
        if not (np.isfinite(self.lambda1) and np.isfinite(self.lambda2)) or self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda1 and lambda2 must be finite and non-negative")
        if not -self.disc_layers <= self.k_tap < self.disc_layers:
            raise ValueError(f"k_tap={self.k_tap} out of range for {self.disc_layers} discriminator layers")

    @property
    def n_down(self) -> int:
        return int(self.downsample).bit_length() - 1

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


DESK = ModelConfig()
FULL_SCALE = ModelConfig(layers=16, hidden=128, kernel=5, tau=5, theta=5)


# --------------------------------------------------------------------------
# encoders / decoders

class ConvStack(Module):
    """Convolutions with tanh between consecutive layers (none after the last)."""

    _children = ("convs",)

    def __init__(self, convs: list[ConvParams]):
        self.convs = convs

    def __call__(self, x: Tensor) -> Tensor:
        last = len(self.convs) - 1
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < last:
                x = T.tanh(x)
        return x


def make_encoder(cfg: ModelConfig, rng) -> ConvStack:
    c, h = cfg.in_channels, cfg.hidden
    if cfg.n_down == 0:
        return ConvStack([ConvParams(c, h, 3, 1, 1, rng=rng)])
    convs = [ConvParams(c, h, 4, 2, 1, rng=rng)]
    convs += [ConvParams(h, h, 4, 2, 1, rng=rng) for _ in range(cfg.n_down - 1)]
    return ConvStack(convs)


def make_decoder(cfg: ModelConfig, rng) -> ConvStack:
    c, h = cfg.in_channels, cfg.hidden
    if cfg.n_down == 0:
        return ConvStack([ConvParams(h, c, 3, 1, 1, rng=rng)])
    convs = [ConvParams(h, h, 4, 2, 1, transposed=True, rng=rng) for _ in range(cfg.n_down - 1)]
    convs.append(ConvParams(h, c, 4, 2, 1, transposed=True, rng=rng))
    return ConvStack(convs)


# --------------------------------------------------------------------------
# RPM cell

class Attention(Module):
    """Merges ``m`` same-shaped states: concat, 1x1 conv, tanh, 1x1 conv."""

    _children = ("conv1", "conv2")

    def __init__(self, m: int, hidden: int, rng):
        self.m = m
        self.conv1 = ConvParams(m * hidden, hidden, 1, rng=rng)
        self.conv2 = ConvParams(hidden, hidden, 1, rng=rng)

    def __call__(self, states: Sequence[Tensor]) -> Tensor:
        return attention_merge(self, states)


def attention_merge(att: Attention, states: Sequence[Tensor]) -> Tensor:
    states = list(states)
    if not states:
        raise ValueError("attention_merge needs at least one state")
    if len(states) != att.m:
        raise ValueError(f"attention expects {att.m} states, got {len(states)}")
    for s in states[1:]:
        if s.shape != states[0].shape:
            raise ValueError(f"attention states disagree in shape: {s.shape} vs {states[0].shape}")
    return att.conv2(T.tanh(att.conv1(T.concat_channels(states))))


class RPMCell(Module):
    _children = ("w_t", "w_s", "w_o", "w_h", "w_m", "w_os", "w_ot", "w_strf", "w_stif", "att_t", "att_s")

    def __init__(self, cfg: ModelConfig, rng):
        h, k = cfg.hidden, cfg.kernel
        pad = k // 2
        for name in ("w_t", "w_s", "w_o", "w_h", "w_m", "w_os", "w_ot"):
            setattr(self, name, ConvParams(h, h, k, 1, pad, rng=rng))
        self.w_strf = ConvParams(2 * h, h, 1, rng=rng)
        self.w_stif = ConvParams(2 * h, h, 1, rng=rng)
        self.att_t = Attention(cfg.tau, h, rng)
        self.att_s = Attention(cfg.theta, h, rng)


@dataclass
class RPMLayerState:
    """Recurrent state of one layer.

    ``temporal`` is the ring buffer of the last tau temporal states, oldest
    first. ``spatial`` is the stack of theta spatial states this layer
    attended to at its latest step. ``spatial_out`` is the layer's own
    latest spatial state.
    """

    hidden: Tensor
    temporal: list[Tensor]
    spatial: list[Tensor]
    spatial_out: Tensor


@dataclass
class CellOutput:
    hidden: Tensor
    temporal: Tensor
    spatial: Tensor
    r_t: Tensor | None
    r_s: Tensor | None
    r_o: Tensor
    stif: Tensor | None
    strf: Tensor
    t_e: Tensor = field(repr=False, default=None)
    s_e: Tensor = field(repr=False, default=None)


def rpm_step(
    cell: RPMCell,
    t_e: Tensor,
    s_e: Tensor,
    o_e: Tensor,
    state: RPMLayerState,
    s_below: Tensor,
    lower_spatial: Sequence[Tensor] = (),
    residual_enabled: bool = True,
    residual_gates: bool = True,
) -> CellOutput:
    """One RPM update at layer k, time t.

    ``s_below`` is S_t^{k-1}; ``lower_spatial`` holds the theta-1 states
    below it (oldest first), so the spatial attention sees theta states
    ending with ``s_below``.
    """
    ref = t_e.shape
    for name, x in (("S_E", s_e), ("O_E", o_e), ("H", state.hidden), ("S_below", s_below)):
        if x.shape != ref:
            raise ValueError(f"rpm_step: {name} has shape {x.shape}, expected {ref}")
    if len(state.temporal) != cell.att_t.m:
        raise ValueError(f"temporal buffer holds {len(state.temporal)} states, expected {cell.att_t.m}")

    tf, sf, of = cell.w_t(t_e), cell.w_s(s_e), cell.w_o(o_e)
    hf, mf = cell.w_h(state.hidden), cell.w_m(s_below)

    t_pre = tf + hf
    s_pre = sf + mf
    t_new = T.tanh(t_pre) + cell.att_t(state.temporal)
    s_new = T.tanh(s_pre) + cell.att_s(list(lower_spatial) + [s_below])
    r_t = r_s = None
    if residual_gates:
        r_t, r_s = T.sigmoid(t_pre), T.sigmoid(s_pre)
        t_new = r_t * t_new
        s_new = r_s * s_new

    r_o = T.sigmoid(of + hf + cell.w_os(s_new) + cell.w_ot(t_new))
    strf = r_o * T.tanh(cell.w_strf(T.concat_channels([t_new, s_new])))
    stif = None
    hidden = strf
    if residual_enabled:
        stif = cell.w_stif(T.concat_channels([t_e, s_e]))
        hidden = stif + strf
    return CellOutput(hidden, t_new, s_new, r_t, r_s, r_o, stif, strf, t_e, s_e)


# --------------------------------------------------------------------------
# full network

class STRPMNet(Module):
    def __init__(self, cfg: ModelConfig, seed: int | None = 0):
        """Build with uniform(+-sqrt(1/fan_in)) weights; ``seed=None`` gives all zeros."""
        self.config = cfg
        rng = None if seed is None else np.random.default_rng(seed)
        if cfg.shared_encoder:
            self.enc = make_encoder(cfg, rng)
            self.dec = make_decoder(cfg, rng)
            self._children = ("enc", "dec", "compose", "cells")
        else:
            self.enc_t, self.enc_s, self.enc_o = (make_encoder(cfg, rng) for _ in range(3))
            self.dec_t, self.dec_s, self.dec_o = (make_decoder(cfg, rng) for _ in range(3))
            self._children = ("enc_t", "enc_s", "enc_o", "dec_t", "dec_s", "dec_o", "compose", "cells")
        self.compose = ConvParams(2 * cfg.in_channels, cfg.in_channels, 1, rng=rng)
        self.cells = [RPMCell(cfg, rng) for _ in range(cfg.layers)]

    def encode(self, frame: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        cfg = self.config
        _, c, h, w = frame.shape
        if c != cfg.in_channels:
            raise ValueError(f"frame has {c} channels, model expects {cfg.in_channels}")
        if h % cfg.downsample or w % cfg.downsample:
            raise ValueError(f"frame size {h}x{w} not divisible by downsample factor {cfg.downsample}")
        if cfg.shared_encoder:
            f = self.enc(frame)
            return f, f, f
        return self.enc_t(frame), self.enc_s(frame), self.enc_o(frame)

    def decode(self, t_p: Tensor, s_p: Tensor, o_p: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        if self.config.shared_encoder:
            return self.dec(t_p), self.dec(s_p), self.dec(o_p)
        return self.dec_t(t_p), self.dec_s(s_p), self.dec_o(o_p)

    def initial_states(self, batch: int, height: int, width: int) -> list[RPMLayerState]:
        cfg = self.config
        shape = (batch, cfg.hidden, height // cfg.downsample, width // cfg.downsample)
        z = T.zeros(shape)
        return [RPMLayerState(z, [z] * cfg.tau, [z] * cfg.theta, z) for _ in range(cfg.layers)]


def compose_frame(compose: ConvParams, t_d: Tensor, s_d: Tensor, o_d: Tensor) -> Tensor:
    """Raw predicted frame ``O_D * tanh(W_1x1 * [T_D, S_D])`` (unclamped)."""
    if not (t_d.shape == s_d.shape == o_d.shape):
        raise ValueError(f"compose_frame: shapes {t_d.shape}, {s_d.shape}, {o_d.shape} differ")
    return o_d * T.tanh(compose(T.concat_channels([t_d, s_d])))


def clamp_frame(frame: Tensor) -> Tensor:
    return T.clamp(frame, 0.0, 1.0)


def network_step(model: STRPMNet, frame: Tensor, states: list[RPMLayerState],
                 trace: list | None = None) -> tuple[Tensor, list[RPMLayerState]]:
    """Consume frame v_t, return the raw prediction of v_{t+1} and new states.

    When ``trace`` is a list, each layer's :class:`CellOutput` is appended.
    """
    cfg = model.config
    if len(states) != cfg.layers:
        raise ValueError(f"expected {cfg.layers} layer states, got {len(states)}")
    t_e, s_e, o_e = model.encode(frame)
    if states[0].hidden.shape != t_e.shape:
        raise ValueError(f"state shape {states[0].hidden.shape} does not match features {t_e.shape}")
    zero = T.zeros(t_e.shape)
    # spatial_now[j] is S_t^j; S_t^0 is the top layer's state from t-1
    spatial_now = [states[-1].spatial_out]
    new_states = []
    out = None
    for k, (cell, st) in enumerate(zip(model.cells, states), start=1):
        lower = [spatial_now[j] if j >= 0 else zero for j in range(k - cfg.theta, k - 1)]
        s_below = spatial_now[k - 1]
        out = rpm_step(cell, t_e, s_e, o_e, st, s_below, lower,
                       cfg.residual_enabled, cfg.residual_gates)
        if trace is not None:
            trace.append(out)
        new_states.append(RPMLayerState(
            hidden=out.hidden,
            temporal=st.temporal[1:] + [out.temporal],
            spatial=lower + [s_below],
            spatial_out=out.spatial,
        ))
        spatial_now.append(out.spatial)
        t_e = s_e = o_e = out.hidden
    t_d, s_d, o_d = model.decode(out.temporal, out.spatial, out.hidden)
    return compose_frame(model.compose, t_d, s_d, o_d), new_states


def _as_frames(frames) -> list[Tensor]:
    if isinstance(frames, Tensor):
        raise TypeError("pass a sequence of frames, not a single tensor")
    if isinstance(frames, np.ndarray):
        # (n, time, c, h, w)
        return [Tensor(frames[:, t]) for t in range(frames.shape[1])]
    return [f if isinstance(f, Tensor) else Tensor(f) for f in frames]


def teacher_forced(model: STRPMNet, frames) -> list[Tensor]:
    """Raw predictions v̂_2..v̂_T from ground-truth inputs v_1..v_{T-1}."""
    frames = _as_frames(frames)
    n, _, h, w = frames[0].shape
    states = model.initial_states(n, h, w)
    preds = []
    for frame in frames[:-1]:
        pred, states = network_step(model, frame, states)
        preds.append(pred)
    return preds


def rollout(model: STRPMNet, context, horizon: int) -> list[Tensor]:
    """Warm up on the context, then predict ``horizon`` frames autoregressively.

    Returns raw predictions; each is clamped to [0, 1] before being fed back.
    """
    context = _as_frames(context)
    if not context:
        raise ValueError("rollout needs at least one context frame")
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    n, _, h, w = context[0].shape
    states = model.initial_states(n, h, w)
    pred = None
    for frame in context:
        pred, states = network_step(model, frame, states)
    preds = [pred]
    for _ in range(horizon - 1):
        pred, states = network_step(model, clamp_frame(pred), states)
        preds.append(pred)
    return preds


# --------------------------------------------------------------------------
# accounting

def _conv_p(i: int, o: int, k: int) -> int:
    return o * i * k * k + o


def count_params(model_or_config) -> int:
    """Exact number of weight elements, computed from the configuration alone."""
    cfg = model_or_config.config if isinstance(model_or_config, STRPMNet) else model_or_config
    c, h, k = cfg.in_channels, cfg.hidden, cfg.kernel
    if cfg.n_down == 0:
        enc = _conv_p(c, h, 3)
        dec = _conv_p(h, c, 3)
    else:
        enc = _conv_p(c, h, 4) + (cfg.n_down - 1) * _conv_p(h, h, 4)
        dec = (cfg.n_down - 1) * _conv_p(h, h, 4) + _conv_p(h, c, 4)
    pairs = 1 if cfg.shared_encoder else 3
    att = lambda m: _conv_p(m * h, h, 1) + _conv_p(h, h, 1)  # noqa: E731
    cell = 7 * _conv_p(h, h, k) + 2 * _conv_p(2 * h, h, 1) + att(cfg.tau) + att(cfg.theta)
    return pairs * (enc + dec) + _conv_p(2 * c, c, 1) + cfg.layers * cell


def count_flops(model_or_config, frame_shape: tuple[int, int, int]) -> int:
    """FLOPs to predict one frame for one sample (one network step).

    Convolutions cost 2 per multiply-accumulate plus one add per output
    element for the bias; every element-wise add, product, sigmoid and tanh
    costs one per output element; concatenation is free.
    """
    cfg = model_or_config.config if isinstance(model_or_config, STRPMNet) else model_or_config
    c, H, W = frame_shape
    ds, h, k = cfg.downsample, cfg.hidden, cfg.kernel

    def conv(i, o, kk, out_area):
        return 2 * out_area * i * o * kk * kk + out_area * o

    # encoder
    if cfg.n_down == 0:
        enc = conv(c, h, 3, H * W)
        dec = conv(h, c, 3, H * W)
    else:
        enc, dec = 0, 0
        hh, ww, ch_in = H, W, c
        for i in range(cfg.n_down):
            hh, ww = hh // 2, ww // 2
            enc += conv(ch_in, h, 4, hh * ww)
            if i < cfg.n_down - 1:
                enc += hh * ww * h  # tanh
            ch_in = h
        # transposed convs: cost counted per input element
        for i in range(cfg.n_down):
            out_c = c if i == cfg.n_down - 1 else h
            in_area = hh * ww
            hh, ww = hh * 2, ww * 2
            dec += 2 * in_area * h * out_c * 16 + hh * ww * out_c
            if i < cfg.n_down - 1:
                dec += hh * ww * h
    n_enc = 1 if cfg.shared_encoder else 3

    A = (H // ds) * (W // ds)
    e = A * h  # one element-wise op over a state
    kconv = conv(h, h, k, A)
    att = lambda m: conv(m * h, h, 1, A) + e + conv(h, h, 1, A)  # noqa: E731
    cell = 5 * kconv
    # temporal and spatial modules: pre-activation add, tanh, attention add
    cell += 3 * e + att(cfg.tau) + 3 * e + att(cfg.theta)
    if cfg.residual_gates:
        cell += 4 * e  # two sigmoids, two gating products
    cell += 2 * kconv + 4 * e  # W_os, W_ot, three adds and a sigmoid
    cell += conv(2 * h, h, 1, A) + 2 * e  # STRF: 1x1 conv, tanh, product
    if cfg.residual_enabled:
        cell += conv(2 * h, h, 1, A) + e  # STIF and the final sum
    compose = conv(2 * c, c, 1, H * W) + 2 * H * W * c
    return n_enc * enc + 3 * dec + cfg.layers * cell + compose
