"""Training loop, evaluation, ablation harness and feature dumps."""

from __future__ import annotations

import csv
import time
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint
from .data import VideoSequence, batch_iter, enumerate_windows, stack_windows, write_pgm
from .metrics import perceptual_proxy_per_sample, psnr_per_sample
from .model import ModelConfig, STRPMNet, count_flops, count_params, network_step, rollout, teacher_forced
from .objectives import Discriminator, LossWeights, gan_loss_d, gan_loss_p, lp_loss, predictor_loss
from .optim import Adam
from .tensor import Tensor

LOSS_MODES = ("mse", "mse+gan", "mse+gan+lp")
LOG_FIELDS = ("step", "mse", "lp", "gan_p", "gan_d")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainSettings:
    steps: int = 500
    loss_mode: str = "mse"
    batch: int = 8
    context: int = 4
    seed: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8

    def __post_init__(self):
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")
        if self.steps < 1 or self.batch < 1 or self.context < 1:
            raise ValueError("steps, batch and context must be >= 1")


def build_models(ckpt: Checkpoint) -> tuple[STRPMNet, Discriminator]:
    net = STRPMNet(ckpt.config, seed=None)
    disc = Discriminator.from_config(ckpt.config, seed=None)
    net.load_arrays(ckpt.group("P"))
    disc.load_arrays(ckpt.group("D"))
    return net, disc


def init_models(config: ModelConfig, seed: int) -> tuple[STRPMNet, Discriminator]:
    net_seed, disc_seed = np.random.SeedSequence(seed).generate_state(2)
    return STRPMNet(config, int(net_seed)), Discriminator.from_config(config, int(disc_seed))


def make_checkpoint(net: STRPMNet, disc: Discriminator, opt_p: Adam, opt_d: Adam, meta: dict) -> Checkpoint:
    arrays = OrderedDict()
    for prefix, module in (("P", net), ("D", disc)):
        for name, arr in module.state_arrays().items():
            arrays[f"{prefix}.{name}"] = arr
    arrays.update(opt_p.state_arrays("adam_p"))
    arrays.update(opt_d.state_arrays("adam_d"))
    meta = dict(meta, adam_p_step=opt_p.step_count, adam_d_step=opt_d.step_count)
    return Checkpoint(net.config, arrays, meta)


def _sum_terms(terms):
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total


def train(config: ModelConfig, dataset: Sequence[VideoSequence], settings: TrainSettings = TrainSettings(),
          init: Checkpoint | None = None, meta: dict | None = None) -> tuple[Checkpoint, list[dict]]:
    """Teacher-forced next-frame training; returns the final checkpoint and a per-step loss log.

    Each step updates the predictor on mse + lambda1*lp + lambda2*gan_p
    (terms absent from ``loss_mode`` are zero) and then, when the GAN is
    active, takes one discriminator step on the detached predictions.
    """
    s = settings
    weights = LossWeights(config.lambda1, config.lambda2)
    use_gan = "gan" in s.loss_mode
    use_lp = "lp" in s.loss_mode
    if init is not None:
        init.check_compatible(config)
        net, disc = build_models(init)
    else:
        net, disc = init_models(config, s.seed)
    adam_kw = dict(lr=s.lr, beta1=s.beta1, beta2=s.beta2, eps=s.eps_adam)
    opt_p = Adam(net.parameters(), **adam_kw)
    opt_d = Adam(disc.parameters(), **adam_kw)
    if init is not None:
        opt_p.load_state(init.arrays, "adam_p", init.meta.get("adam_p_step", 0))
        opt_d.load_state(init.arrays, "adam_d", init.meta.get("adam_d_step", 0))

    batches = batch_iter(dataset, s.batch, s.context, 1, seed=s.seed)
    log = []
    for step in range(1, s.steps + 1):
        ctx, tgt = next(batches)
        clip = np.concatenate([ctx, tgt], axis=1)
        real = [Tensor(clip[:, t]) for t in range(1, clip.shape[1])]

        opt_p.zero_grad()
        opt_d.zero_grad()
        with T.Tape() as tape:
            preds = teacher_forced(net, clip)
            mse_term = _sum_terms([T.mse(p, v) for p, v in zip(preds, real)])
            lp_term = lp_loss(disc, real, preds) if use_lp else 0.0
            gan_term = gan_loss_p(disc, preds) if use_gan else 0.0
            row = {"step": step, "mse": mse_term.item(),
                   "lp": lp_term.item() if use_lp else 0.0,
                   "gan_p": gan_term.item() if use_gan else 0.0,
                   "gan_d": 0.0}
            if not all(np.isfinite(row[k]) for k in LOG_FIELDS[1:4]):
                raise TrainingDiverged(f"non-finite loss at step {step}")
            total = predictor_loss(mse_term, lp_term, gan_term, weights)
        tape.backward(total)
        opt_p.step()

        if use_gan:
            opt_d.zero_grad()
            with T.Tape() as tape:
                d_loss = gan_loss_d(disc, real, preds)
            row["gan_d"] = d_loss.item()
            if not np.isfinite(row["gan_d"]):
                raise TrainingDiverged(f"non-finite discriminator loss at step {step}")
            tape.backward(d_loss)
            opt_d.step()
        log.append(row)

    meta = dict(meta or {}, seed=s.seed, loss_mode=s.loss_mode, lr=s.lr, beta1=s.beta1,
                beta2=s.beta2, eps_adam=s.eps_adam, batch=s.batch, context=s.context)
    return make_checkpoint(net, disc, opt_p, opt_d, meta), log


def write_loss_log(log: Sequence[dict], path) -> None:
    """Append rows to a CSV loss log, writing the header for a new file."""
    path = Path(path)
    fresh = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        if fresh:
            writer.writerow(LOG_FIELDS)
        for row in log:
            writer.writerow([row["step"]] + [repr(float(row[k])) for k in LOG_FIELDS[1:]])


# --------------------------------------------------------------------------
# evaluation

@dataclass
class EvalReport:
    psnr: list[float]
    proxy: list[float]
    params: int
    flops: int
    seconds_per_sample: float
    n_samples: int = 0

    def table(self) -> str:
        lines = [f"{'step':>4}  {'psnr_db':>10}  {'proxy':>12}"]
        for i, (p, q) in enumerate(zip(self.psnr, self.proxy), start=1):
            lines.append(f"{i:>4}  {p:>10.4f}  {q:>12.6e}")
        lines.append(f"params {self.params}  flops {self.flops}  "
                     f"samples {self.n_samples}  sec/sample {self.seconds_per_sample:.6f}")
        return "\n".join(lines)


def _check_dataset(config: ModelConfig, dataset: Sequence[VideoSequence]) -> tuple[int, int, int]:
    shapes = {seq.frames.shape[1:] for seq in dataset}
    if len(shapes) != 1:
        raise ValueError(f"sequences disagree in frame shape: {sorted(shapes)}")
    c, h, w = shapes.pop()
    if c != config.in_channels:
        raise ValueError(f"dataset has {c} channels, checkpoint config expects {config.in_channels}")
    if h % config.downsample or w % config.downsample:
        raise ValueError(f"frame size {h}x{w} incompatible with downsample {config.downsample}")
    return c, h, w


def _eval_chunk(net, disc, ctx, tgt, horizon):
    preds = rollout(net, ctx, horizon)
    psnr_rows, proxy_rows = [], []
    for t, pred in enumerate(preds):
        clamped = np.clip(pred.data, 0.0, 1.0)
        truth = tgt[:, t]
        psnr_rows.append(psnr_per_sample(clamped, truth))
        proxy_rows.append(perceptual_proxy_per_sample(disc, clamped, truth))
    return np.stack(psnr_rows, 1), np.stack(proxy_rows, 1)


def evaluate(checkpoint: Checkpoint, dataset: Sequence[VideoSequence], context: int = 4, horizon: int = 1,
             chunk: int = 16, threads: int = 1) -> EvalReport:
    """Autoregressive rollout over every window; per-step mean PSNR and proxy."""
    frame_shape = _check_dataset(checkpoint.config, dataset)
    net, disc = build_models(checkpoint)
    windows = enumerate_windows(dataset, context, horizon)
    pieces = [windows[i:i + chunk] for i in range(0, len(windows), chunk)]

    def job(piece):
        ctx, tgt = stack_windows(dataset, piece, context, horizon)
        return _eval_chunk(net, disc, ctx, tgt, horizon)

    start = time.perf_counter()
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(job, pieces))
    else:
        results = [job(p) for p in pieces]
    elapsed = time.perf_counter() - start
    psnr_all = np.concatenate([r[0] for r in results])
    proxy_all = np.concatenate([r[1] for r in results])
    return EvalReport(
        psnr=[float(v) for v in psnr_all.mean(axis=0)],
        proxy=[float(v) for v in proxy_all.mean(axis=0)],
        params=count_params(checkpoint.config),
        flops=count_flops(checkpoint.config, frame_shape),
        seconds_per_sample=elapsed / len(windows),
        n_samples=len(windows),
    )


# --------------------------------------------------------------------------
# ablation

ABLATION_VARIANTS = OrderedDict([
    ("RPM", dict(tau=5, theta=5)),
    ("RPM w/o residual", dict(tau=5, theta=5, residual_enabled=False)),
    ("RPM w/o gates", dict(tau=5, theta=5, residual_gates=False)),
    ("RPM(tau=1,theta=1)", dict(tau=1, theta=1)),
    ("RPM(tau=5,theta=1)", dict(tau=5, theta=1)),
    ("RPM(tau=1,theta=5)", dict(tau=1, theta=5)),
    ("single-encoder", dict(tau=5, theta=5, shared_encoder=True)),
])


def _variant_key(name: str) -> str:
    key = name.replace("τ", "tau").replace("θ", "theta").replace(" ", "").lower()
    return key.replace("(nosted)", "")


_VARIANT_LOOKUP = {_variant_key(k): k for k in ABLATION_VARIANTS}


def resolve_variant(name: str) -> str:
    try:
        return _VARIANT_LOOKUP[_variant_key(name)]
    except KeyError:
        raise ValueError(f"unknown ablation variant {name!r}; known: {list(ABLATION_VARIANTS)}") from None


def variant_config(base: ModelConfig, name: str) -> ModelConfig:
    # theta=5 needs at least five layers; every variant gets the same depth
    layers = max(base.layers, 5)
    return base.replace(layers=layers, **ABLATION_VARIANTS[resolve_variant(name)])


@dataclass
class AblationRow:
    name: str
    psnr: float
    proxy: float
    params: int
    flops: int


def ablate(dataset: Sequence[VideoSequence], variants: Sequence[str], base: ModelConfig,
           settings: TrainSettings = TrainSettings(steps=300), horizon: int = 1,
           train_variants: bool = True) -> list[AblationRow]:
    """Train each variant under MSE loss with identical seed and budget; tabulate metrics and costs."""
    names = [resolve_variant(v) for v in variants]
    settings = TrainSettings(**{**settings.__dict__, "loss_mode": "mse"})
    frame_shape = dataset[0].frames.shape[1:]
    rows = []
    for name in names:
        cfg = variant_config(base, name)
        psnr_v = proxy_v = float("nan")
        if train_variants:
            ckpt, _ = train(cfg, dataset, settings)
            report = evaluate(ckpt, dataset, settings.context, horizon)
            psnr_v, proxy_v = float(np.mean(report.psnr)), float(np.mean(report.proxy))
        rows.append(AblationRow(name, psnr_v, proxy_v, count_params(cfg), count_flops(cfg, frame_shape)))
    return rows


def format_ablation(rows: Sequence[AblationRow]) -> str:
    lines = [f"{'variant':<20}  {'psnr_db':>9}  {'proxy':>11}  {'params':>11}  {'flops':>14}"]
    for r in rows:
        lines.append(f"{r.name:<20}  {r.psnr:>9.4f}  {r.proxy:>11.4e}  {r.params:>11d}  {r.flops:>14d}")
    return "\n".join(lines)


# --------------------------------------------------------------------------
# feature dumps

DUMP_NAMES = ("temporal", "spatial", "stif", "strf")


def _heatmap(x: Tensor) -> np.ndarray:
    return x.data[0].mean(axis=0)


def _normalize(m: np.ndarray) -> tuple[np.ndarray, float, float]:
    lo, hi = float(m.min()), float(m.max())
    if hi > lo:
        return (m - lo) / (hi - lo), lo, hi
    return np.zeros_like(m), lo, hi


def dump_features(checkpoint: Checkpoint, sequence: VideoSequence, layer: int, step: int, out_dir) -> dict:
    """Write channel-mean heatmaps of T_E, S_E, STIF and STRF at (layer, step).

    ``layer`` and ``step`` are 1-based; step t means frame v_t was just
    consumed. Returns the un-normalised heatmaps and written paths.
    """
    cfg = checkpoint.config
    if not 1 <= layer <= cfg.layers:
        raise ValueError(f"layer {layer} out of range 1..{cfg.layers}")
    if not 1 <= step <= len(sequence):
        raise ValueError(f"step {step} out of range 1..{len(sequence)}")
    net, _ = build_models(checkpoint)
    _, _, h, w = sequence.frame(0).shape
    states = net.initial_states(1, h, w)
    trace = []
    for t in range(step):
        trace = []
        _, states = network_step(net, Tensor(sequence.frame(t)), states, trace=trace)
    out = trace[layer - 1]
    stif = out.stif
    if stif is None:
        stif = net.cells[layer - 1].w_stif(T.concat_channels([out.t_e, out.s_e]))
    maps = OrderedDict(zip(DUMP_NAMES, (_heatmap(out.t_e), _heatmap(out.s_e), _heatmap(stif), _heatmap(out.strf))))

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = f"L{layer}_t{step}"
    paths, ranges = [], []
    for name, m in maps.items():
        img, lo, hi = _normalize(m)
        p = out_dir / f"{stem}_{name}.pgm"
        write_pgm(img, p)
        paths.append(p)
        ranges.append(f"{name} {lo!r} {hi!r}")
    sidecar = out_dir / f"{stem}_ranges.txt"
    sidecar.write_text("\n".join(ranges) + "\n", encoding="utf-8")
    return {"maps": maps, "paths": paths, "sidecar": sidecar}


def read_ranges(path) -> dict[str, tuple[float, float]]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        name, lo, hi = line.split()
        out[name] = (float(lo), float(hi))
    return out
