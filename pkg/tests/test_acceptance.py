"""End-to-end acceptance gate.

Each test prints one ``[PASS]``/``[FAIL]`` line (repeated in the terminal
summary) before asserting, so a failing criterion is reported rather than
hidden behind the first assertion error.
"""

import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from strpm.checkpoint import load_checkpoint, save_checkpoint
from strpm.data import gen_dataset, quantize, read_pgm, write_pgm
from strpm.gradcheck import EPS, MODEL_TOL, PRIMITIVE_TOL, run_suite
from strpm.metrics import psnr
from strpm.model import (DESK, FULL_SCALE, RPMCell, RPMLayerState, STRPMNet, count_flops, count_params,
                         network_step, rollout, rpm_step)
from strpm.objectives import Discriminator, LossWeights, gan_loss_d, gan_loss_p, predictor_loss
from strpm.optim import Adam
from strpm.tensor import Tensor
from strpm.training import (TrainSettings, build_models, dump_features, evaluate, init_models,
                            make_checkpoint, read_ranges, train)


def report(number: int, title: str, checks: dict) -> bool:
    ok = all(bool(v) for v in checks.values())
    failed = [k for k, v in checks.items() if not v]
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title}"
    if failed:
        line += "  (failed: " + ", ".join(failed) + ")"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


@pytest.fixture(scope="module")
def desk_dataset():
    return gen_dataset(8, seed=0, height=32, width=32, n_objects=1, length=5)


def test_criterion_1_gradient_suite():
    start = time.perf_counter()
    results = run_suite(DESK, seed=0)
    elapsed = time.perf_counter() - start
    for r in results:
        print(f"  {r.name:<22} {r.error:.3e} < {r.tolerance:.0e}")
    prims = [r for r in results if r.tolerance == PRIMITIVE_TOL]
    model = [r for r in results if r.tolerance == MODEL_TOL]
    checks = {
        "primitives < 1e-4": bool(prims) and all(r.error < 1e-4 for r in prims),
        "end-to-end < 1e-3": any(r.name.startswith("model_rollout") for r in model)
        and all(r.error < 1e-3 for r in model),
        "eps = 1e-5": EPS == 1e-5,
        "runtime < 120 s": elapsed < 120,
    }
    assert report(1, f"gradient suite ({len(results)} checks, {elapsed:.1f} s)", checks)


def test_criterion_2_cell_identities():
    rng = np.random.default_rng(0)
    cfg = DESK.replace(layers=2, hidden=4, kernel=3)
    shape = (1, 4, 3, 3)
    rand = lambda n=1, s=1.0: Tensor(rng.standard_normal((n,) + shape[1:]) * s)  # noqa: E731

    # zeroed STRF 1x1 conv: H is STIF exactly
    cell = RPMCell(cfg, rng)
    cell.w_strf.weight.data[...] = 0
    cell.w_strf.bias.data[...] = 0
    st = RPMLayerState(rand(), [rand(), rand()], [], rand())
    out = rpm_step(cell, rand(), rand(), rand(), st, rand(), [rand()])
    stif_exact = np.array_equal(out.hidden.data, out.stif.data)

    # residual disabled: H is STRF exactly
    cell = RPMCell(cfg, rng)
    out = rpm_step(cell, rand(), rand(), rand(), st, rand(), [rand()], residual_enabled=False)
    strf_exact = out.stif is None and np.array_equal(out.hidden.data, out.strf.data)

    # zero weights: encode -> 16 steps -> decode stays zero
    zero_net = STRPMNet(DESK, seed=None)
    ctx = rng.random((2, 4, 1, 32, 32))
    preds = rollout(zero_net, ctx, 16)
    zero_prop = len(preds) == 16 and all(np.all(p.data == 0.0) for p in preds)

    # gates on 1,000 random inputs (10 random cells x batches of 100)
    in_range = True
    n_inputs = 0
    for _ in range(10):
        cell = RPMCell(cfg, rng)
        scale = float(rng.uniform(0.1, 3.0))
        st = RPMLayerState(rand(100, scale), [rand(100, scale), rand(100, scale)], [], rand(100, scale))
        out = rpm_step(cell, rand(100, scale), rand(100, scale), rand(100, scale), st,
                       rand(100, scale), [rand(100, scale)])
        n_inputs += 100
        for g in (out.r_t, out.r_s, out.r_o):
            in_range &= bool(np.all((g.data > 0.0) & (g.data < 1.0)))

    checks = {"H = STIF": stif_exact, "H = STRF": strf_exact, "zero propagation": zero_prop,
              "gates in (0,1)": in_range and n_inputs == 1000}
    assert report(2, "cell identities", checks)


def test_criterion_3_count_structure():
    start = time.perf_counter()
    checks = {}
    for label, base, frame in (("desk", DESK.replace(layers=5), (1, 32, 32)), ("full-scale", FULL_SCALE, (1, 512, 512))):
        c = {(t, s): count_params(base.replace(tau=t, theta=s)) for t in (1, 5) for s in (1, 5)}
        print(f"  {label}: (1,1)={c[1, 1]} (5,1)={c[5, 1]} (1,5)={c[1, 5]} (5,5)={c[5, 5]}")
        checks[f"{label} ordering"] = c[1, 1] < c[5, 1] == c[1, 5] < c[5, 5]
        full = count_flops(base, frame)
        no_res = count_flops(base.replace(residual_enabled=False), frame)
        print(f"  {label}: flops full={full} w/o residual={no_res}")
        checks[f"{label} flops"] = isinstance(full, int) and no_res < full
    elapsed = time.perf_counter() - start
    checks["runtime < 10 s"] = elapsed < 10
    assert report(3, f"parameter/FLOP structure ({elapsed:.3f} s)", checks)


@pytest.mark.slow
def test_criterion_4_overfit(desk_dataset):
    start = time.perf_counter()
    ckpt, log = train(DESK, desk_dataset, TrainSettings(steps=500, loss_mode="mse", seed=0))
    ev = evaluate(ckpt, desk_dataset, context=4, horizon=1)
    elapsed = time.perf_counter() - start
    first, last = log[0]["mse"], log[-1]["mse"]
    print(f"  mse step 1 {first:.6g}  step 500 {last:.6g}  ratio {last / first:.4g}")
    print(f"  training-set one-step PSNR {ev.psnr[0]:.3f} dB  runtime {elapsed:.1f} s")
    checks = {
        "500 steps": len(log) == 500,
        "final < 10% of first": last < 0.1 * first,
        "PSNR > 30 dB": ev.psnr[0] > 30.0,
        "runtime < 15 min": elapsed < 900,
    }
    assert report(4, "overfit convergence", checks)


@pytest.mark.slow
def test_criterion_5_gan_smoke(desk_dataset):
    start = time.perf_counter()
    ckpt, log = train(DESK, desk_dataset, TrainSettings(steps=100, loss_mode="mse+gan+lp", seed=0))
    terms_finite = len(log) == 100 and all(
        math.isfinite(row[k]) for row in log for k in ("mse", "lp", "gan_p", "gan_d"))
    # discriminator probabilities on real frames and on one-step predictions
    net, disc = build_models(ckpt)
    frames = np.stack([s.frames for s in desk_dataset])
    preds = rollout(net, frames[:, :4], 1)
    probs = np.concatenate([disc(Tensor(frames[:, 4]))[0].data, disc(preds[0])[0].data])
    d_range = bool(np.all((probs > 0) & (probs < 1)))
    elapsed = time.perf_counter() - start

    mse_ckpt, _ = train(DESK, desk_dataset, TrainSettings(steps=5, loss_mode="mse", seed=0))
    _, disc0 = init_models(DESK, 0)
    untouched = all(
        mse_ckpt.arrays[f"D.{name}"].tobytes() == arr.astype("<f4").tobytes()
        for name, arr in disc0.state_arrays().items())
    checks = {"terms finite": terms_finite, "D in (0,1)": d_range,
              "D unchanged in mse mode": untouched, "runtime < 5 min": elapsed < 300}
    assert report(5, f"GAN smoke ({elapsed:.1f} s)", checks)


def test_criterion_6_loss_closed_forms():
    rng = np.random.default_rng(0)
    D = Discriminator(1, 8, 3, seed=None)  # zero weights: D == 0.5 everywhere
    n_pairs = 4  # T - 1
    real = [Tensor(rng.random((3, 1, 16, 16))) for _ in range(n_pairs)]
    fake = [Tensor(rng.random((3, 1, 16, 16))) for _ in range(n_pairs)]
    ld = gan_loss_d(D, real, fake).item()
    lp = gan_loss_p(D, fake).item()
    checks = {
        "L_D = (T-1) 2 ln 2": abs(ld - n_pairs * 2 * math.log(2)) < 1e-9,
        "L_P = (T-1) ln 2": abs(lp - n_pairs * math.log(2)) < 1e-9,
        "1 + 0.01*2 + 0.001*3 == 1.023": predictor_loss(1.0, 2.0, 3.0, LossWeights(0.01, 0.001)) == 1.023,
    }
    assert report(6, "loss closed forms", checks)


def test_criterion_7_determinism_persistence(desk_dataset, tmp_path):
    small = DESK.replace(layers=2, hidden=8)
    settings = TrainSettings(steps=10, loss_mode="mse+gan+lp", seed=3)
    a, log_a = train(small, desk_dataset, settings)
    _, log_b = train(small, desk_dataset, settings)
    logs_equal = [tuple(map(repr, r.values())) for r in log_a] == [tuple(map(repr, r.values())) for r in log_b]

    save_checkpoint(a, tmp_path / "a.strpm")
    loaded = load_checkpoint(tmp_path / "a.strpm", small)
    save_checkpoint(loaded, tmp_path / "b.strpm")
    bytes_equal = (tmp_path / "a.strpm").read_bytes() == (tmp_path / "b.strpm").read_bytes()

    ev_a = evaluate(a, desk_dataset)
    ev_b = evaluate(loaded, desk_dataset)
    eval_equal = ev_a.psnr == ev_b.psnr and ev_a.proxy == ev_b.proxy
    checks = {"loss logs identical": logs_equal, "checkpoint bytes identical": bytes_equal,
              "evaluate identical": eval_equal}
    assert report(7, "determinism and persistence", checks)


def test_criterion_8_metric_oracles(tmp_path):
    rng = np.random.default_rng(0)
    p = psnr(np.zeros((1, 1, 8, 8)), np.full((1, 1, 8, 8), 0.5))
    frame = rng.random((32, 32))
    write_pgm(frame, tmp_path / "f.pgm")
    back = read_pgm(tmp_path / "f.pgm")[0, 0]
    write_pgm(np.full((1, 1), 0.5), tmp_path / "h.pgm")
    checks = {
        "PSNR 6.0206 dB": abs(p - 6.0206) <= 1e-3,
        "PGM roundtrip <= 1/510": float(np.max(np.abs(back - frame))) <= 1 / 510,
        "0.5 -> 128": int(quantize(np.array(0.5))) == 128 and (tmp_path / "h.pgm").read_bytes()[-1] == 128,
    }
    assert report(8, "metric oracles", checks)


def test_criterion_9_feature_dump(tmp_path):
    seq = gen_dataset(1, seed=5, height=32, width=32, length=4)[0]
    net, disc = init_models(DESK, 11)
    ckpt = make_checkpoint(net, disc, Adam(net.parameters()), Adam(disc.parameters()), {})
    layer, step = 2, 3
    result = dump_features(ckpt, seq, layer, step, tmp_path)

    # recompute W_1x1 * [T_E, S_E] with plain numpy from the checkpoint arrays
    net, _ = build_models(ckpt)
    states = net.initial_states(1, 32, 32)
    for t in range(step):
        trace = []
        _, states = network_step(net, Tensor(seq.frame(t)), states, trace)
    t_e, s_e = trace[layer - 1].t_e.data, trace[layer - 1].s_e.data
    w = ckpt.arrays[f"P.cells.{layer - 1}.w_stif.weight"].astype(np.float64)[:, :, 0, 0]
    b = ckpt.arrays[f"P.cells.{layer - 1}.w_stif.bias"].astype(np.float64)
    stacked = np.concatenate([t_e, s_e], axis=1)[0]
    stif = np.einsum("oc,chw->ohw", w, stacked) + b[:, None, None]
    heat = stif.mean(axis=0)
    err = float(np.max(np.abs(result["maps"]["stif"] - heat)))
    lo, hi = read_ranges(result["sidecar"])["stif"]
    print(f"  max |dump - recompute| = {err:.3e}")
    checks = {
        "STIF within 1e-6": err < 1e-6,
        "sidecar range": abs(lo - heat.min()) < 1e-6 and abs(hi - heat.max()) < 1e-6,
        "four heatmaps": len(result["paths"]) == 4,
    }
    assert report(9, "feature-dump fidelity", checks)
