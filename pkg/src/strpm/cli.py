"""Command-line entry point: ``strpm <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import re
import sys
from pathlib import Path

import numpy as np

from . import data as D
from .checkpoint import load_checkpoint, save_checkpoint
from .config import PROFILES, load_run_config, model_config, train_settings
from .gradcheck import run_suite
from .model import rollout
from .tensor import Tensor
from .training import (ABLATION_VARIANTS, ablate, build_models, dump_features, evaluate,
                       format_ablation, train, write_loss_log)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _overrides(args) -> dict:
    out = {}
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    for key in ("steps", "seed", "data", "loss", "lr", "batch", "threads"):
        value = getattr(args, key, None)
        if value is not None:
            out[key] = str(value)
    return out


def _run_config(args) -> dict:
    try:
        return load_run_config(args.profile, args.config, _overrides(args))
    except (KeyError, ValueError) as exc:
        raise UsageError(str(exc.args[0])) from None


def _dataset(run: dict):
    if run.get("data"):
        return D.read_dataset(run["data"]), {"path": str(run["data"])}
    gen = dict(n_seqs=run["n_seqs"], seed=run["seed"], height=run["size"], width=run["size"],
               n_objects=run["n_objects"], length=run["frames"], channels=run["in_channels"])
    return _synthetic(gen), {"synthetic": gen}


def _synthetic(gen: dict):
    gen = dict(gen)
    return D.gen_dataset(gen.pop("n_seqs"), gen.pop("seed"), **gen)


def _dataset_from_meta(meta: dict, min_length: int):
    source = meta.get("data", {})
    if "path" in source:
        return D.read_dataset(source["path"])
    if "synthetic" in source:
        # generation is sequential in time, so a longer run extends the same sequences
        gen = dict(source["synthetic"])
        gen["length"] = max(gen["length"], min_length)
        return _synthetic(gen)
    raise ValueError("checkpoint records no dataset; pass --data")


# --------------------------------------------------------------------------
# subcommands

def cmd_gen_data(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seqs = D.gen_dataset(args.seqs, args.seed, height=args.size, width=args.size,
                         n_objects=args.objects, length=args.frames, channels=args.channels)
    for i, seq in enumerate(seqs):
        D.write_sequence(seq.frames, out, f"seq_{i:04d}")
    print(f"wrote {len(seqs)} sequences of {args.frames} frames to {out}")
    return 0


def cmd_train(args) -> int:
    run = _run_config(args)
    cfg = model_config(run)
    dataset, source = _dataset(run)
    ckpt, log = train(cfg, dataset, train_settings(run), meta={"data": source})
    save_checkpoint(ckpt, args.out)
    log_path = Path(args.log) if args.log else Path(args.out).with_suffix(".csv")
    if log_path.exists():
        log_path.unlink()
    write_loss_log(log, log_path)
    last = log[-1]
    print(f"step {last['step']}: mse {last['mse']:.6g} lp {last['lp']:.6g} "
          f"gan_p {last['gan_p']:.6g} gan_d {last['gan_d']:.6g}")
    print(f"checkpoint {args.out}  log {log_path}")
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    context = args.context or ckpt.meta.get("context", 4)
    dataset = D.read_dataset(args.data) if args.data else _dataset_from_meta(ckpt.meta, context + args.horizon)
    report = evaluate(ckpt, dataset, context, args.horizon, threads=args.threads)
    print(report.table())
    return 0


def cmd_predict(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    seq = D.read_sequence(args.input)
    frames = seq.frames if args.context is None else seq.frames[-args.context:]
    net, _ = build_models(ckpt)
    preds = rollout(net, [Tensor(f[None]) for f in frames], args.horizon)
    out = np.stack([np.clip(p.data[0], 0.0, 1.0) for p in preds])
    manifest = D.write_sequence(out, args.out, args.name)
    print(f"wrote {len(preds)} predicted frames; manifest {manifest}")
    return 0


def cmd_ablate(args) -> int:
    run = _run_config(args)
    base = model_config(run)
    dataset, _ = _dataset(run)
    # commas inside parentheses belong to the variant name
    names = re.split(r",(?![^()]*\))", args.variants) if args.variants else list(ABLATION_VARIANTS)
    variants = [v.strip() for v in names]
    rows = ablate(dataset, variants, base, train_settings(run), train_variants=not args.counts_only)
    print(format_ablation(rows))
    return 0


def cmd_gradcheck(args) -> int:
    run = _run_config(args)
    results = run_suite(model_config(run), run["seed"])
    for r in results:
        print(f"{r.name:<22} {r.error:.3e}  tol {r.tolerance:.0e}  {'ok' if r.passed else 'FAIL'}")
    return 0 if all(r.passed for r in results) else 2


def cmd_dump_features(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    seq = D.read_sequence(args.input)
    result = dump_features(ckpt, seq, args.layer, args.step, args.out)
    for p in result["paths"]:
        print(p)
    print(result["sidecar"])
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="strpm", description="STRPM video prediction at desk scale")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def run_flags(p):
        p.add_argument("--profile", default="desk", choices=sorted(PROFILES))
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--seed", type=int)
        p.add_argument("--data", help="directory of sequence manifests")
        p.add_argument("--steps", type=int)

    p = sub.add_parser("gen-data", help="write synthetic moving-shape sequences")
    p.add_argument("--out", required=True)
    p.add_argument("--seqs", type=int, default=8)
    p.add_argument("--frames", type=int, default=12)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--objects", type=int, default=1)
    p.add_argument("--channels", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a predictor and write a checkpoint")
    run_flags(p)
    p.add_argument("--loss", choices=["mse", "mse+gan", "mse+gan+lp"])
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--out", default="out.strpm")
    p.add_argument("--log", help="loss log CSV (default: checkpoint path with .csv)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="multi-step evaluation of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data")
    p.add_argument("--context", type=int)
    p.add_argument("--horizon", type=int, default=1)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="roll a checkpoint forward from context frames")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True, help="manifest of context frames")
    p.add_argument("--context", type=int, help="use only the last N frames")
    p.add_argument("--horizon", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--name", default="pred")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("ablate", help="train and compare structural variants")
    run_flags(p)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--variants", help="comma-separated names; default all")
    p.add_argument("--counts-only", action="store_true", help="report parameters and FLOPs without training")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    run_flags(p)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("dump-features", help="write T_E/S_E/STIF/STRF heatmaps")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True, help="sequence manifest")
    p.add_argument("--layer", type=int, required=True)
    p.add_argument("--step", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dump_features)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001 - report and map to the runtime exit code
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
