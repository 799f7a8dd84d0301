"""Command-line entry point: synth | train | evaluate | forecast | gradcheck.

Exit codes: 0 success, 2 usage, 3 numeric failure, 4 data-contract failure,
5 gradient-check failure.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import hashlib
import logging
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .baselines import (ForestForecaster, LinearForecaster, LRModel, Persistence, RFModel,
                        lr_fit, rf_fit)
from .errors import (ConfigError, DataError, DimensionError, FormatError, LengthError,
                     NumericError)
from .evaluation import FeedbackConfig, NetForecaster, evaluate, feedback_forecast, write_pgm
from .grid import (Sequence, SynthConfig, WindowConfig, read_sequence, stack_samples,
                   synthesize, synthesize_events, transform, window, write_sequence)
from .models import ModelConfig, ModelKind, build_model
from .nn import load_checkpoint, save_checkpoint
from .training import AdamHyper, History, TrainConfig, model_space_loss, split_indices, train

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_DATA, EXIT_GRADCHECK = 0, 2, 3, 4, 5

log = logging.getLogger("nowcast")

NET_MODELS = ("cnc", "cnc-r", "cnc-d", "rnc", "rnc-r")
ALL_MODELS = NET_MODELS + ("lr", "rf", "bm")


class UsageError(Exception):
    pass


class GradcheckFailure(Exception):
    pass


# ------------------------------------------------------------------ helpers

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(path, command: str, config: Dict, inputs: List, outputs: List,
                   seconds: float) -> None:
    """key=value run record with SHA-256 of every input and output file."""
    lines = [f"command={command}"]
    lines += [f"config.{k}={v}" for k, v in config.items()]
    for i, p in enumerate(inputs):
        lines += [f"input.{i}={p}", f"input.{i}.sha256={sha256_file(p)}"]
    for i, p in enumerate(outputs):
        lines += [f"output.{i}={p}", f"output.{i}.sha256={sha256_file(p)}"]
    lines.append(f"wall_seconds={seconds:.3f}")
    Path(path).write_text("\n".join(lines) + "\n")


def _manifest_path(out, given: Optional[str]) -> Path:
    return Path(given) if given else Path(str(out) + ".manifest")


@contextlib.contextmanager
def _thread_limit(n: Optional[int]):
    if not n:
        yield
        return
    from threadpoolctl import threadpool_limits
    with threadpool_limits(limits=n):
        yield


def _load_samples(paths, wc: WindowConfig):
    samples, short = [], []
    for p in paths:
        seq = read_sequence(p)
        got = window(seq, wc)
        if not got:
            short.append(f"{p}: {len(seq)} frames, need {wc.n_in + wc.n_out}")
        samples += got
    return samples, short


def _net_config(args, kind: ModelKind, H: int, W: int) -> ModelConfig:
    return ModelConfig(kind=kind, height=H, width=W, depth=args.depth,
                       base_channels=args.base_channels, hidden_channels=args.hidden_channels,
                       lstm_layers=args.lstm_layers, n_in=args.n_in, n_out=args.n_out,
                       eq5_literal=args.eq5_literal, seed=args.seed)


def load_forecaster(path):
    """Rebuild a forecaster (network, LR or RF) from an NCP1 checkpoint."""
    config, arrays = load_checkpoint(path)
    family = config.get("family", "net")
    if family == "net":
        model = build_model(ModelConfig.from_text(config))
        model.load_state_dict(arrays)
        return NetForecaster(model)
    if family == "lr":
        return LinearForecaster(LRModel.from_arrays(arrays, float(config.get("lam", 0))))
    if family == "rf":
        m = RFModel.from_arrays(arrays, max_depth=int(config["max_depth"]),
                                min_samples_leaf=int(config["min_samples_leaf"]),
                                max_features=int(config["max_features"]),
                                seed=int(config["seed"]))
        return ForestForecaster(m, int(config.get("n_in", 9)))
    raise FormatError(f"checkpoint family {family!r} is not recognized")


def _forecaster_from_args(args):
    if args.checkpoint:
        return load_forecaster(args.checkpoint)
    if args.model == "bm":
        return Persistence()
    raise UsageError("give --checkpoint or --model bm")


# ----------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    t0 = time.perf_counter()
    cfg = SynthConfig(height=args.h, width=args.w, n_frames=args.frames, n_cells=args.cells,
                      intensity_range=(args.intensity_min, args.intensity_max),
                      velocity_range=(args.velocity_min, args.velocity_max),
                      growth_rate_range=(args.growth_min, args.growth_max),
                      sigma_range=(args.sigma_min, args.sigma_max),
                      spin_range=(args.spin_min, args.spin_max),
                      noise_std=args.noise, seed=args.seed, dt_seconds=args.dt)
    out = Path(args.out)
    if args.events == 1:
        paths = [out]
        write_sequence(synthesize(cfg), out)
    else:
        paths = [out.with_name(f"{out.stem}-{i:04d}{out.suffix}") for i in range(args.events)]
        for p, seq in zip(paths, synthesize_events(cfg, args.events)):
            write_sequence(seq, p)
    conf = {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}
    conf["events"] = args.events
    write_manifest(_manifest_path(out, args.manifest), "synth", conf, [], paths,
                   time.perf_counter() - t0)
    print(f"wrote {len(paths)} sequence file(s), first: {paths[0]}")
    return EXIT_OK


def cmd_train(args) -> int:
    t0 = time.perf_counter()
    if args.model == "bm":
        raise UsageError("BM has no trainable parameters; evaluate it with --model bm")
    wc = WindowConfig(args.n_in, args.n_out, args.stride)
    samples, short = _load_samples(args.data, wc)
    if not samples:
        raise DataError("no training samples: " + "; ".join(short))
    H, W = samples[0].input[0].values.shape
    dt = _dt(args.data[0])
    x, y = stack_samples(samples)
    xm, ym = transform(x), transform(y)
    del x, y
    out = Path(args.out)
    hist_path = Path(args.history) if args.history else Path(str(out) + ".history.csv")
    conf = {"model": args.model, "epochs": args.epochs, "lr": args.lr, "batch": args.batch,
            "seed": args.seed, "val_fraction": args.val_fraction, "n_in": args.n_in,
            "n_out": args.n_out, "stride": args.stride, "n_samples": len(xm)}
    tr_idx, va_idx = split_indices(len(xm), args.val_fraction, args.seed)

    if args.model in NET_MODELS:
        cfg = _net_config(args, ModelKind.parse(args.model), H, W)
        model = build_model(cfg)
        tc = TrainConfig(batch_size=args.batch, epochs=args.epochs, seed=args.seed,
                         val_fraction=args.val_fraction, patience=args.patience,
                         clip_norm=args.clip_norm)
        model, hist = train(model, xm[..., None], ym[..., None], tc, AdamHyper(lr=args.lr))
        ck_conf = {"family": "net", **cfg.to_text()}
        arrays = model.state_dict()
        conf.update(cfg.to_text())
        best = hist.best_val_loss
    else:
        xt, yt = xm[tr_idx], ym[tr_idx]
        if args.model == "lr":
            m = lr_fit(xt, yt, lam=args.lam)
            fc = LinearForecaster(m)
            ck_conf = {"family": "lr", "kind": "LR", "lam": repr(args.lam)}
            arrays = m.to_arrays()
        else:
            m = rf_fit(xt, yt, n_trees=args.trees, max_depth=args.max_depth,
                       min_samples_leaf=args.min_leaf, seed=args.seed, max_rows=args.max_rows)
            fc = ForestForecaster(m, args.n_in)
            ck_conf = {"family": "rf", "kind": "RF", "n_trees": str(args.trees),
                       "max_depth": str(m.max_depth), "min_samples_leaf": str(m.min_samples_leaf),
                       "max_features": str(m.max_features), "seed": str(args.seed)}
            arrays = m.to_arrays()
        ck_conf["n_in"], ck_conf["n_out"] = str(args.n_in), str(args.n_out)
        hist = _baseline_history(fc, xm, ym, tr_idx, va_idx, time.perf_counter() - t0)
        best = hist.best_val_loss
    save_checkpoint(out, ck_conf, arrays)
    hist.write_csv(hist_path)
    outputs = [out, hist_path]
    if args.dump_val:
        d = Path(args.dump_val)
        d.mkdir(parents=True, exist_ok=True)
        for k, i in enumerate(va_idx):
            smp = samples[i]
            frames = np.concatenate([smp.input_array(), smp.target_array()])
            write_sequence(Sequence.from_array(frames, dt),
                           d / f"val-{k:04d}.ncg")
    conf["best_val_loss"] = repr(best) if best is not None else "NA"
    write_manifest(_manifest_path(out, args.manifest), "train", conf, args.data, outputs,
                   time.perf_counter() - t0)
    print(f"trained {args.model} on {len(tr_idx)} samples; best validation loss {best!r}")
    return EXIT_OK


def _baseline_history(fc, xm, ym, tr_idx, va_idx, seconds) -> History:
    from .baselines import lr_predict, rf_predict
    from .training import EpochRecord

    def loss(idx):
        if len(idx) == 0:
            return None
        if isinstance(fc, LinearForecaster):
            p = lr_predict(fc.model, xm[idx])
        else:
            p = rf_predict(fc.model, xm[idx])
        d = p - ym[idx]
        return float(np.mean(d * d))

    hist = History(train_index=tr_idx, val_index=va_idx)
    hist.records.append(EpochRecord(1, loss(tr_idx), loss(va_idx), seconds, 0))
    hist.best_epoch = 1
    return hist


def cmd_evaluate(args) -> int:
    t0 = time.perf_counter()
    fc = _forecaster_from_args(args)
    n_in = getattr(fc, "n_in", 9)
    n_out = getattr(fc, "n_out", 3)
    n_lead = args.feedback_cycles * n_out
    samples, short = _load_samples(args.data, WindowConfig(n_in, n_lead, args.stride))
    if short:
        raise DataError(f"lead of {n_lead} frames exceeds the available targets: "
                        + "; ".join(short))
    report = evaluate(fc, samples, threshold=args.threshold,
                      fc=FeedbackConfig(args.feedback_cycles, n_in),
                      dt_seconds=_dt(args.data[0]),
                      appendix_literal=args.appendix_literal,
                      keep_predictions=bool(args.dump_pgm))
    out = Path(args.out)
    per = Path(args.per_sample) if args.per_sample else out.with_name(out.stem + "-per-sample.csv")
    report.write_csv(out)
    report.write_per_sample_csv(per)
    outputs = [out, per]
    if args.dump_pgm:
        d = Path(args.dump_pgm)
        d.mkdir(parents=True, exist_ok=True)
        for i in range(report.predictions.shape[0]):
            for j, minutes in enumerate(report.lead_minutes()):
                p = d / f"sample{i:04d}-lead{minutes:03d}.pgm"
                write_pgm(p, report.predictions[i, j])
    conf = {"model": getattr(fc, "kind", "?"), "feedback_cycles": args.feedback_cycles,
            "threshold": args.threshold, "appendix_literal": args.appendix_literal,
            "n_samples": len(samples), "skipped": report.skipped}
    if isinstance(fc, NetForecaster) and args.feedback_cycles == 1:
        x, y = stack_samples(samples)
        conf["model_space_mse"] = repr(model_space_loss(
            fc.model, transform(x)[..., None], transform(y)[..., None], 8))
        print(f"model-space MSE {conf['model_space_mse']}")
    inputs = list(args.data) + ([args.checkpoint] if args.checkpoint else [])
    write_manifest(_manifest_path(out, args.manifest), "evaluate", conf, inputs, outputs,
                   time.perf_counter() - t0)
    for lead in report.leads:
        print(f"+{lead.lead_minutes:3d} min  mse {lead.scores['mse']:.4f}")
    return EXIT_OK


def _dt(path) -> int:
    return read_sequence(path).dt_seconds


def cmd_forecast(args) -> int:
    t0 = time.perf_counter()
    fc = _forecaster_from_args(args)
    n_in = getattr(fc, "n_in", 9)
    seq = read_sequence(args.input)
    if len(seq) != n_in:
        raise DataError(f"forecast input must hold exactly {n_in} frames, got {len(seq)}")
    pred = feedback_forecast(fc, seq.array().astype(np.float64)[None],
                             FeedbackConfig(args.feedback_cycles, n_in))[0]
    out = Path(args.out)
    write_sequence(Sequence.from_array(pred.astype(np.float32), seq.dt_seconds), out)
    conf = {"model": getattr(fc, "kind", "?"), "feedback_cycles": args.feedback_cycles}
    inputs = [args.input] + ([args.checkpoint] if args.checkpoint else [])
    write_manifest(_manifest_path(out, args.manifest), "forecast", conf, inputs, [out],
                   time.perf_counter() - t0)
    print(f"wrote {len(pred)} frames to {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck
    t0 = time.perf_counter()
    results = run_gradcheck(seed=args.seed, only=args.only or None)
    if not results:
        raise UsageError(f"--only {args.only} matches no check family")
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.family:24s} max_rel_err {r.max_rel_err:.3e} "
              f"(tol {r.tolerance:.0e}, {r.seconds:.2f}s)")
    outputs = []
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["family", "max_rel_err", "tolerance", "passed"])
            for r in results:
                w.writerow([r.family, repr(r.max_rel_err), repr(r.tolerance), int(r.passed)])
        outputs.append(args.out)
        write_manifest(_manifest_path(args.out, args.manifest), "gradcheck",
                       {"seed": args.seed, "only": ",".join(args.only or [])}, [], outputs,
                       time.perf_counter() - t0)
    failed = [r.family for r in results if not r.passed]
    if failed:
        raise GradcheckFailure("gradient check failed for: " + ", ".join(failed))
    return EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nowcast", description=__doc__.splitlines()[0])
    ap.add_argument("--threads", type=int, default=1,
                    help="BLAS thread limit; 1 gives bit-reproducible runs (0 = no limit)")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic advection sequence as NCG")
    s.add_argument("--out", required=True)
    s.add_argument("--h", type=int, default=64)
    s.add_argument("--w", type=int, default=64)
    s.add_argument("--frames", type=int, default=24)
    s.add_argument("--cells", type=int, default=3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--noise", type=float, default=0.0)
    s.add_argument("--dt", type=int, default=1800)
    s.add_argument("--events", type=int, default=1,
                   help="number of independent sequences; >1 writes OUT-0000.ncg, ...")
    for name, lo, hi in (("intensity", 2.0, 20.0), ("velocity", -1.5, 1.5),
                         ("growth", -0.05, 0.05), ("sigma", 3.0, 8.0), ("spin", -0.05, 0.05)):
        s.add_argument(f"--{name}-min", type=float, default=lo)
        s.add_argument(f"--{name}-max", type=float, default=hi)
    s.add_argument("--manifest")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="fit a network or regression baseline")
    t.add_argument("--data", nargs="+", required=True, help="NCG training sequences")
    t.add_argument("--model", required=True, choices=ALL_MODELS)
    t.add_argument("--out", required=True, help="NCP1 checkpoint path")
    t.add_argument("--history", help="history CSV (default OUT.history.csv)")
    t.add_argument("--epochs", type=int, default=10)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--batch", type=int, default=8)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--val-fraction", type=float, default=0.1)
    t.add_argument("--patience", type=int, default=0)
    t.add_argument("--clip-norm", type=float, default=5.0)
    t.add_argument("--n-in", type=int, default=9)
    t.add_argument("--n-out", type=int, default=3)
    t.add_argument("--stride", type=int, default=1)
    t.add_argument("--depth", type=int, default=2)
    t.add_argument("--base-channels", type=int, default=8)
    t.add_argument("--hidden-channels", type=int, default=8)
    t.add_argument("--lstm-layers", type=int, default=2)
    t.add_argument("--eq5-literal", action="store_true",
                   help="ConvLSTM cell update without the forget gate")
    t.add_argument("--lam", type=float, default=1e-6, help="LR ridge regularizer")
    t.add_argument("--trees", type=int, default=20)
    t.add_argument("--max-depth", type=int, default=8)
    t.add_argument("--min-leaf", type=int, default=5)
    t.add_argument("--max-rows", type=int, default=200000)
    t.add_argument("--dump-val", help="directory receiving each validation sample as NCG")
    t.add_argument("--manifest")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="score a checkpoint (or BM) per lead time")
    e.add_argument("--data", nargs="+", required=True)
    e.add_argument("--checkpoint")
    e.add_argument("--model", choices=("bm",))
    e.add_argument("--out", required=True, help="pooled metrics CSV")
    e.add_argument("--per-sample", help="per-sample metrics CSV (default OUT-per-sample.csv)")
    e.add_argument("--feedback-cycles", type=int, default=1)
    e.add_argument("--threshold", type=float, default=0.1, help="rain/no-rain cut in mm/h")
    e.add_argument("--stride", type=int, default=1)
    e.add_argument("--appendix-literal", action="store_true",
                   help="difference-quotient BIAS and est-mean R^2 denominator")
    e.add_argument("--dump-pgm", help="directory receiving one PGM per (sample, lead)")
    e.add_argument("--manifest")
    e.set_defaults(func=cmd_evaluate)

    f = sub.add_parser("forecast", help="predict from a 9-frame NCG input")
    f.add_argument("--input", required=True)
    f.add_argument("--checkpoint")
    f.add_argument("--model", choices=("bm",))
    f.add_argument("--out", required=True)
    f.add_argument("--feedback-cycles", type=int, default=1)
    f.add_argument("--manifest")
    f.set_defaults(func=cmd_forecast)

    g = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--only", nargs="*", help="substring filter on family names")
    g.add_argument("--out", help="CSV of max relative errors")
    g.add_argument("--manifest")
    g.set_defaults(func=cmd_gradcheck)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)  # exits with 2 on bad usage
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit(args.threads):
            return args.func(args)
    except (UsageError, ConfigError, ValueError) as exc:
        ap.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FormatError, LengthError, DimensionError, FileNotFoundError) as exc:
        print(f"data contract failure: {exc}", file=sys.stderr)
        return EXIT_DATA
    except GradcheckFailure as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_GRADCHECK


if __name__ == "__main__":
    sys.exit(main())
