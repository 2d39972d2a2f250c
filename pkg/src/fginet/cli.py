"""Command line entry point: ``fginet <command> [flags]``.

Exit codes: 0 success, 1 gradient check failure, 2 usage error, 3 config
error, 4 data error, 5 numeric error.
"""
from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from . import config_io
from .data import load_dataset, synth_dataset, write_dataset
from .errors import ConfigError, DataError, FGINetError, NumericError, UsageError
from .gaze import evaluate, make_folds, write_fold_csv, write_predictions_csv
from .model import (ABLATIONS, ModelConfig, apply_ablation, build, count_flops, count_params,
                    load_checkpoint, reference_config, save_checkpoint)
from .training import PRESETS, TrainPlan, fit, preset, write_history_csv

EXIT_OK, EXIT_GRADCHECK, EXIT_USAGE, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4, 5


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    flat = config_io.loads(text)
    bad = [k for k in flat if not k.startswith(("model.", "train."))]
    if bad:
        raise ConfigError(f"config keys must start with 'model.' or 'train.': {bad}")
    return flat


def resolve(args, image_size=None) -> tuple:
    """(ModelConfig, TrainPlan) from preset, config file and flag overrides."""
    flat = _load_config_file(getattr(args, "config", None))
    plan = preset(args.preset) if getattr(args, "preset", None) else PRESETS["eyediap"]
    plan = TrainPlan.from_flat(flat, plan)
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        changes["epochs"] = args.epochs
    if getattr(args, "batch_size", None) is not None:
        changes["batch_size"] = args.batch_size
    plan = plan.replace(**changes)

    size = image_size or getattr(args, "image_size", None)
    if "model.input_size" in flat:
        file_size = tuple(flat["model.input_size"])
        if size is not None and tuple(size) != file_size:
            raise ConfigError(f"config input_size {file_size} does not match images {tuple(size)}")
        size = file_size
    model = ModelConfig.from_flat(flat, reference_config(size or 224))
    model.validate()
    ablation = getattr(args, "ablation", None)
    if ablation:
        model = apply_ablation(model, ablation)
    return model, plan


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -------------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    ds = synth_dataset(args.n, args.seed if args.seed is not None else 0, args.size,
                       args.subjects)
    manifest = write_dataset(ds, args.out, args.format)
    print(f"wrote {len(ds)} samples ({args.size}x{args.size}) to {manifest}")
    return EXIT_OK


def cmd_train(args) -> int:
    ds = load_dataset(args.data, lenient=args.lenient)
    for msg in ds.errors:
        print(f"skipped: {msg}", file=sys.stderr)
    model_cfg, plan = resolve(args, ds.image_size)
    val = load_dataset(args.val) if args.val else None
    out = _out_dir(args)
    net = build(model_cfg, plan.seed)
    t0 = time.time()

    def progress(rec, _net):
        if not args.quiet:
            val_txt = "" if val is None else f"  val {rec['val_angular_error_deg']:.3f} deg"
            print(f"epoch {rec['epoch'] + 1:4d}/{plan.epochs}  lr {rec['lr']:.6f}  "
                  f"loss {rec['train_loss']:.5f}{val_txt}  ({time.time() - t0:.0f}s)", flush=True)

    history = fit(net, ds, plan, [progress], val=val)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "model.fgi"
    save_checkpoint(net, ckpt)
    write_history_csv(out / "history.csv", history)
    result = evaluate(net, ds)
    write_predictions_csv(out / "train_eval.csv", ds, result)
    print(f"train mean angular error {result.mean_error_deg:.4f} deg")
    print(f"checkpoint {ckpt}; history {out / 'history.csv'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if not args.checkpoint:
        raise UsageError("eval needs --checkpoint")
    net = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data, lenient=args.lenient)
    if ds.image_size != tuple(net.config.input_size):
        raise DataError(f"images are {ds.image_size} but the model expects {net.config.input_size}")
    result = evaluate(net, ds)
    if args.out:
        out = _out_dir(args)
        write_predictions_csv(out / "eval.csv", ds, result)
    print(f"mean angular error {result.mean_error_deg:.4f} deg over {len(ds)} samples")
    return EXIT_OK


def cmd_cv(args) -> int:
    ds = load_dataset(args.data, lenient=args.lenient)
    model_cfg, plan = resolve(args, ds.image_size)
    out = _out_dir(args)
    folds = make_folds(ds.subjects, args.protocol, plan.seed)
    rows = []
    for k, (tr, te) in enumerate(folds):
        net = build(model_cfg, plan.seed)
        fit(net, ds.subset(tr), plan)
        err = evaluate(net, ds.subset(te)).mean_error_deg
        rows.append((k, len(te), err))
        print(f"fold {k}: train {len(tr)}  test {len(te)}  error {err:.4f} deg", flush=True)
    write_fold_csv(out / "folds.csv", rows)
    weighted = sum(n * e for _, n, e in rows) / sum(n for _, n, _ in rows)
    print(f"{len(rows)} folds, sample-weighted mean error {weighted:.4f} deg")
    return EXIT_OK


def _print_table(table, total, unit, depth, scale=1.0) -> None:
    for path, value in table.items():
        if path == "" or path.count(".") >= depth:
            continue
        print(f"  {path:<40s} {value / scale:>14,.{0 if scale == 1 else 6}f}")
    print(f"total {total / scale:,.{0 if scale == 1 else 6}f} {unit}")


def cmd_params(args) -> int:
    model_cfg, _ = resolve(args)
    rep = count_params(build(model_cfg, 0))
    _print_table(rep.table, rep.total, "parameters", args.depth)
    print(f"params {rep.total / 1e6:.4f} M")
    return EXIT_OK


def cmd_flops(args) -> int:
    model_cfg, _ = resolve(args)
    rep = count_flops(build(model_cfg, 0))
    _print_table(rep.table, rep.total, "MACs", args.depth)
    print(f"flops {rep.total / 1e9:.4f} G (multiply-accumulates, {model_cfg.input_size[0]}x"
          f"{model_cfg.input_size[1]} input)")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    seed = args.seed if args.seed is not None else 0
    seeds = range(seed, seed + args.n_seeds)
    failed = []

    def report(res):
        flag = "ok  " if res.passed else "FAIL"
        print(f"{flag} seed {res.seed}  {res.case:<28s} max rel err {res.max_error:.2e} "
              f"({res.checked} entries)", flush=True)
        if not res.passed:
            failed.append(res)

    try:
        run_suite(seeds, args.case or None, report)
    except KeyError as exc:
        raise UsageError(str(exc)) from None
    print("gradcheck passed" if not failed else f"gradcheck FAILED: {len(failed)} case(s)")
    return EXIT_OK if not failed else EXIT_GRADCHECK


def cmd_ablate(args) -> int:
    base_cfg, plan = resolve(args)
    base = build(base_cfg, 0)
    bp, bf = count_params(base), count_flops(base)
    base_names = {n for n, _ in base.named_parameters()}
    print(f"{'variant':<12s} {'params':>12s} {'d_params':>10s} {'MACs (G)':>10s} {'d_MACs':>12s}")
    print(f"{'base':<12s} {bp.total:>12,d} {0:>10,d} {bf.total / 1e9:>10.4f} {0:>12,d}")
    for which in ABLATIONS:
        net = build(apply_ablation(base_cfg, which), 0)
        p, f = count_params(net), count_flops(net)
        removed = sorted(base_names - {n for n, _ in net.named_parameters()})
        print(f"{'-' + which:<12s} {p.total:>12,d} {p.total - bp.total:>10,d} "
              f"{f.total / 1e9:>10.4f} {f.total - bf.total:>12,d}")
        removed_count = sum(dict(base.named_parameters())[n].size for n in removed)
        print(f"  removed {len(removed)} tensors / {removed_count:,d} parameters "
              f"under {sorted({n.rsplit('.', 2)[0] for n in removed})}")
    return EXIT_OK


# ---------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fginet", description="FGI-Net gaze estimation: train, evaluate, inspect.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    def common(sp, data=False, model=True):
        sp.add_argument("--seed", type=int, default=None)
        if model:
            sp.add_argument("--config", help="flat key = value file with model.* / train.* keys")
            sp.add_argument("--preset", choices=sorted(PRESETS))
            sp.add_argument("--ablation", choices=ABLATIONS)
        if data:
            sp.add_argument("--data", required=True, help="manifest CSV")
            sp.add_argument("--lenient", action="store_true", help="skip unreadable rows")

    sp = sub.add_parser("synth", help="write a synthetic eye dataset")
    common(sp, model=False)
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--size", type=int, default=224)
    sp.add_argument("--subjects", type=int, default=15)
    sp.add_argument("--format", choices=("nchw", "png"), default="nchw")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train on a manifest")
    common(sp, data=True)
    sp.add_argument("--val", help="optional validation manifest")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--out", default="run")
    sp.add_argument("--checkpoint", help="checkpoint path (default OUT/model.fgi)")
    sp.add_argument("--quiet", action="store_true")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    common(sp, data=True, model=False)
    sp.add_argument("--checkpoint")
    sp.add_argument("--out", help="directory for eval.csv")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("cv", help="cross-validate (leave-one-subject-out or k-fold)")
    common(sp, data=True)
    sp.add_argument("--protocol", default="loso", help="'loso' or 'kfold:K'")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--out", default="cv")
    sp.set_defaults(func=cmd_cv)

    for name, func, text in (("params", cmd_params, "parameter count table"),
                             ("flops", cmd_flops, "multiply-accumulate count table")):
        sp = sub.add_parser(name, help=text)
        common(sp)
        sp.add_argument("--image-size", type=int, nargs=2, metavar=("H", "W"))
        sp.add_argument("--depth", type=int, default=1, help="module nesting shown (default 1)")
        sp.set_defaults(func=func)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--n-seeds", type=int, default=3)
    sp.add_argument("--case", action="append", help="run only this case (repeatable)")
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("ablate", help="parameter/MAC deltas of the ablated variants")
    common(sp)
    sp.add_argument("--image-size", type=int, nargs=2, metavar=("H", "W"))
    sp.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FGINetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
