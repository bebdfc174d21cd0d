"""Command-line entry point: ``pfskd <command> [--config cfg.json] [flags]``.

Settings resolve as built-in defaults, then the JSON config, then flags. Exit codes: 0 success,
1 invalid input (bad config key, missing file, out-of-bounds pixel), 2 runtime or numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from .data import CLASS_NAMES, DatasetSpec, generate, load_dataset
from .metrics import report_csv, report_table
from .models import load_checkpoint
from .tensor import NonFiniteError, load_tensor
from .trainer import ConfigError, TrainConfig, distill, evaluate, train_teacher

COMMANDS = ("gen-data", "train-teacher", "distill", "eval", "gradcheck", "pfs-dump", "oracle-check")

# flag name -> key inside a training config
_LOSS_FLAGS = {"lambda": "lam", "mu": "mu", "temperature": "temperature"}

# options of the commands that do not train; value is the default
_PLAIN_OPTIONS = {
    "eval": {"checkpoint": None, "dataset": None, "split": "val", "out": None},
    "gradcheck": {"rounds": 4, "seed": 0, "h": 1e-5, "tol": 1e-4, "network": True, "out": None},
    "pfs-dump": {"checkpoint": None, "image": None, "dataset": None, "split": "val", "index": None,
                 "pixels": [], "source": "module", "out": None},
    "oracle-check": {"instances": 200, "seed": 0, "tol": 1e-10, "out": None},
}


class UsageError(ValueError):
    """Bad command line."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _pixel(s: str) -> list[int]:
    try:
        y, x = (int(v) for v in s.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"pixel must be 'y,x', got {s!r}") from None
    return [y, x]


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pfskd", description="PFS knowledge distillation for segmentation on synthetic shapes.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="JSON file with settings for this command")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")

    def training(sp):
        common(sp)
        sp.add_argument("--dataset", help="dataset directory written by gen-data")
        sp.add_argument("--mode")
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--lambda", dest="lambda_", type=float, metavar="LAMBDA")
        sp.add_argument("--mu", type=float)
        sp.add_argument("--temperature", type=float)

    common(sub.add_parser("gen-data", help="render the synthetic dataset to disk"))
    training(sub.add_parser("train-teacher", help="train the teacher with hard labels"))
    sp = sub.add_parser("distill", help="train a student against a frozen teacher")
    training(sp)
    sp.add_argument("--teacher", required=True, help="teacher checkpoint (.pfck)")
    sp = sub.add_parser("eval", help="per-class IoU, mIoU and pixel accuracy of a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint")
    sp.add_argument("--dataset")
    sp.add_argument("--split", choices=("train", "val"))
    sp = sub.add_parser("gradcheck", help="central-difference gradient checks, CSV report")
    common(sp)
    sp.add_argument("--rounds", type=int)
    sp.add_argument("--no-network", dest="network", action="store_const", const=False)
    sp = sub.add_parser("pfs-dump", help="write PFS rows of chosen pixels as PGM/CSV plus a marked PPM")
    common(sp)
    sp.add_argument("--checkpoint")
    sp.add_argument("--image", help="image tensor file [3,H,W]")
    sp.add_argument("--dataset")
    sp.add_argument("--split", choices=("train", "val"))
    sp.add_argument("--index", type=int, help="dataset sample index")
    sp.add_argument("--pixel", dest="pixels", type=_pixel, action="append", metavar="Y,X")
    sp.add_argument("--source", choices=("module", "feature"))
    sp = sub.add_parser("oracle-check", help="compare kernels against loop oracles")
    common(sp)
    sp.add_argument("--instances", type=int)
    return p


def _read_config(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path}: invalid JSON ({exc})") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"config file {path}: top level must be an object")
    return cfg


def _flags(args, names) -> dict:
    return {n: getattr(args, n) for n in names if getattr(args, n, None) is not None}


def resolve_dataset(args) -> DatasetSpec:
    d = _read_config(args.config)
    d.update(_flags(args, ["seed"]))
    d.pop("out", None)
    known = {f.name for f in fields(DatasetSpec)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    return DatasetSpec(**d)


def resolve_train(args) -> TrainConfig:
    d = _read_config(args.config)
    d.update(_flags(args, ["seed", "out", "mode", "epochs", "dataset"]))
    loss = dict(d.get("loss") or {})
    for flag, key in _LOSS_FLAGS.items():
        v = getattr(args, "lambda_" if flag == "lambda" else flag, None)
        if v is not None:
            loss[key] = v
    if loss:
        d["loss"] = loss
    return TrainConfig.from_dict(d)


def resolve_plain(command: str, args) -> dict:
    opts = dict(_PLAIN_OPTIONS[command])
    cfg = _read_config(args.config)
    unknown = sorted(set(cfg) - set(opts))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    opts.update(cfg)
    opts.update(_flags(args, [k for k in opts if k != "pixels"]))
    if getattr(args, "pixels", None):
        opts["pixels"] = args.pixels
    return opts


def _require(opts: dict, *keys):
    for k in keys:
        if opts.get(k) is None:
            raise ConfigError(f"{k}: required")


def _out_dir(path) -> Path:
    if path is None:
        raise ConfigError("out: required")
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_data(args) -> int:
    spec = resolve_dataset(args)
    out = _out_dir(args.out)
    splits = generate(spec, out)
    print(f"wrote {sum(len(v[0]) for v in splits.values())} samples to {out}")
    return 0


def cmd_train_teacher(args) -> int:
    cfg = resolve_train(args)
    _out_dir(cfg.out)
    result = train_teacher(cfg, progress=True)
    print(f"teacher best val mIoU {result.best_miou:.4f} at epoch {result.best_epoch}")
    return 0


def cmd_distill(args) -> int:
    cfg = resolve_train(args)
    _out_dir(cfg.out)
    teacher = load_checkpoint(args.teacher)
    result = distill(cfg, teacher, progress=True)
    print(f"student ({cfg.mode}) best val mIoU {result.best_miou:.4f} at epoch {result.best_epoch}")
    return 0


def cmd_eval(args) -> int:
    opts = resolve_plain("eval", args)
    _require(opts, "checkpoint", "dataset")
    net = load_checkpoint(opts["checkpoint"])
    _, splits = _load_dataset(opts["dataset"])
    scores = evaluate(net, *splits[opts["split"]])
    names = CLASS_NAMES if net.spec.num_classes == len(CLASS_NAMES) else None
    print(report_table(scores, names))
    if opts["out"] is not None:
        (_out_dir(opts["out"]) / "report.csv").write_text(report_csv(scores, names))
    return 0


def _load_dataset(path):
    if not (Path(path) / "manifest.json").exists():
        raise ConfigError(f"dataset: no manifest.json under {path}")
    return load_dataset(path)


def cmd_gradcheck(args) -> int:
    from .autodiff import reports_to_csv
    from .gradsuite import run_grad_suite
    opts = resolve_plain("gradcheck", args)
    reports = run_grad_suite(opts["rounds"], opts["seed"], opts["h"], opts["tol"], include_network=opts["network"])
    text = reports_to_csv(reports)
    if opts["out"] is not None:
        (_out_dir(opts["out"]) / "gradcheck.csv").write_text(text)
    else:
        sys.stdout.write(text)
    failed = [r.name for r in reports if not r.passed]
    print(f"{len(reports) - len(failed)}/{len(reports)} gradient checks passed", file=sys.stderr)
    for name in failed:
        print(f"FAILED {name}", file=sys.stderr)
    return 0 if not failed else 2


def cmd_pfs_dump(args) -> int:
    from .export import dump
    opts = resolve_plain("pfs-dump", args)
    _require(opts, "checkpoint", "out")
    if not opts["pixels"]:
        raise ConfigError("pixels: at least one pixel required")
    net = load_checkpoint(opts["checkpoint"])
    if opts["image"] is not None:
        image = load_tensor(opts["image"])
        tag = Path(opts["image"]).name.split(".")[0]
    else:
        _require(opts, "dataset", "index")
        imgs = _load_dataset(opts["dataset"])[1][opts["split"]][0]
        if not 0 <= opts["index"] < len(imgs):
            raise ConfigError(f"index: {opts['index']} outside {opts['split']} split of size {len(imgs)}")
        image, tag = imgs[opts["index"]], f"{opts['split']}{opts['index']:05d}"
    written = dump(net, image, [tuple(p) for p in opts["pixels"]], opts["out"], tag=tag, source=opts["source"])
    for path in written:
        print(path)
    return 0


def cmd_oracle_check(args) -> int:
    from .oracles import run_oracle_suite
    opts = resolve_plain("oracle-check", args)
    results = run_oracle_suite(opts["instances"], opts["seed"], opts["tol"])
    lines = ["name,instances,max_abs_err,tol,pass"]
    lines += [f"{r.name},{r.instances},{r.max_abs_err!r},{r.tol!r},{int(r.passed)}" for r in results]
    text = "\n".join(lines) + "\n"
    if opts["out"] is not None:
        (_out_dir(opts["out"]) / "oracles.csv").write_text(text)
    sys.stdout.write(text)
    return 0 if all(r.passed for r in results) else 2


_HANDLERS = {"gen-data": cmd_gen_data, "train-teacher": cmd_train_teacher, "distill": cmd_distill,
             "eval": cmd_eval, "gradcheck": cmd_gradcheck, "pfs-dump": cmd_pfs_dump,
             "oracle-check": cmd_oracle_check}


def run(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        args = build_parser().parse_args(argv)
        return _HANDLERS[args.command](args)
    except (NonFiniteError, FloatingPointError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())
