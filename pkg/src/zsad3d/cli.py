"""Command line entry point: ``zsad3d <subcommand> ...``.

Settings resolve as flag > config file > built-in default.  Exit codes:
0 success, 2 configuration error, 3 protocol violation, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import MISSING, fields
from pathlib import Path

import torch

from .config import ExperimentConfig
from .errors import ConfigurationError, ZsadError
from .training import EVAL_MODES

log = logging.getLogger("zsad3d")


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _config_flags(parser: argparse.ArgumentParser, skip=()):
    """One ``--field-name`` flag per ExperimentConfig field, defaulting to None (unset)."""
    group = parser.add_argument_group("experiment settings (override the config file)")
    for f in fields(ExperimentConfig):
        if f.name in skip:
            continue
        flag = "--" + f.name.replace("_", "-")
        default = f.default if f.default is not MISSING else f.default_factory()
        if isinstance(default, bool):
            group.add_argument(flag, dest=f.name, type=_bool, default=None, metavar="BOOL")
        elif isinstance(default, list):
            group.add_argument(flag, dest=f.name, nargs="+", default=None)
        elif isinstance(default, tuple):
            group.add_argument(flag, dest=f.name, nargs=2, type=float, default=None, metavar=("LO", "HI"))
        else:
            group.add_argument(flag, dest=f.name, type=type(default), default=None)


def resolve_config(args) -> ExperimentConfig:
    base = ExperimentConfig.load(args.config).to_dict() if getattr(args, "config", None) else {}
    cfg = ExperimentConfig.from_dict(base)
    flags = {f.name: getattr(args, f.name) for f in fields(ExperimentConfig)
             if getattr(args, f.name, None) is not None}
    # gen-data shorthands
    if getattr(args, "categories", None):
        flags.setdefault("train_categories", args.categories)
    if getattr(args, "per_category", None) is not None:
        flags.setdefault("train_per_category", args.per_category)
        flags.setdefault("test_per_category", args.per_category)
    return cfg.replace(**flags) if flags else cfg


def cmd_gen_data(args):
    from .data import generate_dataset

    cfg = resolve_config(args)
    manifest = generate_dataset(args.out, cfg)
    cfg.save(Path(args.out) / "config.json")
    counts = {}
    for s in manifest["samples"]:
        counts[s["split"]] = counts.get(s["split"], 0) + 1
    print(json.dumps({"out": str(args.out), "splits": counts}, sort_keys=True))


def cmd_train(args):
    from .pipeline import train_run

    cfg = resolve_config(args)
    summary = train_run(cfg, args.data, args.out, args.stage, args.checkpoint)
    print(json.dumps(summary, indent=2, sort_keys=True))


def cmd_eval(args):
    from .pipeline import eval_run

    table, _ = eval_run(args.checkpoint, args.data, args.split, args.mode, args.out)
    print(table.format())


def cmd_render_maps(args):
    from .pipeline import render_maps

    out = args.out or Path(args.checkpoint).resolve().parent.parent / "maps"
    summary = render_maps(args.checkpoint, args.data, out, args.split, args.ids, args.mode)
    print(json.dumps(summary, indent=2, sort_keys=True))


def cmd_ablate(args):
    from .ablation import ablate
    from .data import generate_dataset

    cfg = resolve_config(args)
    data = args.data
    if data is None:
        data = Path(args.out) / "data"
        generate_dataset(data, cfg)
    result = ablate(cfg, data, args.out, args.what)
    print((Path(args.out) / "ablation.txt").read_text(), end="")
    return result


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="zsad3d", description="Zero-shot point cloud anomaly detection")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    p.add_argument("--threads", type=int, default=1, help="torch intra-op threads")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--config")
    g.add_argument("--categories", nargs="+", help="training categories")
    g.add_argument("--per-category", type=int, help="objects per category (train and test)")
    _config_flags(g)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run stage 1, stage 2 or both")
    t.add_argument("--stage", choices=("1", "2", "all"), default="all")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--checkpoint", help="stage-1 checkpoint to start stage 2 from")
    _config_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=("train", "val", "test"), default="test")
    e.add_argument("--mode", choices=EVAL_MODES)
    e.add_argument("--out", help="directory for the metrics files (default: the checkpoint's run dir)")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("render-maps", help="heatmap PNGs and per-point score PLY files")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--split", choices=("train", "val", "test"), default="test")
    r.add_argument("--ids", nargs="+", help="sample ids (default: first normal and first anomalous object)")
    r.add_argument("--mode", choices=EVAL_MODES)
    r.add_argument("--out")
    r.set_defaults(func=cmd_render_maps)

    a = sub.add_parser("ablate", help="module ablation grid and hyperparameter sweeps")
    a.add_argument("--config")
    a.add_argument("--data", help="dataset directory (default: generate one under --out)")
    a.add_argument("--out", required=True)
    a.add_argument("--what", choices=("grid", "sweeps", "all"), default="all")
    _config_flags(a)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else ConfigurationError.exit_code
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    torch.set_num_threads(max(args.threads, 1))
    try:
        args.func(args)
    except ZsadError as err:
        print(json.dumps({"error": type(err).__name__, "message": str(err), "exit_code": err.exit_code}),
              file=sys.stderr)
        return err.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
