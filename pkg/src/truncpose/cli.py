"""Command-line entry point: ``truncpose <command> ...``.

Commands:
    inspect NAME        spec dump with parameter and FLOPs breakdown
    generate            write synthetic dataset shards
    train               train from an experiment config
    eval                evaluate a checkpoint and write an EvalReport
    sweep               cost (and optional score) table for many models as CSV
    report              accuracy/compute trade-off table from EvalReports

Exit status: 0 on success, 1 on usage errors (bad flags, bad model names),
2 on runtime failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .layers import ConfigError


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def _hw(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    return h, w


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="truncpose", description="Truncated hierarchical encoders for pose and mesh recovery.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    s = sub.add_parser("inspect", help="print the resolved spec, params and FLOPs of a model")
    s.add_argument("name")
    s.add_argument("--profile", choices=("full", "toy"), default="full")
    s.add_argument("--input-hw", type=_hw, default=None, help="input size as HxW (default 256x192, toy 64x64)")
    s.add_argument("--json", action="store_true", help="emit JSON only")

    s = sub.add_parser("generate", help="write synthetic dataset shards")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--input-hw", type=_hw, default=(64, 64))
    s.add_argument("--noise", type=float, default=0.1)
    s.add_argument("--occlusion", type=float, default=0.0)
    s.add_argument("--shard-size", type=int, default=256)
    s.add_argument("--workers", type=int, default=1)

    s = sub.add_parser("train", help="train from an experiment config")
    s.add_argument("--config", required=True)
    s.add_argument("--data", help="dataset directory (default: generate from the config)")

    s = sub.add_parser("eval", help="evaluate a checkpoint")
    s.add_argument("--config", required=True)
    s.add_argument("--checkpoint", help="default: <output_dir>/final.tpck")
    s.add_argument("--data", help="dataset directory (default: generate from the config)")
    s.add_argument("--task", choices=("HPE", "HMR"))
    s.add_argument("--out", help="report path (default: <output_dir>/report.json); CSV rows go next to it")

    s = sub.add_parser("sweep", help="CSV of params/FLOPs (and scores) over model names")
    s.add_argument("names", nargs="*")
    s.add_argument("--all-hierarchical", action="store_true", help="all 27 truncated models of --task")
    s.add_argument("--task", choices=("pose", "hmr"), default="pose")
    s.add_argument("--profile", choices=("full", "toy"), default="full")
    s.add_argument("--input-hw", type=_hw, default=None)
    s.add_argument("--reports", nargs="*", default=[], help="EvalReport JSON files to fill the score columns")
    s.add_argument("--out", help="write CSV here instead of stdout")

    s = sub.add_parser("report", help="trade-off table from EvalReport files")
    s.add_argument("reports", nargs="+")
    return p


def _inspect(args) -> int:
    from .cost import cost_report
    from .models import build_model

    model = build_model(args.name, args.profile, args.input_hw)
    rep = cost_report(model)
    info = model.describe()
    info["params"] = rep.params
    info["gflops"] = rep.gflops
    info["components"] = rep.per_component
    if args.json:
        print(json.dumps(info, indent=2, sort_keys=True))
        return 0
    enc = info["encoder"]
    print(f"model      {info['name']}  (task {info['task']}, profile {info['profile']})")
    print(f"input      {info['input_hw'][0]}x{info['input_hw'][1]}")
    print(f"encoder    {enc['family']}-{enc['size']} dims={list(enc['stage_dims'])} depths={list(enc['stage_depths'])}")
    if "adapter" in info:
        a = info["adapter"]
        print(f"adapter    {a['kind']} {a['in_channels']}->{a['out_channels']} k={a['kernel']} s={a['stride']} p={a['padding']}")
    print(f"params     {rep.params:,} ({rep.params_m:.3f} M)")
    print(f"flops      {rep.gflops:.3f} GFLOPs")
    for comp, c in rep.per_component.items():
        print(f"  {comp:<22} params={c['params']:>12,}  flops={c['flops']:>16,}")
    return 0


def _generate(args) -> int:
    from .data import generate_dataset

    paths = generate_dataset(args.out, args.n, args.seed, args.input_hw, args.noise, args.occlusion,
                             args.shard_size, args.workers)
    for p in paths:
        print(p)
    return 0


def _records(cfg, data_dir):
    from .data import generate_records, load_dataset

    if data_dir:
        return load_dataset(data_dir)
    d = cfg.data
    return generate_records(d.n_samples, cfg.seed, d.hw, d.noise, d.occlusion)


def _train(args) -> int:
    from .config import load_config
    from .train import train

    cfg = load_config(args.config)
    res = train(cfg, _records(cfg, args.data))
    print(f"steps {len(res.losses)}  final loss {res.losses[-1] if res.losses else float('nan'):.6g}  "
          f"best {res.best_loss:.6g} @ {res.best_step}")
    print(f"checkpoints {res.final_path} {res.best_path}")
    return 0


def _eval(args) -> int:
    import numpy as np

    from .checkpoint import load_checkpoint
    from .config import load_config
    from .evaluate import evaluate, report_rows, write_report
    from .models import build_model

    cfg = load_config(args.config)
    model = build_model(cfg.model, cfg.profile, cfg.data.hw)
    model.init_weights(np.random.default_rng(0))
    ckpt = Path(args.checkpoint) if args.checkpoint else cfg.output_path / "final.tpck"
    load_checkpoint(ckpt, model)
    rep = evaluate(model, _records(cfg, args.data), args.task)
    out = Path(args.out) if args.out else cfg.output_path / "report.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_report(rep, out)
    out.with_suffix(".csv").write_text(report_rows(rep))
    print(json.dumps(rep.to_dict(), indent=2, sort_keys=True))
    return 0


def _sweep(args) -> int:
    from .cost import sweep
    from .evaluate import read_report
    from .truncation import all_hierarchical_names

    names = list(args.names)
    if args.all_hierarchical:
        names += all_hierarchical_names("HPE" if args.task == "pose" else "HMR")
    if not names:
        raise UsageError("sweep: give model names or --all-hierarchical")
    reports = {r.model: r for r in map(read_report, args.reports)}
    text, errors = sweep(names, reports, args.input_hw, args.profile)
    if args.out:
        Path(args.out).write_bytes(text.encode("utf-8"))
    else:
        sys.stdout.write(text)
    if errors:
        print("errors:", file=sys.stderr)
        for e in errors:
            print(f"  {e}", file=sys.stderr)
    return 0


def _report(args) -> int:
    from .evaluate import read_report, tradeoff_table

    sys.stdout.write(tradeoff_table([read_report(p) for p in args.reports]))
    return 0


COMMANDS = {"inspect": _inspect, "generate": _generate, "train": _train, "eval": _eval,
            "sweep": _sweep, "report": _report}


def main(argv=None) -> int:
    from .truncation import ModelNameError

    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(str(exc))
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        sys.stderr.write(f"truncpose: {exc}\n")
        return 1
    except ModelNameError as exc:
        sys.stderr.write(f"truncpose: {exc}\n")
        return 1
    except (ConfigError, OSError, ValueError, RuntimeError, ArithmeticError) as exc:
        sys.stderr.write(f"truncpose: {type(exc).__name__}: {exc}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
