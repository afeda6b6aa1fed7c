"""Command line entry point: ``fleasim run | partition | probe | report``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import VALID_KEYS, parse_config
from .errors import FleaError


def _kv(text: str) -> tuple[str, object]:
    key, sep, raw = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def _config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat JSON config file")
    p.add_argument("--seed", type=int, action="append", help="seed (repeatable); replaces the config's seeds")
    p.add_argument("--strategy", help="flea, fedavg, fedprox, fedmix or feddata")
    p.add_argument("--rounds", type=int, help="communication rounds T")
    p.add_argument("--lambda2", type=float, help="weight of the de-correlation loss")
    p.add_argument("--alpha", type=float, help="share of local data whose features are sent")
    p.add_argument("--out", help="output directory (default: $FLEASIM_OUT/<setting>/<method>)")
    p.add_argument("--threads", type=int, help="clients trained concurrently per round")
    p.add_argument("--set", type=_kv, action="append", default=[], metavar="KEY=VALUE",
                   help="any other config key; VALUE is parsed as JSON when possible")


def _load(args):
    overrides = dict(args.set)
    for key in ("strategy", "rounds", "lambda2", "alpha", "out", "threads"):
        overrides[key] = getattr(args, key)
    overrides["seeds"] = args.seed
    return parse_config(args.config, overrides)


def cmd_run(args) -> int:
    from .experiment import run_experiment

    cfg = _load(args)
    status = run_experiment(cfg)
    out = cfg.output_dir()
    summary = json.loads((out / "summary.json").read_text())
    acc = summary["final_accuracy"]
    print(f"{out}\t{cfg.strategy}\tfinal={acc['mean']:.4f}+-{acc['std']:.4f}\tok={summary['n_ok']}/{len(cfg.seeds)}")
    return status


def cmd_partition(args) -> int:
    from .data import partition, write_manifest
    from .experiment import build_data, partition_spec

    cfg = _load(args)
    seed = cfg.seeds[0]
    train, _ = build_data(cfg, seed)
    clients = partition(train, partition_spec(cfg, seed))
    path = args.out or "partition.json"
    write_manifest(path, clients, partition_spec(cfg, seed))
    sizes = [len(c) for c in clients]
    print(f"{path}\tclients={len(clients)}\tmin={min(sizes)}\tmax={max(sizes)}\ttotal={sum(sizes)}")
    return 0


def cmd_probe(args) -> int:
    from .experiment import probe_run
    from .probe import samples_to_reach

    reports = probe_run(args.run_dir, args.seed, round_t=args.round, marker_amplitude=args.marker_amplitude)
    rec = reports["reconstruction"]
    print(f"reconstruction\tsize={rec.train_sizes[0]}\tmse={rec.curve[0]:.6f}\tc_bar={rec.mean_dcor:.4f}")
    for key in ("context", "context_averages"):
        r = reports[key]
        curve = ",".join(f"{v:.3f}" for v in r.curve)
        print(f"{key}\tsizes={','.join(map(str, r.train_sizes))}\tacc={curve}\tn90={samples_to_reach(r)}")
    return 0


def cmd_report(args) -> int:
    from .report import report

    result = report(args.run_dirs, args.out, figures=args.figures)
    print((Path(args.out) / "table.txt").read_text(), end="")
    for d in result["absent"]:
        print(f"absent\t{d}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fleasim", description="Federated feature-sharing simulator")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train every seed of a config and write metrics")
    _config_args(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("partition", help="write the client partition manifest only")
    _config_args(p)
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("probe", help="attack the checkpointed model of a finished run")
    p.add_argument("run_dir")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--round", type=int, help="checkpoint round (default: latest)")
    p.add_argument("--marker-amplitude", type=float, default=1.0)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("report", help="tables and curves across run directories")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--out", default="report")
    p.add_argument("--figures", action="store_true", help="also render PNG figures (needs matplotlib)")
    p.set_defaults(func=cmd_report)
    parser.epilog = "config keys: " + ", ".join(VALID_KEYS)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (FleaError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
