"""Command-line front end.

Every study command takes ``--config`` (a JSON run config) and ``--out``
(a run directory). Stages read their inputs from the run directory layout
described in :mod:`modens.pipeline`.

Exit codes: 0 success, 2 usage, 3 data error, 4 numeric error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import pipeline
from .data import atomic_write_bytes, dumps_json, read_datasets
from .errors import DataError, ModensError, NumericError
from .model import load_ckpt

log = logging.getLogger("modens")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _config(args) -> dict:
    path = Path(args.config)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        return pipeline.load_config(path)
    except json.JSONDecodeError as e:
        raise UsageError(f"config is not valid JSON: {e}") from e


def cmd_init_config(args):
    atomic_write_bytes(Path(args.out), dumps_json(pipeline.DEFAULT_CONFIG).encode())


def cmd_gen_data(args):
    ds = pipeline.stage_data(_config(args), args.out)
    print(f"wrote {len(ds)} datasets to {Path(args.out) / 'data'}")


def cmd_train_modes(args):
    ckpts = pipeline.stage_modes(_config(args), args.out)
    for c in ckpts:
        print(f"{c.mode_id}\ttest_accuracy={c.train_meta['final_test_accuracy']:.4f}")


def cmd_dump(args):
    paths = [Path(p) for p in args.ckpt]
    for p in paths:
        if not p.is_file():
            raise DataError(f"checkpoint not found: {p}")
    ckpts = [load_ckpt(p) for p in paths]
    datasets = read_datasets(args.datasets)
    if args.names:
        missing = sorted(set(args.names) - set(datasets))
        if missing:
            raise DataError(f"unknown datasets: {', '.join(missing)}")
        datasets = {n: datasets[n] for n in args.names}
    pipeline.dump_modes(ckpts, datasets, args.out)
    print(f"dumped {len(ckpts)} modes x {len(datasets)} datasets to {args.out}")


def cmd_eval(args):
    reports = pipeline.stage_eval(_config(args), args.out)
    print(f"{len(reports)} detection reports in {Path(args.out) / 'eval'}")


def cmd_landscape(args):
    summary = pipeline.stage_landscape(_config(args), args.out)
    for name, p in summary["planes"].items():
        print(f"{name}\tanchor_loss_ratio={p['anchor_loss_ratio']:.3f}")


def cmd_theory(args):
    rep = pipeline.stage_theory(_config(args), args.out)
    print(f"inequality holds in {rep['n_holds']}/{rep['n_trials']} trials")


def cmd_ablate(args):
    s = pipeline.stage_ablation(_config(args), args.out)
    for fam, v in s["families"].items():
        print(f"{fam}\tmean_fpr95={v['mean_fpr95']:.4f}")


def cmd_reproduce(args):
    t0 = time.perf_counter()
    pipeline.reproduce(_config(args), args.out)
    print(f"reproduce finished in {time.perf_counter() - t0:.1f}s -> {args.out}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="modens", description="Mode-ensemble OoD detection study.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def study(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", required=True, help="run config JSON")
        sp.add_argument("--out", required=True, help="run directory")
        sp.set_defaults(fn=fn)

    sp = sub.add_parser("init-config", help="write the default run config")
    sp.add_argument("--out", required=True, help="destination JSON path")
    sp.set_defaults(fn=cmd_init_config)
    study("gen-data", cmd_gen_data, "generate the synthetic benchmark")
    study("train-modes", cmd_train_modes, "train one mode per seed")
    sp = sub.add_parser("dump", help="write logits/features of checkpoints on datasets")
    sp.add_argument("--ckpt", nargs="+", required=True, help="MCKP checkpoint files")
    sp.add_argument("--datasets", required=True, help="dataset manifest or its directory")
    sp.add_argument("--names", nargs="+", help="subset of dataset names (default all)")
    sp.add_argument("--out", required=True, help="dump directory")
    sp.set_defaults(fn=cmd_dump)
    study("eval", cmd_eval, "score all detectors over ensemble subsets")
    study("landscape", cmd_landscape, "loss planes, slices and feature trajectories")
    study("theory", cmd_theory, "linear-mode probit gap sweep")
    study("ablate", cmd_ablate, "independent vs subspace-sampled ensembles")
    study("reproduce", cmd_reproduce, "run the whole study end to end")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse: 0 for --help, 2 for usage
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        args.fn(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except ModensError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
