"""``distill-lab`` command-line entry point.

Output directory: ``--out`` if given, else ``$DISTILL_LAB_OUT/<name>`` or
``<experiment.out>/<name>``. An existing non-empty directory is only replaced
with ``--overwrite``, and only if it looks like one of ours (has a
``resolved.cfg`` or ``MANIFEST``). Exit codes: 0 ok, 1 a run failed, 2 bad
input.
"""

from __future__ import annotations

import argparse
import logging
import os
import shutil
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, dump_config, parse_config
from .experiments import SAMPLE_COLUMNS, _csv_text, plan_runs, run_experiment, run_sampling, run_training
from .report import ReportError, write_report

log = logging.getLogger("distill_lab")


class UsageError(RuntimeError):
    pass


def _out_dir(args, spec, leaf: str) -> Path:
    if args.out:
        return Path(args.out)
    root = os.environ.get("DISTILL_LAB_OUT") or spec.get("experiment", "out")
    return Path(root) / leaf


def _prepare(out: Path, overwrite: bool) -> None:
    if out.exists() and any(out.iterdir()):
        if not overwrite:
            raise UsageError(f"{out} already exists and is not empty; pass --overwrite to replace it")
        if not ((out / "resolved.cfg").exists() or (out / "MANIFEST").exists()):
            raise UsageError(f"refusing to overwrite {out}: it does not look like a distill-lab output directory")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)


def _write(out: Path, files: dict) -> None:
    for rel in sorted(files):
        path = out / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        data = files[rel]
        if isinstance(data, bytes):
            path.write_bytes(data)
        else:
            path.write_text(data)


def _load(args):
    spec = parse_config(args.config)
    if args.seed is not None:
        spec = spec.with_value("run", "seed", args.seed)
    return spec


def cmd_run(args) -> int:
    spec = _load(args)
    out = _out_dir(args, spec, spec.name)
    plans = plan_runs(spec)
    _prepare(out, args.overwrite)
    _write(out, {"MANIFEST": "".join(f"{p.run_id} incomplete\n" for p in plans)})
    log.info("running %s: %d run(s) into %s", spec.name, len(plans), out)
    files, manifest = run_experiment(spec, jobs=args.jobs)
    _write(out, files)
    failed = [(rid, st) for rid, st in manifest if st != "complete"]
    for rid, st in failed:
        log.error("run %s %s", rid, st)
    try:
        write_report(out)
    except ReportError as exc:
        log.warning("no plots: %s", exc)
    return 1 if failed else 0


def cmd_train(args) -> int:
    spec = _load(args)
    out = _out_dir(args, spec, "train")
    _prepare(out, args.overwrite)
    _write(out, run_training(spec))
    log.info("denoiser written to %s", out / spec.get("train", "out_file"))
    return 0


def cmd_sample(args) -> int:
    spec = _load(args)
    out = _out_dir(args, spec, "sample")
    _prepare(out, args.overwrite)
    row, files = run_sampling(spec, np.random.default_rng(spec.get("run", "seed")), "sample")
    files["summary.csv"] = _csv_text(SAMPLE_COLUMNS, [row])
    files["resolved.cfg"] = dump_config(spec)
    _write(out, files)
    return 0


def cmd_report(args) -> int:
    for path in write_report(args.dir):
        print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="distill-lab", description="Score-distillation experiments on analytic priors.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, func, helptext in (("run", cmd_run, "run a named experiment"),
                                 ("train", cmd_train, "train an MLP denoiser"),
                                 ("sample", cmd_sample, "draw DDIM chain samples")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("config")
        p.add_argument("--seed", type=int, default=None, help="override run.seed")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--overwrite", action="store_true", help="replace an existing output directory")
        if name == "run":
            p.add_argument("--jobs", type=int, default=1, help="concurrent sweep runs")
        p.set_defaults(func=func)
    p = sub.add_parser("report", help="render SVG charts for an output directory")
    p.add_argument("dir")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "jobs", 1) < 1:
        print("distill-lab: --jobs must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (ConfigError, UsageError, ReportError, OSError, ValueError, KeyError) as exc:
        print(f"distill-lab: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
