"""Command-line front end.

    perfhom solve            --config C
    perfhom capacity cm      --ball R | --cube R  [--grid N] [--m M]
    perfhom capacity ca      --ball R | --cube R  --q Q [--grid N] [--config C]
    perfhom capacity scan-b  --config C
    perfhom capacity diag    --ball R --q Q --mu ... [--config C]
    perfhom homog schedule|corrector|density|run  CONFIG
    perfhom validate-config  CONFIG

Exit status: 0 on success, 1 on numerical failure (a partial report is
still written), 2 on configuration or usage errors.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig
from .errors import ConfigError, PerfhomError

log = logging.getLogger("perfhom")


# ------------------------------------------------------------ output

def _atomic_write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, np.generic):
        v = v.item()
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _plain(obj):
    """JSON-safe copy with numpy scalars unwrapped and float keys stringified."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return str(obj)
    return obj


def csv_text(columns, rows, tag: str) -> str:
    buf = io.StringIO()
    buf.write(f"# {tag}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_cell(v) for v in r])
    return buf.getvalue()


def write_outputs(out: Path, tables: dict, manifest: dict, tag: str) -> list:
    written = []
    for name, (cols, rows) in sorted(tables.items()):
        p = out / f"{name}.csv"
        _atomic_write(p, csv_text(cols, rows, tag))
        written.append(p.name)
    manifest = dict(manifest)
    manifest["files"] = sorted(written + ["manifest.json"])
    _atomic_write(out / "manifest.json",
                  json.dumps(_plain(manifest), sort_keys=True, indent=1) + "\n")
    return written


def _tag(hash_: str) -> str:
    return f"perfhom {__version__} config {hash_}"


# ------------------------------------------------------------ config helpers

def _load(args) -> ExperimentConfig:
    path = getattr(args, "config_pos", None) or args.config
    if path is None:
        cfg = ExperimentConfig.from_dict({})
    else:
        cfg = ExperimentConfig.load(path)
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.output is not None:
        over["output"] = args.output
    if over:
        raw = dict(cfg.raw)
        raw.update(over)
        cfg = ExperimentConfig(cfg._normalize(raw), cfg.text, cfg.source)
    return cfg


def _args_hash(cfg: ExperimentConfig, args, keys) -> str:
    blob = json.dumps({"config": cfg.raw, "args": {k: getattr(args, k) for k in keys}},
                      sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _compact_set(args, n):
    from .capacity import CompactSet
    center = tuple(args.center) if args.center else (0.0,) * n
    if args.ball is not None:
        return CompactSet.ball(args.ball, center)
    if args.cube is not None:
        return CompactSet.cube(args.cube, center)
    raise ConfigError("give --ball R or --cube R")


def _label(F) -> str:
    c = ",".join(f"{v:g}" for v in F.center)
    return f"{F.kind}:{F.size:g}@{c}"


def _hs(args) -> list:
    N = int(args.grid)
    if args.single:
        return [1.0 / N]
    return [1.0 / (N * 3 // 4), 1.0 / N]


# ------------------------------------------------------------ commands

def cmd_validate(args, cfg) -> int:
    sys.stdout.write(cfg.normalized_json() + "\n")
    return 0


def cmd_solve(args, cfg) -> int:
    return _run_stages(args, cfg, ["levels"])


def cmd_homog(args, cfg) -> int:
    if args.action == "schedule":
        from .homogenize import build_schedule
        sch = cfg.raw["schedule"]
        if sch is None:
            raise ConfigError(f"{cfg.source}: schedule section missing")
        schedule = build_schedule(sch["rho"], cfg.raw["operator"]["m"], sch.get("mode", "override"),
                                  sch.get("lambda"))
        if args.strict and schedule.mode != "paper":
            raise ConfigError(f"{cfg.source}: strict mode requires schedule mode \"paper\"")
        rows = [[s, *schedule.level(s)] for s in range(1, len(schedule) + 1)]
        manifest = {"version": __version__, "config_hash": cfg.hash, "seed": cfg.raw["seed"],
                    "schedule": schedule.to_json(), "stages": ["schedule"], "failed": None}
        out = Path(cfg.raw["output"])
        write_outputs(out, {"schedule": (["s", "rho", "mu", "lambda"], rows)}, manifest,
                      _tag(cfg.hash))
        sys.stdout.write(json.dumps(_plain(schedule.to_json()), sort_keys=True) + "\n")
        return 0
    stages = {"corrector": ["corrector"], "density": ["density"], "run": None}[args.action]
    return _run_stages(args, cfg, stages)


def _run_stages(args, cfg, stages) -> int:
    from .homogenize import run_experiment
    rep = run_experiment(cfg, threads=args.threads, strict=args.strict, stages=stages)
    manifest = dict(rep.manifest)
    manifest["threads"] = args.threads
    out = Path(cfg.raw["output"])
    write_outputs(out, rep.tables, manifest, _tag(cfg.hash))
    if rep.failed:
        sys.stderr.write(f"error: stage {rep.failed['stage']} failed: {rep.failed['error']}\n"
                         f"partial report written to {out}\n")
        return 1
    sys.stdout.write(f"wrote {out}\n")
    return 0


def cmd_capacity(args, cfg) -> int:
    from . import capacity as cap
    op = cfg.operator(args.strict)
    n = op.n
    out = Path(cfg.raw["output"])
    tol = float(cfg.raw["tolerances"]["solver"])
    m = float(args.m) if args.m is not None else op.m
    if args.action == "cm":
        F = _compact_set(args, n)
        hs = _hs(args)
        est = cap.whole_space_Cm(F, hs, m, margin=args.margin, tol=tol,
                                 method=args.box_correction)
        h = _args_hash(cfg, args, ["ball", "cube", "center", "grid", "single", "m", "margin",
                                   "box_correction"])
        cols = ["set", "q", "r", "m", "value", "method", "hs", "box_values", "corrected"]
        row = [_label(F), 1.0, F.size, m, est.value, est.method,
               ";".join(repr(x) for x in est.hs), ";".join(repr(float(x)) for x in est.box_values),
               ";".join(repr(float(x)) for x in est.corrected)]
        manifest = {"version": __version__, "config_hash": h, "seed": cfg.raw["seed"],
                    "capacity": _plain(est.to_json()), "stages": ["capacity cm"], "failed": None}
        write_outputs(out, {"capacity_cm": (cols, [row])}, manifest, _tag(h))
        sys.stdout.write(csv_text(cols, [row], _tag(h)))
        return 0
    if args.action == "ca":
        from .operator import OperatorSpec
        if args.m is not None:
            op = OperatorSpec(op.kind, m, n, op.nu1, op.nu2, op.weight, args.strict)
        F = _compact_set(args, n)
        hs = _hs(args)
        vals = [cap.compute_CA(op, F, args.q, tol, h=hh, margin=args.margin).value for hh in hs]
        value = cap.richardson(hs, vals) if len(hs) > 1 else vals[0]
        h = _args_hash(cfg, args, ["ball", "cube", "center", "grid", "single", "m", "margin", "q"])
        cols = ["set", "q", "r", "kind", "m", "value", "hs", "box_values"]
        row = [_label(F), args.q, F.size, op.kind, op.m, float(value),
               ";".join(repr(x) for x in hs), ";".join(repr(float(v)) for v in vals)]
        manifest = {"version": __version__, "config_hash": h, "seed": cfg.raw["seed"],
                    "stages": ["capacity ca"], "failed": None}
        write_outputs(out, {"capacity_ca": (cols, [row])}, manifest, _tag(h))
        sys.stdout.write(csv_text(cols, [row], _tag(h)))
        return 0
    if args.action == "scan-b":
        return _run_stages(args, cfg, ["condition_b"])
    if args.action == "diag":
        F = _compact_set(args, n)
        if not args.mu:
            raise ConfigError("diag needs --mu levels")
        h = 1.0 / int(args.grid)
        est = cap.diagnostics_estimates(op, F, args.q, args.mu, args.r or 2 * F.extent, h,
                                        A=args.A, tol=tol, margin=args.margin)
        hh = _args_hash(cfg, args, ["ball", "cube", "center", "grid", "q", "mu", "r", "A",
                                    "margin"])
        cols = ["mu", "lhs_sublevel", "ratio_sublevel", "K1", "K2", "K3", "decay_exponent", "Cm"]
        rows = [[mu, a, b, est.K1, est.K2, est.K3, est.decay_exponent, est.Cm]
                for mu, a, b in zip(est.mu, est.lhs_22, est.ratio_22)]
        manifest = {"version": __version__, "config_hash": hh, "seed": cfg.raw["seed"],
                    "constants": {"K1": est.K1, "K2": est.K2, "K3": est.K3, "Cm": est.Cm,
                                  "decay_exponent": est.decay_exponent},
                    "stages": ["capacity diag"], "failed": None}
        write_outputs(out, {"capacity_diag": (cols, rows)}, manifest, _tag(hh))
        sys.stdout.write(csv_text(cols, rows, _tag(hh)))
        return 0
    raise ConfigError(f"unknown capacity action {args.action}")


# ------------------------------------------------------------ parser

def _common(p):
    p.add_argument("--config", help="experiment JSON")
    p.add_argument("--threads", type=int, default=1, help="worker pool cap")
    p.add_argument("--output", help="output directory (overrides the config)")
    p.add_argument("--seed", type=int, help="seed (overrides the config)")
    p.add_argument("--strict-paper", dest="strict", action="store_true",
                   help="require 2 <= m < n and the integer-part schedule")


def _set_args(p, q_required=False):
    g = p.add_mutually_exclusive_group()
    g.add_argument("--ball", type=float, help="ball radius")
    g.add_argument("--cube", type=float, help="cube half-width")
    p.add_argument("--center", type=float, nargs="+")
    p.add_argument("--grid", type=int, default=64, help="finest grid, h = 1/N")
    p.add_argument("--single", action="store_true", help="one grid, no extrapolation")
    p.add_argument("--margin", type=float, default=1.0, help="box margin around the set")
    p.add_argument("--m", type=float)
    p.add_argument("--q", type=float, default=1.0, required=q_required)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="perfhom", description=__doc__.split("\n")[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="solve the perforated Dirichlet problems")
    _common(p)
    p.add_argument("config_pos", nargs="?", metavar="CONFIG")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("validate-config", help="check and echo a normalized config")
    _common(p)
    p.add_argument("config_pos", nargs="?", metavar="CONFIG")
    p.set_defaults(func=cmd_validate)

    cp = sub.add_parser("capacity", help="capacities and potentials")
    csub = cp.add_subparsers(dest="action", required=True)
    for name, hlp in (("cm", "whole-space m-capacity"), ("ca", "generalized capacity C_A"),
                      ("scan-b", "Condition B scan"), ("diag", "potential estimates")):
        p = csub.add_parser(name, help=hlp)
        _common(p)
        p.add_argument("config_pos", nargs="?", metavar="CONFIG")
        _set_args(p)
        if name == "cm":
            p.add_argument("--box-correction", choices=("harmonic", "two-box", "none"))
        if name == "diag":
            p.add_argument("--mu", type=float, nargs="+")
            p.add_argument("--r", type=float)
            p.add_argument("--A", type=float)
        p.set_defaults(func=cmd_capacity)

    hp = sub.add_parser("homog", help="homogenization experiments")
    hsub = hp.add_subparsers(dest="action", required=True)
    for name in ("schedule", "corrector", "density", "run"):
        p = hsub.add_parser(name)
        _common(p)
        p.add_argument("config_pos", nargs="?", metavar="CONFIG")
        p.set_defaults(func=cmd_homog)
    return ap


def main(argv=None) -> int:
    level = getattr(logging, os.environ.get("PERFHOM_LOG", "WARNING").upper(), logging.WARNING)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        cfg = _load(args)
        return args.func(args, cfg)
    except ConfigError as e:
        sys.stderr.write(f"config error: {e}\n")
        return 2
    except (PerfhomError, ArithmeticError, RuntimeError, ValueError) as e:
        sys.stderr.write(f"error: {type(e).__name__}: {e}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
