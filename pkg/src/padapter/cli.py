"""Command-line entry point: ``padapter {verify,train,ablate,dump-attention,spectral-report}``.

Exit codes: 0 success, 1 verification or run failure, 2 usage or config error.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

from . import config as cf
from . import runs
from . import verify as vf
from .message_passing import inject_mbar_fault
from .model import CheckpointError
from .trainer import NoTrainableParams

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _json_default(o):
    if isinstance(o, float) and not math.isfinite(o):
        return None
    if hasattr(o, "tolist"):
        return o.tolist()
    raise TypeError(f"not serializable: {type(o).__name__}")


def _dump_json(obj) -> str:
    def clean(x):
        if isinstance(x, float) and not math.isfinite(x):
            return None
        if isinstance(x, dict):
            return {k: clean(v) for k, v in x.items()}
        if isinstance(x, (list, tuple)):
            return [clean(v) for v in x]
        return x
    return json.dumps(clean(obj), indent=2, sort_keys=True, default=_json_default)


def _common(p: argparse.ArgumentParser, out_default: str) -> None:
    p.add_argument("--config", type=Path, help="TOML config file (defaults: configs/default.toml)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", type=Path, default=Path(out_default), help="output directory")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted config override, repeatable (e.g. adapter.kind=p_adapter)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="padapter", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="run the invariant checks")
    _common(p, "runs/verify")
    p.add_argument("--filter", action="append", default=[],
                   help=f"group or check-name substring, repeatable; groups: {', '.join(vf.GROUPS)}")
    p.add_argument("--inject-fault", type=float, nargs="?", const=1.01, default=None, help=argparse.SUPPRESS)

    p = sub.add_parser("train", help="train one configuration")
    _common(p, "runs/train")

    p = sub.add_parser("ablate", help="run the ablation grids")
    _common(p, "runs/ablate")
    p.add_argument("--jobs", type=int, default=1, help="parallel cells")
    p.add_argument("--grid", action="append", default=None, choices=sorted(cf.ABLATION_GRIDS),
                   help="grid to run, repeatable (default: ablation.grids)")

    p = sub.add_parser("dump-attention", help="write M.csv / M_bar.csv from a checkpoint")
    _common(p, "runs/dump")
    p.add_argument("--checkpoint", type=Path, required=True, help="checkpoint directory")

    p = sub.add_parser("spectral-report", help="band energies before/after one p-step")
    _common(p, "runs/spectral")
    return parser


def cmd_verify(args, cfg) -> int:
    filters = [f for item in args.filter for f in item.split(",") if f]
    try:
        vf.select(filters)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.inject_fault is not None:
        with inject_mbar_fault(args.inject_fault):
            results = vf.run_checks(filters)
    else:
        results = vf.run_checks(filters)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status}  {r.name:42s} error={r.error:.3e} tol={r.tol:.1e}  ({r.seconds:.2f}s)")
    report = vf.report_dict(results)
    report["config"] = cfg
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "verify.json").write_text(_dump_json(report))
    if not report["passed"]:
        print("violated invariants: " + ", ".join(report["failed"]), file=sys.stderr)
        return EXIT_FAIL
    print(f"all {len(results)} checks passed")
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    report, model = runs.run_training(cfg, args.out)
    init = report.losses[0] if report.losses else float("nan")
    final = sum(report.losses[-20:]) / max(len(report.losses[-20:]), 1)
    print(f"{report.status}: {len(report.losses)} steps, loss {init:.4f} -> {final:.4f}, "
          f"p per layer {[round(p, 4) for p in model.layer_p() if math.isfinite(p)]}; wrote {args.out}")
    return EXIT_OK if report.status == "ok" else EXIT_FAIL


def cmd_ablate(args, cfg) -> int:
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    res = runs.run_ablation(cfg, args.out, args.jobs, args.grid)
    print(f"{res['cells']} cells; summary at {args.out / 'summary.csv'}")
    if res["failed"]:
        print("failed cells: " + ", ".join(res["failed"]), file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_dump_attention(args, cfg) -> int:
    info = runs.dump_from_checkpoint(args.checkpoint, cfg, args.out)
    if not info["files"]:
        print("error: nothing captured", file=sys.stderr)
        return EXIT_FAIL
    print("wrote " + ", ".join(str(args.out / f) for f in info["files"]))
    return EXIT_OK


def cmd_spectral_report(args, cfg) -> int:
    rep = runs.spectral_report(cfg)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "spectral.json").write_text(_dump_json(rep))
    for p, r in rep["high_retention_by_p"].items():
        print(f"p={p}: high-band retention {r:.4f}")
    return EXIT_OK


COMMANDS = {"verify": cmd_verify, "train": cmd_train, "ablate": cmd_ablate,
            "dump-attention": cmd_dump_attention, "spectral-report": cmd_spectral_report}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = cf.load_config(args.config, args.overrides, args.seed)
        cf.model_config(cfg)
        return COMMANDS[args.command](args, cfg)
    except (cf.ConfigError, CheckpointError, NoTrainableParams) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
