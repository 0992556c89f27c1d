"""Command-line entry point: ``litevio <subcommand> [options]``.

Every subcommand works inside one run directory (``--out``). A relative
``--out`` is resolved under ``$LITEVIO_OUT_ROOT`` when that is set. On
failure the last stderr line is ``litevio-error: {json}`` and the exit
status is 1; usage errors exit with status 2.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import torch

from ..geometry import read_kitti_poses, trajectory_to_deltas
from . import protocols as P
from .artifacts import emit_artifacts
from .config import load_config, parse_schedule
from .report import MetricsReport, make_sequence, provenance, render_table, verify_report

OUT_ROOT_ENV = "LITEVIO_OUT_ROOT"
log = logging.getLogger("litevio")


def _seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment config (or a shipped name: desk, golden)")
    common.add_argument("--seed", type=int, help="master seed for data, initialization and training")
    common.add_argument("--seeds", type=_seeds, help="comma-separated evaluation seeds")
    common.add_argument("--profile", choices=["desk", "paper"], help="network profile")
    common.add_argument("--out", help="run directory")
    common.add_argument("--workers", type=int, help="parallel seed runs")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="litevio", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    sub.add_parser("gen-data", parents=[common], help="generate synthetic training and proxy streams")
    sub.add_parser("train", parents=[common], help="two-stage training; writes model.pt")
    sub.add_parser("init-proxies", parents=[common], help="compute domain proxies; writes proxies.json")
    p = sub.add_parser("adapt-online", parents=[common], help="continual or single-shift protocol")
    p.add_argument("--protocol", choices=["continual", "single-shift"])
    p.add_argument("--eta", type=float, help="adaptation learning rate")
    p.add_argument("--schedule", help="noise schedule: inline YAML/JSON list or a file")
    p = sub.add_parser("adapt-stationary", parents=[common], help="stationary-noise protocol")
    p.add_argument("--eta", type=float, help="adaptation learning rate")
    p.add_argument("--epochs", type=int, help="adaptation passes over each stream")
    p = sub.add_parser("finetune-baseline", parents=[common], help="fine-tune per-noise baselines")
    p.add_argument("--noises", help="comma-separated noises (default: stationary noises)")
    p = sub.add_parser("eval", parents=[common],
                       help="compare KITTI pose files, or evaluate the model on clean streams")
    p.add_argument("--pred", help="predicted KITTI pose file")
    p.add_argument("--gt", help="ground-truth KITTI pose file")
    p = sub.add_parser("report", parents=[common], help="verify reports and emit artifacts")
    p.add_argument("reports", nargs="*", help="report.json files or directories (default: all in --out)")
    p.add_argument("--no-plots", action="store_true")
    return parser


def _resolve_out(arg, cfg) -> Path:
    out = Path(arg or cfg.out)
    root = os.environ.get(OUT_ROOT_ENV)
    if root and not out.is_absolute():
        out = Path(root) / out
    return out


def _write_report(report: MetricsReport, folder: Path) -> Path:
    path = report.save(folder / "report.json")
    print(render_table(report))
    print(f"report: {path}")
    return path


def _find_reports(paths, out: Path) -> list[Path]:
    if not paths:
        found = sorted(out.glob("*/report.json"))
        if not found:
            raise FileNotFoundError(f"no reports under {out}")
        return found
    result = []
    for p in map(Path, paths):
        p = p / "report.json" if p.is_dir() else p
        if not p.exists():
            raise FileNotFoundError(f"report not found: {p}")
        result.append(p)
    return result


def run(args) -> int:
    cfg = load_config(args.config)
    changes = {"seed": args.seed, "profile": args.profile, "workers": args.workers,
               "seeds": args.seeds}
    cfg = cfg.replace(**changes)
    torch.set_num_threads(cfg.threads)
    out = _resolve_out(args.out, cfg)
    out.mkdir(parents=True, exist_ok=True)
    cmd = args.command

    if cmd == "gen-data":
        print(f"data: {P.gen_data(cfg, out)}")
    elif cmd == "train":
        print(f"checkpoint: {P.train_model(cfg, out)}")
    elif cmd == "init-proxies":
        print(f"proxies: {P.build_proxies(cfg, out)}")
    elif cmd == "adapt-online":
        protocol = args.protocol or (cfg.protocol if cfg.protocol != "stationary" else "continual")
        schedule = None
        if args.schedule:
            T = cfg.continual.length if protocol == "continual" else cfg.single_shift.length
            schedule = parse_schedule(args.schedule, T)
        report = P.run_protocol(cfg, protocol, out, eta=args.eta, schedule=schedule)
        _write_report(report, out / protocol)
    elif cmd == "adapt-stationary":
        if args.epochs is not None:
            cfg = cfg.replace(stationary={**cfg.to_dict()["stationary"], "epochs": args.epochs})
        report = P.run_protocol(cfg, "stationary", out, eta=args.eta)
        _write_report(report, out / "stationary")
    elif cmd == "finetune-baseline":
        noises = args.noises.split(",") if args.noises else None
        for path in P.finetune_baselines(cfg, out, noises):
            print(f"checkpoint: {path}")
    elif cmd == "eval":
        if bool(args.pred) != bool(args.gt):
            raise ValueError("eval needs both --pred and --gt, or neither")
        if args.pred:
            pred = trajectory_to_deltas(read_kitti_poses(args.pred))
            gt = trajectory_to_deltas(read_kitti_poses(args.gt))
            seq = make_sequence(0, "file", {"gt": gt, "baseline": pred,
                                            "label": [0] * len(gt)})
            report = MetricsReport("eval", [seq], {"pred": str(args.pred), "gt": str(args.gt)},
                                   [], provenance())
        else:
            report = P.run_protocol(cfg, "clean", out)
        _write_report(report, out / "eval")
    elif cmd == "report":
        for path in _find_reports(args.reports, out):
            report = MetricsReport.load(path)
            problems = verify_report(report)
            if problems:
                raise ValueError(f"{path}: report is not self-consistent: {'; '.join(problems)}")
            emit_artifacts(report, path.parent, plots=not args.no_plots)
            print(render_table(report))
            print(f"artifacts: {path.parent}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)   # exits with status 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except Exception as e:  # noqa: BLE001 - reported as a machine-readable line
        if args.verbose:
            log.exception("command failed")
        err = {"command": args.command, "error": type(e).__name__, "message": str(e)}
        print(f"litevio-error: {json.dumps(err)}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
