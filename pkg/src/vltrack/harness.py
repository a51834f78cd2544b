"""Command-line front door.

Subcommands: train, eval, gradcheck, fixtures, generate-world.  Every write
goes through a temp file and a rename.  Exit codes: 0 success, 1 invalid
input (config, files), 2 numeric or acceptance failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from . import numerics as nx
from .config import ConfigError, ExperimentConfig, dump_config, load_config, micro_config
from .embedding import ALL_MODES, Mode
from .fixtures import FixtureError, export_fixtures, format_results, verify_fixtures
from .gradcheck import run_gradcheck
from .runtime import TrackingError, evaluate_model, evaluation_sequences, format_trajectory, setting_for, Tracker
from .training import FormatError, TrainingError, atomic_write_bytes, load_checkpoint, save_checkpoint, train
from .world import export_sequence, generate_sequence

log = logging.getLogger("vltrack")

EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 1, 2
REPORT_FORMAT = "vltrack-report"
REPORT_VERSION = 1
OUT_ENV = "VLTRACK_OUT"


class ReportMismatch(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# helpers


def output_dir(arg: str | None, command: str) -> Path:
    """--out wins, then $VLTRACK_OUT, then ./runs/<command>."""
    if arg:
        return Path(arg)
    env = os.environ.get(OUT_ENV)
    if env:
        return Path(env)
    return Path("runs") / command


def write_text(path, text: str) -> Path:
    atomic_write_bytes(path, text.encode())
    return Path(path)


def parse_modes(text: str) -> list:
    if text == "all":
        return list(ALL_MODES)
    return [Mode.parse(text)]


def resolve_config(path, seed) -> ExperimentConfig:
    cfg = load_config(path) if path else ExperimentConfig().validate()
    if seed is not None:
        cfg = replace(cfg, train=replace(cfg.train, seed=int(seed)))
    return cfg.validate()


def metrics_block(results: dict) -> dict:
    out = {}
    for mode in ALL_MODES:
        if mode in results:
            r = results[mode]
            out[mode.value] = {
                "mean_iou": float(r.metrics.mean_iou),
                "success_auc": float(r.metrics.success_auc),
                "precision": float(r.metrics.precision),
                "sequences": len(r.per_sequence),
            }
            if mode == Mode.NL:
                out[mode.value]["grounding_failures"] = int(r.grounding_failures)
    return out


def build_report(cfg: ExperimentConfig, results: dict, seconds: float, artifacts: dict) -> dict:
    """Report with a fixed key order; ``settings`` is the deterministic part."""
    return {
        "format": REPORT_FORMAT,
        "version": REPORT_VERSION,
        "config_digest": cfg.digest(),
        "seed": int(cfg.train.seed),
        "settings": metrics_block(results),
        "wall_clock_seconds": round(float(seconds), 3),
        "artifacts": {k: str(v) for k, v in artifacts.items()},
    }


def dump_report(report: dict) -> str:
    return yaml.safe_dump(report, sort_keys=False)


def _evaluate(model, cfg: ExperimentConfig, modes):
    seqs = evaluation_sequences(cfg.world, cfg.eval)
    return seqs, evaluate_model(model, seqs, modes, cfg.eval.precision_threshold)


def _write_figures(out: Path, results: dict, history=None) -> dict:
    from .plots import loss_curve, success_plot
    arts = {"success_plot": success_plot({m.value: r.ious for m, r in results.items()}, out / "success_plot.png")}
    if history is not None:
        arts["loss_curve"] = loss_curve(history, out / "loss_curve.png")
    return arts


def _history_csv(history) -> str:
    cols = ("total", "l_tgt", "l_cls", "l_l1", "l_giou", "l_box", "mmc_sum")
    lines = ["step," + ",".join(cols)]
    for k, h in enumerate(history):
        d = h.as_dict()
        lines.append(f"{k + 1}," + ",".join(repr(float(d[c])) for c in cols))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg = resolve_config(args.config, args.seed)
    out = output_dir(args.out, "train")
    start = time.perf_counter()
    log.info("training %d steps (config %s)", cfg.train.steps, cfg.digest())
    result = train(cfg, checkpoint_dir=out / "checkpoints")
    ckpt = save_checkpoint(result.model, out / "model.ckpt")
    results = _evaluate(result.model, cfg, parse_modes(args.mode))[1]
    arts = {"checkpoint": ckpt, "config": write_text(out / "config.yaml", dump_config(cfg)),
            "loss_history": write_text(out / "loss_history.csv", _history_csv(result.history))}
    arts.update(_write_figures(out, results, result.history))
    report = build_report(cfg, results, time.perf_counter() - start, arts)
    write_text(out / "report.yaml", dump_report(report))
    sys.stdout.write(dump_report(report))
    return EXIT_OK


def compare_reports(recorded: dict, fresh: dict) -> list:
    """Differences that matter for reproducibility: digest and every metric."""
    problems = []
    if recorded.get("config_digest") != fresh["config_digest"]:
        problems.append(f"config digest {recorded.get('config_digest')} != {fresh['config_digest']}")
    for mode, vals in fresh["settings"].items():
        old = (recorded.get("settings") or {}).get(mode)
        if old is None:
            problems.append(f"setting {mode} missing from the recorded report")
            continue
        for key, val in vals.items():
            if old.get(key) != val:
                problems.append(f"{mode}.{key}: recorded {old.get(key)!r}, now {val!r}")
    return problems


def cmd_eval(args) -> int:
    cfg = resolve_config(args.config, args.seed)
    if args.against:
        recorded = yaml.safe_load(Path(args.against).read_text())
        if recorded.get("config_digest") != cfg.digest():
            log.error("config drift: report digest %s, config digest %s", recorded.get("config_digest"),
                      cfg.digest())
            return EXIT_INVALID
    out = output_dir(args.out, "eval")
    start = time.perf_counter()
    model = load_checkpoint(args.checkpoint, expected=cfg.model)
    modes = parse_modes(args.mode)
    seqs, results = _evaluate(model, cfg, modes)
    arts = {"checkpoint": Path(args.checkpoint)}
    if args.trajectories:
        tracker = Tracker(model)
        tdir = out / "trajectories"
        for mode in modes:
            for seq in seqs:
                traj, _ = tracker.run_sequence(setting_for(mode, seq), seq, cfg.eval.precision_threshold)
                write_text(tdir / mode.name.lower() / f"seq_{seq.seed}.csv", format_trajectory(traj))
        arts["trajectories"] = tdir
    arts.update(_write_figures(out, results))
    report = build_report(cfg, results, time.perf_counter() - start, arts)
    write_text(out / "report.yaml", dump_report(report))
    sys.stdout.write(dump_report(report))
    if args.against:
        problems = compare_reports(recorded, report)
        for p in problems:
            log.error("report mismatch: %s", p)
        if problems:
            return EXIT_FAILED
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = load_config(args.config).model if args.config else micro_config().model
    report = run_gradcheck(cfg, seed=args.seed or 0)
    doc = report.as_dict()
    text = yaml.safe_dump(doc, sort_keys=False)
    if args.out or os.environ.get(OUT_ENV):
        write_text(output_dir(args.out, "gradcheck") / "gradcheck.yaml", text)
    for e in report.entries:
        status = "PASS" if e.passed else "FAIL"
        print(f"{status} {e.kind:9s} {e.name:24s} worst={e.worst:.2e} ({e.worst_param})")
    print(f"{'PASS' if report.passed else 'FAIL'} gradcheck: {len(report.entries)} entries in {report.seconds:.1f}s")
    return EXIT_OK if report.passed else EXIT_FAILED


def cmd_fixtures(args) -> int:
    if args.action == "export":
        path = export_fixtures(args.path)
        print(f"wrote {path}")
        return EXIT_OK
    results = verify_fixtures(args.path)
    print(format_results(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAILED


def cmd_generate_world(args) -> int:
    cfg = resolve_config(args.config, None)
    out = output_dir(args.out, "world")
    base = args.seed if args.seed is not None else 0
    for k in range(args.count):
        seq = generate_sequence(base + k, cfg.world)
        path = export_sequence(seq, out / f"seq_{base + k:07d}")
        print(f"{path} sentence={' '.join(seq.sentence)!r}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vltrack", description="Unified vision-language tracker at desk scale.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, mode=True):
        p.add_argument("--config", help="YAML experiment config (defaults when omitted)")
        p.add_argument("--seed", type=int, help="override train.seed (world seed base for generate-world)")
        p.add_argument("--out", help=f"output directory (else ${OUT_ENV}, else ./runs/<command>)")
        if mode:
            p.add_argument("--mode", default="all", choices=["bbox", "nl", "nl+bbox", "all"])

    p = sub.add_parser("train", help="train, checkpoint, evaluate all settings, write a report")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the held-out sequences")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--trajectories", action="store_true", help="also write per-sequence trajectories")
    p.add_argument("--against", help="recorded report; fail on config drift or metric mismatch")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference audit of every adjoint")
    common(p, mode=False)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("fixtures", help="export or verify named test vectors")
    p.add_argument("action", choices=["export", "verify"])
    p.add_argument("path")
    p.set_defaults(func=cmd_fixtures)

    p = sub.add_parser("generate-world", help="render synthetic sequences to disk")
    common(p, mode=False)
    p.add_argument("--count", type=int, default=1)
    p.set_defaults(func=cmd_generate_world)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ConfigError, FormatError, FixtureError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (nx.NumericError, TrainingError, TrackingError, ReportMismatch) as exc:
        print(f"failure: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
