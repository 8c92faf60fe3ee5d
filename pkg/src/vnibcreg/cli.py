"""Command-line front door: ``vnibcreg <subcommand> [options]``.

Every run owns one output directory (guarded by a lock file) and leaves there the
effective configuration, the code version, a log file, and its tables and figures.
"""
from __future__ import annotations

import argparse
import csv
import logging
import subprocess
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import filelock
import numpy as np

from . import __version__
from .config import ExperimentConfig, parse_overrides
from .dataset import EventCollection, generate_synthetic, ingest_npz, load_events, write_events
from .evaluation import (
    EvalReport,
    ablation_markdown,
    default_grid,
    finetune_evaluate,
    linear_evaluate,
    pretrained_encoders,
    run_ablation,
    write_ablation_csv,
    write_report_csv,
    _slug,
)
from .gradcheck import format_table, run_suite
from .plots import plot_confusion, plot_loss_curves
from .preprocess import SpectrogramCache
from .trainer import load_pretrained, pretrain

log = logging.getLogger("vnibcreg")

SUBCOMMANDS = ("ingest", "synth", "pretrain", "linear", "finetune", "ablation", "gradcheck")


class CLIError(RuntimeError):
    pass


def code_version() -> str:
    """``git describe`` of the source tree, or the package version outside a checkout."""
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent, capture_output=True, text=True, timeout=10,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML file with [section] key = value entries")
    common.add_argument("--profile", default="full", help="base profile: full (default) or desk")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key, e.g. --set train.epochs=10 (repeatable)")
    common.add_argument("--out", help="output directory (default: runs/<subcommand>)")
    common.add_argument("--resume", action="store_true", help="continue pretraining from existing checkpoints")
    common.add_argument("-v", "--verbose", action="store_true", help="debug-level console logging")

    parser = argparse.ArgumentParser(prog="vnibcreg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}")

    p = sub.add_parser("ingest", parents=[common], help="convert an .npz drop into manifest + binary files")
    p.add_argument("source", help=".npz with arrays waveforms [N,C,L], labels [N], optional ids [N]")
    sub.add_parser("synth", parents=[common], help="write a synthetic event collection")
    sub.add_parser("pretrain", parents=[common], help="self-supervised pretraining")
    for name, text in (("linear", "linear evaluation of a frozen encoder"),
                       ("finetune", "fine-tuning evaluation on n%% labeled subsets")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--checkpoint", help="pretrained checkpoint; default pretrains one encoder per eval seed")
    p = sub.add_parser("ablation", parents=[common], help="run the method ablation grid")
    p.add_argument("--rows", help="comma-separated subset of grid rows (default: all)")
    p.add_argument("--no-finetune", action="store_true", help="linear protocol only")
    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite of the losses")
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _setup_logging(out_dir: Path, verbose: bool) -> List[logging.Handler]:
    file_handler = logging.FileHandler(out_dir / "run.log")
    file_handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    console = logging.StreamHandler(sys.stderr)
    console.setLevel(logging.DEBUG if verbose else logging.INFO)
    console.setFormatter(logging.Formatter("%(levelname)s: %(message)s"))
    root = logging.getLogger()
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    root.addHandler(file_handler)
    root.addHandler(console)
    return [file_handler, console]


def write_run_metadata(out_dir: Path, config: ExperimentConfig) -> None:
    (out_dir / "config.json").write_text(config.to_json() + "\n")
    (out_dir / "VERSION").write_text(code_version() + "\n")


def load_collection(config: ExperimentConfig) -> EventCollection:
    if config["dataset.synthetic"]:
        return generate_synthetic(config.synthetic_spec(), config["dataset.synthetic_seed"])
    manifest = config["dataset.manifest"]
    if not manifest:
        raise CLIError("no dataset configured: set dataset.manifest or dataset.synthetic=true")
    return load_events(manifest)


def _summed_confusion(report: EvalReport) -> np.ndarray:
    return np.sum([np.asarray(s.confusion) for s in report.seeds], axis=0)


def _report_markdown(reports: Sequence[EvalReport]) -> str:
    lines = ["| experiment | protocol | n% | " + " | ".join(f"seed {s.seed}" for s in reports[0].seeds)
             + " | mean (std) |", "|" + "---|" * (4 + len(reports[0].seeds))]
    for r in reports:
        n = "" if r.n_percent is None else f"{r.n_percent:g}"
        lines.append(f"| {r.name} | {r.mode} | {n} | " + " | ".join(f"{a:.3f}" for a in r.accuracies)
                     + f" | {r.cell()} |")
    return "\n".join(lines) + "\n"


def _plot_loss_logs(root: Path) -> None:
    for log_csv in sorted(root.rglob("loss_log.csv")):
        with open(log_csv, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if rows:
            plot_loss_curves(rows, log_csv.parent / "loss_curves.png", title=str(log_csv.parent.relative_to(root)))


def _encoders(args, config: ExperimentConfig, collection: EventCollection, cache: SpectrogramCache, out_dir: Path):
    if args.checkpoint:
        if not Path(args.checkpoint).is_file():
            raise CLIError(f"checkpoint not found: {args.checkpoint}")
        encoder = load_pretrained(args.checkpoint).encoder
        return lambda seed: encoder
    encoders = pretrained_encoders(config, collection, cache, out_dir / "pretrain", args.resume)
    _plot_loss_logs(out_dir / "pretrain")
    return lambda seed: encoders[seed]


# ---------------------------------------------------------------------------
# subcommands


def cmd_ingest(args, config: ExperimentConfig, out_dir: Path) -> None:
    if not Path(args.source).is_file():
        raise CLIError(f"source not found: {args.source}")
    manifest = ingest_npz(args.source, out_dir)
    with open(manifest, newline="") as fh:
        n = sum(1 for _ in csv.DictReader(fh))
    log.info("wrote %d events to %s", n, manifest)


def cmd_synth(args, config: ExperimentConfig, out_dir: Path) -> None:
    collection = generate_synthetic(config.synthetic_spec(), config["dataset.synthetic_seed"])
    manifest = write_events(collection, out_dir)
    log.info("wrote %d synthetic events (%s) to %s", len(collection), collection.class_counts, manifest)


def cmd_pretrain(args, config: ExperimentConfig, out_dir: Path) -> None:
    collection = load_collection(config)
    result = pretrain(config, collection, out_dir=out_dir, resume=args.resume)
    if result.loss_log:
        plot_loss_curves(result.loss_log, out_dir / "loss_curves.png")
    log.info("checkpoint: %s", result.checkpoint_path)


def cmd_linear(args, config: ExperimentConfig, out_dir: Path) -> None:
    collection = load_collection(config)
    cache = SpectrogramCache(config.spectrogram_params(), config.cache_root())
    labeled = collection.labeled()
    report = linear_evaluate(_encoders(args, config, collection, cache, out_dir), labeled, config, "linear", cache)
    write_report_csv(report, out_dir / "linear.csv")
    (out_dir / "linear.md").write_text(_report_markdown([report]))
    plot_confusion(_summed_confusion(report), labeled.class_names(), out_dir / "confusion.png",
                   title="linear evaluation, summed over seeds")
    print(_report_markdown([report]), end="")


def cmd_finetune(args, config: ExperimentConfig, out_dir: Path) -> None:
    collection = load_collection(config)
    cache = SpectrogramCache(config.spectrogram_params(), config.cache_root())
    labeled = collection.labeled()
    encoder_for_seed = _encoders(args, config, collection, cache, out_dir)
    reports = []
    for n in config["eval.n_percents"]:
        report = finetune_evaluate(encoder_for_seed, labeled, config, n, "finetune", cache)
        write_report_csv(report, out_dir / f"finetune_n{n:g}.csv")
        plot_confusion(_summed_confusion(report), labeled.class_names(), out_dir / f"confusion_n{n:g}.png",
                       title=f"fine-tuning n={n:g}%, summed over seeds")
        reports.append(report)
    (out_dir / "finetune.md").write_text(_report_markdown(reports))
    print(_report_markdown(reports), end="")


def cmd_ablation(args, config: ExperimentConfig, out_dir: Path) -> None:
    names = [n.strip() for n in args.rows.split(",")] if args.rows else None
    try:
        grid = default_grid(names)
    except ValueError as exc:
        raise CLIError(str(exc)) from exc
    collection = load_collection(config)
    rows = run_ablation(grid, collection, config, out_dir, finetune=not args.no_finetune, resume=args.resume)
    table = ablation_markdown(rows)
    (out_dir / "ablation.md").write_text(table)
    write_ablation_csv(rows, out_dir / "ablation.csv")
    class_names = collection.labeled().class_names()
    for row in rows:
        if row.linear is not None:
            plot_confusion(_summed_confusion(row.linear), class_names, out_dir / f"confusion_{_slug(row.name)}.png",
                           title=f"{row.name}: linear, summed over seeds")
    _plot_loss_logs(out_dir)
    print(table, end="")
    failed = [r.name for r in rows if r.error]
    if failed:
        raise CLIError(f"ablation rows failed: {', '.join(failed)} (see ablation.md)")


def cmd_gradcheck(args, config: ExperimentConfig, out_dir: Path) -> None:
    results = run_suite(args.instances, args.seed)
    table = format_table(results)
    (out_dir / "gradcheck.txt").write_text(table + "\n")
    print(table)
    failed = [r.operation for r in results if not r.passed]
    if failed:
        raise CLIError(f"gradient check failed for: {', '.join(failed)}")


COMMANDS: Dict[str, Callable] = {
    "ingest": cmd_ingest,
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "linear": cmd_linear,
    "finetune": cmd_finetune,
    "ablation": cmd_ablation,
    "gradcheck": cmd_gradcheck,
}


def _one_line(exc: BaseException) -> str:
    text = str(exc).strip().splitlines()
    return f"{type(exc).__name__}: {text[0] if text else ''}"


def main(argv: Optional[List[str]] = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2

    out_dir = Path(args.out or Path("runs") / args.command)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        lock = filelock.FileLock(str(out_dir / ".lock"), timeout=0)
        lock.acquire()
    except filelock.Timeout:
        print(f"error: {out_dir} is in use by another run (lock file {out_dir / '.lock'})", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: cannot use output directory {out_dir}: {_one_line(exc)}", file=sys.stderr)
        return 2

    handlers = _setup_logging(out_dir, args.verbose)
    try:
        (out_dir / "VERSION").write_text(code_version() + "\n")
        config = ExperimentConfig.build(args.profile, args.config, parse_overrides(args.overrides))
        write_run_metadata(out_dir, config)
        log.info("%s -> %s (version %s)", args.command, out_dir, code_version())
        COMMANDS[args.command](args, config, out_dir)
        return 0
    except Exception as exc:
        # full traceback goes to the log file only; the console gets one line
        handlers[0].handle(log.makeRecord(log.name, logging.ERROR, __file__, 0, "run failed", (), sys.exc_info()))
        print(f"error: {_one_line(exc)} (log: {out_dir / 'run.log'})", file=sys.stderr)
        return 1
    finally:
        for h in handlers:
            logging.getLogger().removeHandler(h)
            h.close()
        lock.release()


if __name__ == "__main__":
    sys.exit(main())
