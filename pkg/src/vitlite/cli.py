"""Command line front end: ``python -m vitlite <command> [options]``.

Every command reads an optional JSON config (``--config``), applies the
command line overrides, validates everything, and only then computes.
Outputs go to ``--out``:

* ``metrics.csv`` with columns epoch, split, lr, loss, top1, top5
* ``<command>.ckpt`` (plus ``<command>-epoch<N>.ckpt`` snapshots)
* for ``analyze``: ``<kind>.csv`` and ``<kind>.pgm``

Exit codes: 0 success, 2 usage error, 3 invalid config, 4 unusable
checkpoint, 1 anything else.  ``VITLITE_THREADS`` caps BLAS threads.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

from . import analysis as A
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ANALYSIS_KINDS, COMMANDS, ExperimentConfig, parse_config
from .errors import CheckpointError, ConfigError
from .experiments import (encoder_from_checkpoint, run_analyze, run_finetune, run_linprobe,
                          run_pretrain, run_surgery)
from .train import write_metrics_csv

log = logging.getLogger("vitlite")


class UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vitlite", description="Small ViT / MAE experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="JSON experiment config")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", type=Path, help="output directory")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("pretrain", "distill", "finetune", "linprobe"):
            p.add_argument("--epochs", type=int)
        if name in ("finetune", "linprobe", "surgery"):
            p.add_argument("--init", type=Path, help="checkpoint to start from"
                           + (" (random init if omitted)" if name != "surgery" else ""))
        if name == "distill":
            p.add_argument("--teacher", type=Path, help="teacher checkpoint")
        if name == "surgery":
            p.add_argument("--keep", type=int, help="number of leading blocks to keep")
        if name == "analyze":
            p.add_argument("--kind", choices=ANALYSIS_KINDS, required=True)
            p.add_argument("--a", type=Path, required=True, help="checkpoint A")
            p.add_argument("--b", type=Path, help="checkpoint B (defaults to A)")
    return parser


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    data = json.loads(args.config.read_text()) if args.config else {}
    if not isinstance(data, dict):
        raise ConfigError([("", "config must be a JSON object")])
    data["command"] = args.command
    if args.seed is not None:
        data["seed"] = args.seed
    if args.out is not None:
        data["out"] = str(args.out)
    epochs = getattr(args, "epochs", None)
    if epochs is not None:
        section = "probe" if args.command == "linprobe" else "train"
        sec = dict(data.get(section) or {})
        sec["epochs"] = epochs
        sec["warmup_epochs"] = min(sec.get("warmup_epochs", 5.0 if section == "train" else 10.0),
                                   epochs)
        data[section] = sec
    if getattr(args, "keep", None) is not None:
        data["keep_k"] = args.keep
    if args.command == "distill" and args.teacher is not None:
        data["distill"] = {**(data.get("distill") or {}), "teacher": str(args.teacher)}
    return parse_config(data)


def _require(path, flag: str, command: str) -> Path:
    if path is None:
        raise UsageError(f"{command} needs {flag}")
    return path


def run(args: argparse.Namespace) -> None:
    cfg = resolve_config(args)
    if cfg.command in ("linprobe", "surgery"):
        _require(args.init, "--init", cfg.command)
    if cfg.command == "distill":
        _require(cfg.distill.teacher, "--teacher", cfg.command)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    metrics = out / "metrics.csv"
    cmd = cfg.command

    if cmd in ("pretrain", "distill"):
        teacher = None
        if cmd == "distill":
            teacher = encoder_from_checkpoint(load_checkpoint(cfg.distill.teacher))
        metrics.unlink(missing_ok=True)

        def on_epoch(epoch, row, snap):
            write_metrics_csv(metrics, [row])
            if snap is not None:
                save_checkpoint(out / f"{cmd}-epoch{epoch}.ckpt", snap)

        res = run_pretrain(cfg, teacher, on_epoch)
        save_checkpoint(out / f"{cmd}.ckpt", res.checkpoint)
        print(f"{cmd}: final reconstruction loss {res.rows[-1]['loss']:.4f}")
    elif cmd == "finetune":
        init = load_checkpoint(args.init) if args.init else None
        _, rows, ckpt = run_finetune(cfg, init)
        write_metrics_csv(metrics, rows, append=False)
        save_checkpoint(out / "finetune.ckpt", ckpt)
        print(f"finetune: final test top-1 {rows[-1]['top1']:.4f}")
    elif cmd == "linprobe":
        init = load_checkpoint(args.init)
        top1, rows, ckpt = run_linprobe(cfg, init)
        write_metrics_csv(metrics, rows, append=False)
        save_checkpoint(out / "linprobe.ckpt", ckpt)
        print(f"linprobe: test top-1 {top1:.4f}")
    elif cmd == "surgery":
        ckpt = run_surgery(cfg, load_checkpoint(args.init))
        save_checkpoint(out / "surgery.ckpt", ckpt)
        print(f"surgery: kept {cfg.keep_k} blocks -> {out / 'surgery.ckpt'}")
    elif cmd == "analyze":
        a = encoder_from_checkpoint(load_checkpoint(args.a))
        b = encoder_from_checkpoint(load_checkpoint(args.b)) if args.b else None
        write_analysis(out, args.kind, run_analyze(cfg, args.kind, a, b))
        print(f"analyze: wrote {out / (args.kind + '.csv')}")


def write_analysis(out: Path, kind: str, result) -> None:
    if isinstance(result, A.SimilarityHeatmap):
        A.write_heatmap_csv(out / f"{kind}.csv", result)
        lo = 0.0 if result.kind == "representation" else None
        A.write_pgm(out / f"{kind}.pgm", result.matrix, vmin=lo, vmax=1.0 if lo == 0.0 else None)
    elif isinstance(result, A.AttnStats):
        A.write_attn_stats_csv(out / f"{kind}.csv", result)
        A.write_pgm(out / f"{kind}.pgm", result.distance_mean[None, :])
    else:
        A.write_profile_csv(out / f"{kind}.csv", result)
        A.write_pgm(out / f"{kind}.pgm", result.delta[None, :])


def _thread_limit():
    raw = os.environ.get("VITLITE_THREADS")
    if not raw:
        return nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError([("VITLITE_THREADS", f"expected a positive integer, got {raw!r}")]) from None
    if n < 1:
        raise ConfigError([("VITLITE_THREADS", f"expected a positive integer, got {raw!r}")])
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            run(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 3
    except CheckpointError as exc:
        print(f"checkpoint error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return 4
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0
