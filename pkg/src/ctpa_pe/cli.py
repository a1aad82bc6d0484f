"""Command line entry point: ``ctpa-pe <command> --config run.cfg``.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 contract violation.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from ctpa_pe import pipeline
from ctpa_pe.config import RunConfig
from ctpa_pe.errors import PEError

logger = logging.getLogger("ctpa_pe")

COMMANDS = (
    "make-synthetic",
    "preprocess",
    "train-stage1",
    "extract-features",
    "train-stage2",
    "predict",
    "evaluate",
    "check-consistency",
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ctpa-pe", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="key=value run config (defaults apply to missing keys)")
        p.add_argument("--out", type=Path, help="override output_dir")
        p.add_argument("--deterministic", action="store_true", help="single-threaded, fixed seeds")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("predict", "evaluate"):
            p.add_argument("--split", choices=("train", "val", "test"), default="test")
        if name in ("evaluate", "check-consistency"):
            p.add_argument("--predictions", type=Path)
        if name == "check-consistency":
            p.add_argument("--split", choices=("train", "val", "test"), default="test")
            p.add_argument("--raw", action="store_true", help="check pre-enforce probabilities")
        if name == "make-synthetic":
            p.add_argument("--root", type=Path, help="override dataset_root")
        if name == "evaluate":
            p.add_argument("--embedding", choices=("tsne", "pca"), default="tsne")
    return parser


def _config(args) -> RunConfig:
    overrides = {}
    if args.out is not None:
        overrides["output_dir"] = args.out.resolve()
    if getattr(args, "root", None) is not None:
        overrides["dataset_root"] = args.root.resolve()
    if args.deterministic:
        overrides["deterministic"] = 1
    return RunConfig.load(args.config, **overrides)


def _snapshot(cfg: RunConfig) -> None:
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    (cfg.output_dir / "run.cfg").write_text(f"# config_hash={cfg.hash}\n" + cfg.to_text(), encoding="utf-8")


def run(args) -> int:
    cfg = _config(args)
    if args.command != "make-synthetic" and not cfg.dataset_root.is_dir():
        print(f"error: dataset root {cfg.dataset_root} does not exist; run `make-synthetic` or fix dataset_root",
              file=sys.stderr)
        return 1
    pipeline.set_deterministic(cfg.deterministic, cfg.seed)
    cmd = args.command

    if cmd == "make-synthetic":
        paths = pipeline.run_make_synthetic(cfg)
        print(f"wrote {len(paths)} studies to {cfg.dataset_root}")
    elif cmd == "preprocess":
        summary = pipeline.preprocess(cfg)
        print(f"processed {len(summary['processed'])}, up to date {len(summary['skipped'])}, "
              f"failed {len(summary['failed'])}")
        for sid, msg in sorted(summary["failed"].items()):
            print(f"{sid}: {msg}", file=sys.stderr)
        if summary["failed"]:
            return 2
    elif cmd == "train-stage1":
        _snapshot(cfg)
        result = pipeline.run_train_stage1(cfg)
        print(f"stage 1 best epoch {result.best_epoch}, val loss {result.best_val_loss}")
    elif cmd == "extract-features":
        written = pipeline.run_extract_features(cfg)
        print(f"wrote embeddings for {len(written)} studies")
    elif cmd == "train-stage2":
        _snapshot(cfg)
        result = pipeline.run_train_stage2(cfg)
        print(f"stage 2 best epoch {result.best_epoch}, val loss {result.best_val_loss}")
    elif cmd == "predict":
        path = pipeline.run_predict(cfg, args.split)
        print(f"wrote {path}")
    elif cmd == "evaluate":
        report = pipeline.run_evaluate(cfg, args.split, args.predictions, embed_method=args.embedding)
        sys.stdout.write(report.to_csv())
        if report.violations:
            print(f"{report.violations} studies violate label consistency", file=sys.stderr)
            return 3
    elif cmd == "check-consistency":
        path = args.predictions or cfg.output_dir / f"predictions_{args.split}.jsonl"
        violations = pipeline.check_consistency(pipeline.read_predictions(path), raw=args.raw)
        for sid, rule, desc in violations:
            print(f"{sid},{rule},{desc}")
        if violations:
            return 3
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except PEError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
