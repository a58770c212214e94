"""``zsqdet`` command-line entry point.

Settings resolve as: command-line flag > ``--set key=value`` > config file > default.
Exit codes: 0 success, 1 usage error, 2 validation error, 3 runtime divergence.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline
from .config import ConfigError, apply_overrides, load_config
from .data import DatasetFormatError
from .persistence import CheckpointError
from .synthesis import SynthesisError

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", default="runs", help="output root directory (default: runs)")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key, e.g. --set qat.tau=2.0 (repeatable)")
    p.add_argument("--seed", type=int, help="seed for every stage (overrides the config)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="zsqdet", description="Zero-shot quantization of a grid object detector.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    _common(sub.add_parser("gen-data", help="render the synthetic shapes dataset"))
    _common(sub.add_parser("train-teacher", help="train the full-precision detector"))

    p = sub.add_parser("synthesize", help="build a calibration set from the teacher alone")
    _common(p)
    p.add_argument("--mode", default="adaptive", choices=sorted(pipeline.METHODS))
    p.add_argument("--count", type=int, default=256)
    p.add_argument("--name", help="calibration set name (default: <mode>-n<count>-s<seed>)")

    p = sub.add_parser("qat", help="quantization-aware training from a calibration set")
    _common(p)
    p.add_argument("--bits", default=None, help="bit widths, e.g. w4a8 (default: from config)")
    p.add_argument("--calib", help="calibration set name (default: adaptive-n256-s<seed>)")
    p.add_argument("--name", help="output name under qat/")

    p = sub.add_parser("eval", help="evaluate a checkpoint on the validation split")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--force", action="store_true", help="evaluate despite a config-hash mismatch")

    _common(sub.add_parser("compare-baselines", help="run the calibration-method comparison grid"))
    _common(sub.add_parser("report", help="render every CSV under --out as text tables"))
    return parser


def _parse_overrides(items: list[str]) -> dict[str, str]:
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        out[key.strip()] = value
    return out


def resolve_config(args):
    cfg = load_config(args.config)
    overrides = _parse_overrides(args.set)
    if args.seed is not None:
        for key in ("seed", "data.seed", "model.seed", "teacher.seed", "synthesis.seed", "qat.seed"):
            overrides[key] = args.seed
        overrides["baselines.seeds"] = [args.seed]
    if getattr(args, "bits", None):
        try:
            b_w, b_a = pipeline.parse_bits(args.bits)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        overrides.update({"qat.b_w": b_w, "qat.b_a": b_a})
    return apply_overrides(cfg, overrides) if overrides else cfg


def _print_row(row: dict) -> None:
    print("  " + ", ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}"
                           for k, v in row.items()), flush=True)


def run(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out)
    cmd = args.command
    if cmd == "gen-data":
        ds = pipeline.gen_data(cfg, out)
        print(f"wrote {len(ds)} images to {out / 'data'}")
    elif cmd == "train-teacher":
        _, _, res = pipeline.train_teacher(cfg, out, _print_row)
        print(f"teacher mAP={res.map_5095:.4f} mAP50={res.map_50:.4f} -> {out / 'teacher'}")
    elif cmd == "synthesize":
        if args.count <= 0:
            raise UsageError("--count must be positive")
        ds = pipeline.synthesize(cfg, out, args.mode, args.count, args.name)
        print(f"wrote {len(ds)} {args.mode} calibration images "
              f"({sum(len(l) for l in ds.labels)} labels)")
    elif cmd == "qat":
        calib = args.calib or pipeline.calib_name("adaptive", 256, cfg.synthesis.seed)
        res = pipeline.qat(cfg, out, calib, args.name, _print_row)
        best = res.log[res.best_epoch]
        print(f"W{cfg.qat.b_w}A{cfg.qat.b_a} student: best epoch {res.best_epoch}, "
              f"mAP={best['mAP']:.4f} mAP50={best['mAP50']:.4f}")
    elif cmd == "eval":
        res = pipeline.eval_checkpoint(cfg, out, args.checkpoint, args.force)
        print(res.summary())
    elif cmd == "compare-baselines":
        rows = pipeline.compare_baselines(cfg, out, _print_row)
        print(pipeline.format_table(pipeline.BASELINE_COLUMNS,
                                    [[r[c] for c in pipeline.BASELINE_COLUMNS] for r in rows]))
        if any(r["status"] != "ok" for r in rows):
            print("some cells did not finish; see the status column", file=sys.stderr)
    elif cmd == "report":
        text = pipeline.report(out)
        (out / "report.txt").write_text(text)
        print(text, end="")
    return EXIT_OK


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except pipeline.MissingArtifact as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, CheckpointError, DatasetFormatError, ValueError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (pipeline.Divergence, SynthesisError, FloatingPointError) as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
