"""Command-line interface: ``sfod gen-data | pretrain | adapt | evaluate``.

Exit codes: 0 success, 2 usage or validation error, 3 checkpoint/state
mismatch, 1 anything else (including a source-free guard violation).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from .checkpoint import CheckpointMismatch
from .config import ALPHA_PRESETS, DEFAULTS, DOCS, ConfigError, RunConfig, parse_assignment
from .detector import DetectorConfig
from .engine import (AdaptConfig, PretrainConfig, TrainingDiverged, adapt, load_detector, pretrain,
                     save_adapted, save_detector, _write_lines)
from .evaluation import emit_pr_curve, evaluate
from .fsguard import AccessRecorder, SourceAccessError
from .synthdata import CLASS_NAMES, PRESETS, DatasetError, SceneSpec, generate_domain, load_dataset

log = logging.getLogger("sfod")

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE, EXIT_MISMATCH = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _seed(args) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = os.environ.get("SFOD_SEED")
    if env is None:
        return DEFAULTS["seed"]
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"SFOD_SEED must be an integer, got {env!r}") from None


def _run_config(args, extra: dict | None = None) -> RunConfig:
    overrides = {"seed": _seed(args)}
    overrides.update(extra or {})
    for text in getattr(args, "set", None) or []:
        key, value = parse_assignment(text)
        overrides[key] = value
    return RunConfig.load(args.config, overrides)


def _require_dir(path: Path, what: str):
    if not path.is_dir():
        raise UsageError(f"{what} not found: {path}")


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _detector_cfg(rc: RunConfig) -> DetectorConfig:
    return replace(DetectorConfig(), score_thresh=rc["detector.score_thresh"], nms_thresh=rc["detector.nms_thresh"])


# -- commands -------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    if args.preset not in PRESETS:
        raise UsageError(f"unknown preset {args.preset!r}; choose from {', '.join(PRESETS)}")
    if args.n < 1:
        raise UsageError("--n must be at least 1")
    domain = PRESETS[args.preset]
    if args.noise_sigma is not None:
        domain = replace(domain, noise_sigma=args.noise_sigma)
    manifest = generate_domain(domain, SceneSpec(seed=_seed(args)), args.n, args.out)
    print(json.dumps({"out": str(args.out), "domain": manifest["domain"]["name"], "n": len(manifest["ids"]),
                      "seed": manifest["scene"]["seed"]}))
    return EXIT_OK


def cmd_pretrain(args) -> int:
    _require_dir(args.data, "data directory")
    rc = _run_config(args)
    samples = load_dataset(args.data)
    args.out.mkdir(parents=True, exist_ok=True)
    cfg = PretrainConfig.from_run_config(rc)
    model, metrics = pretrain(samples, cfg, _detector_cfg(rc))
    echo = rc.echo()
    _write_lines(args.out / "metrics.jsonl", [{**m, "config_hash": echo["config_hash"]} for m in metrics])
    save_detector(args.out / "model.ckpt", model, {"stage": "pretrain", **echo})
    _write_json(args.out / "config.json", echo)
    print(json.dumps({"checkpoint": str(args.out / "model.ckpt"), "iterations": len(metrics),
                      "config_hash": echo["config_hash"]}))
    return EXIT_OK


def cmd_adapt(args) -> int:
    _require_dir(args.target_data, "target data directory")
    if not args.source_ckpt.is_file():
        raise UsageError(f"source checkpoint not found: {args.source_ckpt}")
    extra = {f"engine.{name}": False for name in args.disable or []}
    if args.preset:
        extra["engine.alpha"] = ALPHA_PRESETS[args.preset]
    rc = _run_config(args, extra)
    cfg = AdaptConfig.from_run_config(rc)
    source, _ = load_detector(args.source_ckpt)
    source.cfg = replace(source.cfg, score_thresh=rc["detector.score_thresh"], nms_thresh=rc["detector.nms_thresh"])
    guard = AccessRecorder(args.forbid_source or [], forbid=True)
    with guard:
        images = load_dataset(args.target_data, annotations=False)
        monitor = None
        if args.monitor_split:
            if args.monitor_split >= len(images):
                raise UsageError("--monitor-split must leave at least one training image")
            monitor = load_dataset(args.target_data)[-args.monitor_split:]
            images = images[:-args.monitor_split]
        result = adapt([s.image for s in images], source, cfg, monitor=monitor)
    echo = rc.echo()
    args.out.mkdir(parents=True, exist_ok=True)
    _write_lines(args.out / "metrics.jsonl", [{**m, "config_hash": echo["config_hash"]} for m in result.metrics])
    save_adapted(args.out / "model.ckpt", result, {"stage": "adapt", **echo})
    _write_json(args.out / "config.json", echo)
    summary = {"checkpoint": str(args.out / "model.ckpt"), "iterations": result.adapter.iteration,
               "skipped": result.adapter.skipped, "source_accesses": len(guard.accesses),
               "config_hash": echo["config_hash"]}
    print(json.dumps(summary))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    _require_dir(args.data, "data directory")
    if not args.ckpt.is_file():
        raise UsageError(f"checkpoint not found: {args.ckpt}")
    model, meta = load_detector(args.ckpt, expected_fingerprint=args.expect_fingerprint)
    samples = load_dataset(args.data)
    result = evaluate(model, samples)
    report = result.to_dict()
    report["checkpoint"] = str(args.ckpt)
    report["config_hash"] = meta.get("config_hash")
    if args.out is not None:
        emit_pr_curve(result, args.out, CLASS_NAMES)
        _write_json(args.out / "eval.json", report)
    for c, ap in sorted(result.ap.items()):
        print(f"AP[{CLASS_NAMES.get(c, c)}] = {ap:.4f}")
    print(f"mAP = {result.map:.4f}")
    print(json.dumps({"map": report["map"], "per_class": report["per_class"]}))
    return EXIT_OK


# -- parser -----------------------------------------------------------------------


def _config_help() -> str:
    return "config keys (defaults):\n" + "\n".join(f"  {k} = {DEFAULTS[k]!r}: {DOCS[k]}" for k in DEFAULTS)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sfod", description="Source-free domain-adaptive object detection.",
                                     epilog=_config_help(), formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render a synthetic domain")
    g.add_argument("--preset", required=True, help=f"one of: {', '.join(PRESETS)}")
    g.add_argument("--out", type=Path, required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=None, help="default: $SFOD_SEED or 0")
    g.add_argument("--noise-sigma", type=float, default=None, help="override the preset's sensor noise")
    g.set_defaults(func=cmd_gen_data)

    def common(p):
        p.add_argument("--config", type=Path, default=None, help="dotted-key TOML file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override (repeatable)")
        p.add_argument("--seed", type=int, default=None, help="default: $SFOD_SEED or 0")

    p = sub.add_parser("pretrain", help="supervised training on a labeled source domain")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    common(p)
    p.set_defaults(func=cmd_pretrain)

    a = sub.add_parser("adapt", help="source-free adaptation on unlabeled target images")
    a.add_argument("--target-data", type=Path, required=True)
    a.add_argument("--source-ckpt", type=Path, required=True)
    a.add_argument("--out", type=Path, required=True)
    a.add_argument("--disable", action="append", choices=("msp", "afsp", "pfd"), help="ablate a component")
    a.add_argument("--monitor-split", type=int, default=0, metavar="N",
                   help="hold out the last N labeled target images for per-epoch mAP logging")
    a.add_argument("--forbid-source", type=Path, action="append", metavar="DIR",
                   help="abort on any file access under DIR (repeatable)")
    a.add_argument("--preset", choices=sorted(ALPHA_PRESETS), default=None, help="style-mixing preset")
    common(a)
    a.set_defaults(func=cmd_adapt)

    e = sub.add_parser("evaluate", help="mAP@0.5 and PR curves on a labeled dataset")
    e.add_argument("--ckpt", type=Path, required=True)
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--out", type=Path, default=None)
    e.add_argument("--expect-fingerprint", default=None, help="fail with exit 3 unless the checkpoint matches")
    e.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, DatasetError, ValueError) as exc:
        print(f"sfod: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CheckpointMismatch as exc:
        print(f"sfod: checkpoint mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except SourceAccessError as exc:
        print(f"sfod: aborted: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except FileNotFoundError as exc:
        print(f"sfod: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"sfod: training diverged: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(f"sfod: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
