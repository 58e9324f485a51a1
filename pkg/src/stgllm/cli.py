"""Command-line driver: ``stgllm <subcommand> [--config FILE] [--out DIR] ...``."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import subprocess
import sys
import traceback
from pathlib import Path

from . import __version__
from .errors import ConfigError
from .experiments import PRESETS, SUBCOMMANDS, ExperimentConfig

log = logging.getLogger("stgllm")


def source_fingerprint() -> dict:
    root = Path(__file__).parent
    digest = hashlib.sha256()
    for path in sorted(root.glob("*.py")):
        digest.update(path.name.encode())
        digest.update(path.read_bytes())
    info = {"package_version": __version__, "source_sha256": digest.hexdigest()}
    try:
        rev = subprocess.run(
            ["git", "rev-parse", "HEAD"], cwd=root, capture_output=True, text=True, timeout=5, check=True
        ).stdout.strip()
        info["git_revision"] = rev
    except (OSError, subprocess.SubprocessError):
        pass
    return info


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stgllm", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help=f"JSON config file, or a preset name {PRESETS}")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", help="comma-separated seeds, e.g. 0,1,2")
        p.add_argument("--variant")
        p.add_argument("--dataset")
        p.add_argument("--target-dataset")
        p.add_argument("--prompt-template")
        p.add_argument("--checkpoint")
    return parser


def resolve_config(args) -> ExperimentConfig:
    if args.config in PRESETS:
        cfg = ExperimentConfig(backbone=args.config)
    elif args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file {args.config!r} not found")
        cfg = ExperimentConfig.load(path)
    else:
        cfg = ExperimentConfig()
    if args.seed:
        try:
            cfg.seeds = [int(s) for s in args.seed.split(",") if s.strip()]
        except ValueError as exc:
            raise ConfigError(f"--seed expects comma-separated integers, got {args.seed!r}") from exc
        if args.command == "synth":
            cfg.synth = {**cfg.synth, "seed": cfg.seeds[0]}
    for flag, key in (("variant", "variant"), ("dataset", "dataset"), ("target_dataset", "target_dataset"),
                      ("checkpoint", "checkpoint"), ("out", "out")):
        value = getattr(args, flag)
        if value is not None:
            setattr(cfg, key, value)
    if args.prompt_template:
        cfg.model = {**cfg.model, "prompt_template": args.prompt_template, "use_prompt": True}
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    out = Path(args.out) if args.out else None
    try:
        cfg = resolve_config(args)
        out = Path(cfg.out)
        runner, needs = SUBCOMMANDS[args.command]
        if args.command == "few-shot" and not (cfg.checkpoint or cfg.dataset):
            raise ConfigError("few-shot needs a source --checkpoint or a source --dataset")
        cfg.validate(needs + (("dataset",) if args.command == "few-shot" and not cfg.checkpoint else ()))
        out.mkdir(parents=True, exist_ok=True)
        manifest = {"command": args.command, "config": cfg.to_dict(), "source": source_fingerprint()}
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
        result = runner(cfg, out)
    except Exception as exc:  # noqa: BLE001 - every failure becomes a machine-readable record
        record = {"command": args.command, "error": type(exc).__name__, "message": str(exc)}
        if args.verbose:
            record["traceback"] = traceback.format_exc()
        if out is not None:
            try:
                out.mkdir(parents=True, exist_ok=True)
                (out / "error.json").write_text(json.dumps(record, indent=2))
            except OSError:
                pass
        print(json.dumps(record), file=sys.stderr)
        return 2
    if args.command == "grad-check" and not result["passed"]:
        return 1
    log.info("%s finished; outputs in %s", args.command, out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
