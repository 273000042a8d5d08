"""Command-line entry point: ``echomesh {slice,pseudo,deform,eval,clinical}``."""

from __future__ import annotations

import argparse
import logging
import os
import sys

from .config import ConfigError, PipelineConfig
from .pipeline import COMMANDS, EXIT_CONFIG


HELP = {
    "slice": "jitter each corpus mesh and rasterize the six view slices",
    "pseudo": "turn slice masks into blurred, speckled pseudo-echo images",
    "deform": "label the corpus with template deformation fields",
    "eval": "MSE and voxel IoU for prediction/target cloud pairs",
    "clinical": "LV volumes, ejection fraction and its correlation with GLPS",
}


def _log_level(value: str) -> int:
    if value.isdigit():
        return int(value)
    level = logging.getLevelName(value.upper())
    return level if isinstance(level, int) else logging.WARNING


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="echomesh", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=HELP[name])
        p.add_argument("--config", required=True, help="pipeline JSON config")
        p.add_argument("--seed", type=int, default=None, help="override the config's global seed (u64)")
        p.add_argument("--jobs", type=int, default=1, help="worker threads")
        p.add_argument("--out", default=None, help="override the output directory")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=_log_level(os.environ.get("S2M_LOG", "WARNING")),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    if args.jobs < 1:
        print("echomesh: --jobs must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = PipelineConfig.load(args.config, seed=args.seed, out=args.out)
        cfg.output_dir.mkdir(parents=True, exist_ok=True)
        result = COMMANDS[args.command](cfg, jobs=args.jobs)
    except ConfigError as exc:
        print(f"echomesh: bad config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    for key in result.failed:
        print(f"echomesh: item {key} failed: {result.items[key].get('error')}", file=sys.stderr)
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
