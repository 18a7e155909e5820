"""``mvmap`` command line: one subcommand per pipeline stage."""

from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .config import PipelineConfig


def _scene_list(text: str) -> tuple:
    try:
        return tuple(int(t.replace("scene", "")) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad scene list {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="INI config file (defaults when omitted)")
    common.add_argument("--artifacts", metavar="DIR", help="artifact directory (overrides config and $MVMAP_ARTIFACTS)")
    common.add_argument("--seed", type=int, help="master seed, overrides the config")
    common.add_argument("--strict", action="store_true", help="verify input hashes against the manifest")
    common.add_argument("--scenes", type=_scene_list, help="comma-separated scene ids to restrict to")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="mvmap", description="Offboard BEV map generation pipeline.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in pipeline.STAGE_ORDER:
        sub.add_parser(name, parents=[common], help=pipeline.STAGES[name].__doc__)
    sub.add_parser("all", parents=[common], help="run every stage in order")
    w = sub.add_parser("write-config", help="write the default config to a file")
    w.add_argument("path")
    return p


def load_config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.validate()
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "write-config":
        PipelineConfig().save(args.path)
        return 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        root = cfg.resolved_artifacts(args.artifacts)
        stages = pipeline.STAGE_ORDER if args.command == "all" else (args.command,)
        for name in stages:
            rec = pipeline.run_stage(name, cfg, root, args.scenes, args.strict)
            print(f"{name}: {len(rec['outputs'])} outputs in {rec['wall_time']:.1f}s")
    except pipeline.MissingArtifact as e:
        print(f"mvmap {args.command}: {e}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as e:
        print(f"mvmap {args.command}: error: {str(e).splitlines()[0] if str(e) else type(e).__name__}",
              file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
