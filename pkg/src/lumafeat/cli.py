"""Command-line pipeline driver.

Subcommands follow the stage DAG: gen-objects -> gen-scenes -> render ->
labels -> train -> eval / bench / plots. Every stage is idempotent for a
fixed (config, seed): a rerun that finds up-to-date outputs exits 0 without
rewriting anything. Failures print a machine-readable JSON object to stderr
and exit 2 (configuration) or 3 (stage failure).
"""

from __future__ import annotations

import argparse
import json
import sys

from .config import ConfigError, load_config
from .dataset import IoFailure
from . import pipeline
from .pipeline import StageError, UpToDate

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE = 3

STAGES = ("gen-objects", "gen-scenes", "render", "labels", "train", "eval",
          "bench", "plots")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="lumafeat",
        description="illumination-robust feature extractor pipeline")
    parser.add_argument("command", choices=STAGES + ("all",))
    parser.add_argument("--config", help="TOML config file (defaults used if omitted)")
    parser.add_argument("--seed", type=int, help="override the global seed")
    parser.add_argument("--out", default="out", help="output root directory")
    parser.add_argument("--jobs", type=int, default=1,
                        help="parallel render jobs")
    parser.add_argument("--ablation",
                        choices=("full", "no_similarity", "no_disparity"),
                        help="loss configuration for `train`")
    parser.add_argument("--override", action="append", default=[],
                        metavar="KEY=VALUE",
                        help="config override, e.g. training.steps=500")
    return parser


def _fail(stage, exc, code):
    error = {"error": type(exc).__name__, "stage": stage, "message": str(exc)}
    print(json.dumps(error), file=sys.stderr)
    return code


def run_stage(command, cfg, out, jobs=1, ablation=None):
    if command == "gen-objects":
        pipeline.stage_gen_objects(cfg, out)
    elif command == "gen-scenes":
        pipeline.stage_gen_scenes(cfg, out)
    elif command == "render":
        pipeline.stage_render(cfg, out, jobs=jobs)
    elif command == "labels":
        pipeline.stage_labels(cfg, out)
    elif command == "train":
        pipeline.stage_train(cfg, out, ablation=ablation)
    elif command == "eval":
        pipeline.stage_eval(cfg, out)
    elif command == "bench":
        pipeline.stage_bench(cfg, out)
    elif command == "plots":
        pipeline.stage_plots(cfg, out)
    else:
        raise ValueError(f"unknown command {command!r}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, overrides=args.override, seed=args.seed)
    except ConfigError as exc:
        return _fail("config", exc, EXIT_CONFIG)

    commands = list(STAGES) if args.command == "all" else [args.command]
    for command in commands:
        try:
            run_stage(command, cfg, args.out, jobs=args.jobs,
                      ablation=args.ablation)
        except UpToDate as marker:
            print(f"{command}: up to date ({marker})")
        except (StageError, IoFailure) as exc:
            return _fail(command, exc, EXIT_STAGE)
        except ConfigError as exc:
            return _fail(command, exc, EXIT_CONFIG)
        else:
            print(f"{command}: done")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
