"""
drivesynth - Command Line Entry Point
=====================================

Commands (one stage per process, composed through files in the workdir):

    scenegen      procedural scene + ray-traced recorded trajectory
    fit           stage-one Gaussian reconstruction
    refine-train  stage-one refiner training on degraded renders
    cotrain       closed-loop co-training rounds
    eval          lateral-shift evaluation of raw and refined renders
    report        merge reports into summary.json and print a table

Exit codes: 0 success, 2 bad arguments, 3 I/O failure, 4 numerical failure, 1 other.
"""

import logging
import sys
from argparse import ArgumentParser, Namespace
from pathlib import Path
from typing import Dict, Optional, Sequence

import torch
from pydantic import ValidationError

from .config.settings import Settings, get_settings, load_run_config
from .exceptions import IoError, NoValidPixels, NumericalFailure, UnknownPreset
from .services.pipeline_service import PipelineService, format_summary_table
from .services.storage_service import ArtifactStore

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_BAD_ARGS = 2
EXIT_IO = 3
EXIT_NUMERICAL = 4


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="drivesynth", description="Desk-scale free-viewpoint driving scene synthesis")
    parser.add_argument("--workdir", type=Path, default=None, help="Run directory (default: FREEGEN_WORKDIR)")
    parser.add_argument("--config", type=Path, default=None, help="TOML run configuration")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="Override a config value, e.g. cotrain.rounds=2 (repeatable)")
    parser.add_argument("--seed", type=int, default=None, help="Global seed")
    parser.add_argument("--log-level", default=None, help="Logging level (default: FREEGEN_LOG_LEVEL)")
    parser.add_argument("--no-progress", action="store_true", help="Hide progress bars")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("scenegen", help="Generate a scene and its recorded trajectory")
    p.add_argument("--preset", default=None)
    p.add_argument("--seed", "--scene-seed", dest="scene_seed", type=int, default=None, help="Scene generator seed")
    p.add_argument("--frames", type=int, default=None)
    p.add_argument("--cameras", dest="camera_count", type=int, default=None)
    p.add_argument("--width", type=int, default=None)
    p.add_argument("--height", type=int, default=None)
    p.add_argument("--scene-file", dest="scene_file", default=None, help="Load a SceneSpec JSON instead of generating")
    p.add_argument("--depth-noise", dest="depth_noise_sigma", type=float, default=None)

    p = sub.add_parser("fit", help="Fit the Gaussian scene to the recorded frames")
    p.add_argument("--steps", type=int, default=None)

    p = sub.add_parser("refine-train", help="Train the refiner on degraded renders")
    p.add_argument("--steps", type=int, default=None)

    p = sub.add_parser("cotrain", help="Alternate reconstruction and generation updates")
    p.add_argument("--rounds", type=int, default=None)
    p.add_argument("--mode", choices=["both", "recon_only", "gen_only"], default=None)
    p.add_argument("--dump", action="store_true", help="Write pseudo-labels with provenance sidecars")

    p = sub.add_parser("eval", help="Evaluate under lateral camera shifts")
    p.add_argument("--shifts", type=float, nargs="+", default=None)
    p.add_argument("--stride", type=int, default=None)
    p.add_argument("--stage", choices=["fit", "cotrain"], default=None)
    p.add_argument("--steps", dest="sample_steps", type=int, default=None, help="DDIM sampling steps")
    p.add_argument("--dump", action="store_true", help="Write rendered and refined frames")

    sub.add_parser("report", help="Summarise evaluation and co-training reports")
    return parser


def _flag_values(args: Namespace, settings: Settings) -> Dict[str, object]:
    """Dedicated flags expressed as dotted config keys."""
    values: Dict[str, object] = {}
    if args.seed is not None:
        values["seed"] = args.seed
    elif settings.seed:
        values["seed"] = settings.seed
    mapping = {
        "preset": "preset",
        "scene_seed": "scene_seed",
        "frames": "frames",
        "camera_count": "camera_count",
        "width": "width",
        "height": "height",
        "scene_file": "scene_file",
        "depth_noise_sigma": "depth_noise_sigma",
        "mode": "cotrain.mode",
        "stride": "eval.stride",
        "sample_steps": "refiner.sample_steps",
    }
    for attr, key in mapping.items():
        value = getattr(args, attr, None)
        if value is not None:
            values[key] = value
    return values


def run(args: Namespace, settings: Settings) -> int:
    flags = _flag_values(args, settings)
    # Flags beat the config file, --set beats flags
    overrides = [f"{key}={_toml(value)}" for key, value in flags.items()] + list(args.overrides)
    config = load_run_config(args.config, overrides)

    workdir = args.workdir or settings.workdir
    store = ArtifactStore(workdir)
    service = PipelineService(config, store, progress=not args.no_progress)

    if args.command == "scenegen":
        service.scenegen()
    elif args.command == "fit":
        service.fit(args.steps)
    elif args.command == "refine-train":
        service.refine_train(args.steps)
    elif args.command == "cotrain":
        service.cotrain(args.rounds, dump_labels=args.dump)
    elif args.command == "eval":
        service.evaluate(args.shifts, args.stage, dump_frames=args.dump)
    elif args.command == "report":
        print(format_summary_table(service.report()))
    return EXIT_OK


def _toml(value: object) -> str:
    if isinstance(value, str):
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_BAD_ARGS

    settings = get_settings()
    logging.basicConfig(
        level=(args.log_level or settings.log_level).upper(),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )
    if settings.num_threads:
        torch.set_num_threads(settings.num_threads)
    torch.use_deterministic_algorithms(settings.deterministic, warn_only=True)

    try:
        return run(args, settings)
    except (ValidationError, UnknownPreset, ValueError) as e:
        logger.error(f"Invalid arguments: {e}")
        return EXIT_BAD_ARGS
    except (IoError, OSError) as e:
        logger.error(f"I/O failure: {e}")
        return EXIT_IO
    except (NumericalFailure, NoValidPixels) as e:
        logger.error(f"Numerical failure: {e}")
        return EXIT_NUMERICAL
    except Exception as e:
        logger.error(f"Unhandled exception: {e}", exc_info=True)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
