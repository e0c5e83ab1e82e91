"""Command-line entry point: ``sfmsplat {synth,sfm,joint,eval,export,pipeline}``.

All subcommands work on one run directory (``--out``). ``--config`` points to a
JSON file whose keys mirror :class:`sfmsplat.pipeline.PipelineConfig`; flags
given on the command line override it. ``SFMSPLAT_NUM_THREADS`` sets the number
of worker threads used by two-view estimation.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import formats, pipeline
from .errors import SfmSplatError

ABLATION_CHOICES = ("full", "frozen-poses", "photometric-only", "merged-tracks")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration file")
    common.add_argument("--seed", type=int, help="global seed (default 42)")
    common.add_argument("--ablation", choices=ABLATION_CHOICES, help="joint-optimization mode")
    common.add_argument("--stage", choices=pipeline.STAGES, help="stages run by the pipeline subcommand")
    common.add_argument("--out", help="run directory")
    common.add_argument("--iterations", type=int, help="joint-optimization iterations")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="sfmsplat", description="Global SfM with joint splat optimization.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="synthesize a scene, matches and reference images")
    sub.add_parser("sfm", parents=[common], help="global SfM from matches.txt")
    sub.add_parser("joint", parents=[common], help="joint optimization from sfm.json")
    sub.add_parser("eval", parents=[common], help="write metrics.json")
    sub.add_parser("export", parents=[common], help="COLMAP text export of the current reconstruction")
    sub.add_parser("pipeline", parents=[common], help="run the stages selected by --stage")
    return p


def resolve_config(args) -> pipeline.PipelineConfig:
    cfg = pipeline.load_config(args.config) if args.config else pipeline.PipelineConfig()
    cfg = pipeline.with_overrides(cfg, seed=args.seed, ablation=args.ablation, stage=args.stage, out=args.out)
    if args.iterations is not None:
        cfg = pipeline.dataclasses.replace(cfg, joint=pipeline.dataclasses.replace(cfg.joint, iterations=args.iterations))
    cfg.validate()
    return cfg


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        out = formats.ensure_dir(cfg.out)
        if args.command == "pipeline":
            rec = pipeline.run_pipeline(cfg)
            print(f"wrote {out / 'metrics.json'} (registered {rec.n_registered}/{rec.n_cameras} cameras)")
            return 0
        formats.dump_json(out / "config.json", pipeline.config_to_dict(cfg))
        if args.command == "synth":
            pipeline.stage_ingest(cfg, out)
        elif args.command == "sfm":
            if not (out / "matches.txt").exists():
                pipeline.stage_ingest(cfg, out)
            timings = pipeline.stage_sfm(cfg, out)
            formats.dump_json(out / "timings.json", timings)
        elif args.command == "joint":
            pipeline.stage_joint(cfg, out)
        elif args.command == "eval":
            pipeline.write_metrics(out, pipeline.stage_eval(cfg, out))
        elif args.command == "export":
            pipeline.stage_export(cfg, out)
        print(f"{args.command}: done ({out})")
        return 0
    except (SfmSplatError, FileNotFoundError, ValueError) as exc:
        print(f"sfmsplat {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
