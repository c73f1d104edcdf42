"""Command-line entry point.

    panelpipe synth --out corpus/ --seed 7
    panelpipe run --config corpus/config.json
    panelpipe extract|validate|harmonize|assemble|outliers|evaluate|converge|regress|report \
        --config corpus/config.json
    panelpipe serve --config corpus/config.json --port 8765 --ui frontend/dist
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline, synth
from .config import load_config
from .providers import ProviderUnavailable
from .server import serve


def _add_config_arg(parser: argparse.ArgumentParser):
    parser.add_argument("--config", required=True, type=Path,
                        help="path to the run config JSON")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="panelpipe",
        description="Digitize historical registration tables into a validated panel.",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a synthetic corpus")
    p_synth.add_argument("--out", required=True, type=Path)
    p_synth.add_argument("--seed", type=int, default=0)

    p_run = sub.add_parser("run", help="run the full pipeline")
    _add_config_arg(p_run)

    for stage in pipeline.STAGES:
        p_stage = sub.add_parser(stage, help=f"run the {stage} stage")
        _add_config_arg(p_stage)

    p_serve = sub.add_parser("serve", help="start the review API/UI server")
    _add_config_arg(p_serve)
    p_serve.add_argument("--host", default="127.0.0.1")
    p_serve.add_argument("--port", type=int, default=8765)
    p_serve.add_argument("--ui", type=Path, default=None,
                         help="directory of built UI assets to serve at /")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )

    try:
        if args.command == "synth":
            spec = synth.generate_corpus(args.out, seed=args.seed)
            print(f"wrote corpus with {len(spec.tables)} tables to {args.out}")
            print(f"run it with: panelpipe run --config {spec.config_path}")
            return 0

        cfg = load_config(args.config)

        if args.command == "run":
            manifest = pipeline.run_pipeline(cfg)
            print(json.dumps(manifest["stages"], indent=1, sort_keys=True))
            return 0

        if args.command in pipeline.STAGES:
            counts = pipeline.run_stage(cfg, args.command)
            print(json.dumps({args.command: counts}, indent=1, sort_keys=True))
            return 0

        if args.command == "serve":
            server = serve(cfg, host=args.host, port=args.port, ui_dir=args.ui)
            print(f"serving on http://{args.host}:{server.server_address[1]} "
                  "(ctrl-c to stop)")
            try:
                server.serve_forever()
            except KeyboardInterrupt:
                server.shutdown()
            return 0
    except pipeline.StageOrderError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except ProviderUnavailable as exc:
        print(f"error: provider unavailable: {exc}", file=sys.stderr)
        return 4
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    return 2


if __name__ == "__main__":
    sys.exit(main())
