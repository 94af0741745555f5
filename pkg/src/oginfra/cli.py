"""Command-line entry point: ``oginfra [--config C] [--out D] [--verbose] <command>``.

Exit codes: 0 success, 1 internal error, 2 user/config error, 3 upstream-service error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from oginfra.errors import (
    CatalogError,
    ConfigError,
    FetchError,
    IngestIOError,
    InputError,
    PreconditionError,
    SchemaError,
)
from oginfra.pipeline import Pipeline, load_config, output_lock

EXIT_OK, EXIT_INTERNAL, EXIT_USER, EXIT_UPSTREAM = 0, 1, 2, 3

logger = logging.getLogger("oginfra")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="oginfra", description="Locate oil & gas infrastructure from VIIRS active-fire data.")
    parser.add_argument("--config", default="oginfra.json", help="pipeline config JSON (default: %(default)s)")
    parser.add_argument("--out", help="output directory (overrides output_dir in the config)")
    parser.add_argument("--verbose", "-v", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    sub.add_parser("ingest", help="filter FIRMS CSVs per satellite into hotspots.csv")
    sub.add_parser("cluster", help="cluster hotspots into the sites.jsonl catalog")
    sub.add_parser("fetch", help="download imagery for every catalogued site")
    sub.add_parser("dataset", help="build the augmented, split dataset")
    sub.add_parser("train", help="train the CNN classifier")
    sub.add_parser("eval", help="evaluate the trained model on the test split")
    export = sub.add_parser("export-geojson", help="write the site catalog as GeoJSON")
    export.add_argument("--catalog", type=Path, help="catalog to export (default: <out>/sites.jsonl)")
    export.add_argument("--output", type=Path, help="destination file (default: <out>/sites.geojson)")
    sub.add_parser("run-all", help="run every stage in order")
    return parser


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, FetchError):
        return EXIT_UPSTREAM
    if isinstance(exc, (ConfigError, SchemaError, IngestIOError, PreconditionError, CatalogError, InputError)):
        return EXIT_USER
    return EXIT_INTERNAL


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    stage = args.command
    try:
        config = load_config(args.config, args.out)
        with output_lock(config.output_dir):
            pipeline = Pipeline(config)
            if stage == "run-all":
                pipeline.run_all()
            elif stage == "export-geojson":
                pipeline.run_stage(stage, lambda: pipeline.export_geojson(args.catalog, args.output))
            else:
                pipeline.run(stage)
    except Exception as exc:  # noqa: BLE001 - mapped to exit codes below
        stage = getattr(exc, "stage", stage)
        code = _exit_code(exc)
        if code == EXIT_INTERNAL:
            logger.exception("[%s] internal error", stage)
        print(f"oginfra: error: [{stage}] {exc}", file=sys.stderr)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
