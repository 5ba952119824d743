#!/usr/bin/env python3
"""Serve the annotation HTTP API for an existing pipeline workspace.

Expects a workspace that has already run through the filter stage (use
scripts/run_mock_pipeline.py to make one).  Samples a stratified set of
accepted synthetic images and serves them for human rating:

    GET  /items/next?annotator=<id>   next unrated item for that annotator
    POST /ratings                     store one rating (JSON body)
    GET  /images/<image_id>           PNG bytes for an item
    GET  /export                      all ratings as TSV
    GET  /health                      liveness probe

Ratings are appended to <root>/annotation/ratings.jsonl and survive
restarts.  Export aggregates afterwards with `monoedit annotate-export`.
"""

import argparse
import sys
from pathlib import Path

from monoedit.cli import main as cli_main


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", type=Path, default=Path("demo-workspace/pipeline.yaml"))
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8765)
    args = parser.parse_args()

    return cli_main(
        [
            "--config",
            str(args.config),
            "annotate-serve",
            "--host",
            args.host,
            "--port",
            str(args.port),
        ]
    )


if __name__ == "__main__":
    sys.exit(main())
