"""Command line wrapper: adapter-ref --annotations FILE [--latency-ms N]
[--max-batch N]."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .server import AdapterConfig, serve


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="adapter-ref",
        description="Reference detector adapter serving detections from an annotation file",
    )
    parser.add_argument("--annotations", required=True, help="annotation JSONL file")
    parser.add_argument("--latency-ms", type=float, default=0.0,
                        help="simulated per-batch inference delay")
    parser.add_argument("--max-batch", type=int, default=8,
                        help="maximum windows accepted per infer request")
    args = parser.parse_args(argv)
    config = AdapterConfig(
        annotation_path=Path(args.annotations),
        latency_ms=args.latency_ms,
        max_batch=args.max_batch,
    )
    return serve(config)


if __name__ == "__main__":
    sys.exit(main())
