"""Command line entry point: one export job per invocation."""

from __future__ import annotations

import argparse
import logging
import sys

from embed_export.errors import ExportError, UsageError
from embed_export.export import ExportJob, export
from embed_export.interchange import FORMATS
from embed_export.export import POOLINGS


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(
        prog="embed-export",
        description="Export pair embeddings from a fine-tuned checkpoint",
    )
    p.add_argument("--checkpoint", required=True,
                   help="local checkpoint directory")
    p.add_argument("--run", required=True, help="TREC-style run file")
    p.add_argument("--corpus", required=True,
                   help="docid<TAB>text corpus file")
    p.add_argument("--queries", required=True,
                   help="qid<TAB>text queries file")
    p.add_argument("--out", required=True, help="output embedding file")
    p.add_argument("--window", type=int, default=150,
                   help="passage window size in tokens")
    p.add_argument("--stride", type=int, default=75,
                   help="window stride in tokens")
    p.add_argument("--max-length", type=int, default=256,
                   help="model input length budget")
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--depth", type=int, default=100,
                   help="pairs per query taken from the run")
    p.add_argument("--format", choices=FORMATS, default="binary")
    p.add_argument("--pooling", choices=POOLINGS, default="cls")
    return p


def main(argv=None) -> int:
    logging.basicConfig(
        level=logging.INFO, format="%(levelname)s %(message)s"
    )
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    try:
        job = ExportJob(
            checkpoint=args.checkpoint,
            run=args.run,
            corpus=args.corpus,
            queries=args.queries,
            out=args.out,
            window=args.window,
            stride=args.stride,
            max_length=args.max_length,
            batch_size=args.batch_size,
            depth=args.depth,
            format=args.format,
            pooling=args.pooling,
        )
    except ExportError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    try:
        report = export(job)
    except ExportError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    print(report.summary())
    return 0


if __name__ == "__main__":
    sys.exit(main())
