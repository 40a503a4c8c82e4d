"""Pair-embedding export from fine-tuned cross-encoder checkpoints."""

from embed_export.errors import ExportError, UsageError
from embed_export.export import (
    CheckpointEncoder,
    ExportJob,
    ExportReport,
    SkippedPair,
    export,
    slice_windows,
    tokenize,
)
from embed_export.interchange import Record, write_store

__all__ = [
    "CheckpointEncoder",
    "ExportError",
    "ExportJob",
    "ExportReport",
    "Record",
    "SkippedPair",
    "UsageError",
    "export",
    "slice_windows",
    "tokenize",
    "write_store",
]
