"""Writers for the QPPE pair-embedding interchange formats.

Binary layout: magic ``QPPE``, u32-LE version, u32-LE dim, then per
record u16-LE qid length + bytes, u16-LE docid length + bytes, u32-LE
rank, dim IEEE-754 float32-LE values.  Text layout: one JSON object per
line.  Both formats get a ``<path>.meta.json`` sidecar recording the
dimension and the producing encoder.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from embed_export.errors import ExportError

MAGIC = b"QPPE"
VERSION = 1

FORMATS = ("binary", "text")


@dataclass
class Record:
    """One exported (query, document) pair embedding."""

    qid: str
    docid: str
    rank: int
    vec: np.ndarray

    def __post_init__(self):
        self.vec = np.asarray(self.vec, dtype=np.float32)
        if self.vec.ndim != 1:
            raise ExportError(
                f"({self.qid}, {self.docid}): vector must be 1-D, "
                f"got shape {self.vec.shape}"
            )
        if self.rank < 1:
            raise ExportError(
                f"({self.qid}, {self.docid}): rank must be >= 1, "
                f"got {self.rank}"
            )


def _check(records: list[Record], dim: int) -> None:
    if dim < 1:
        raise ExportError(f"embedding dimension must be >= 1, got {dim}")
    for rec in records:
        if rec.vec.shape[0] != dim:
            raise ExportError(
                f"({rec.qid}, {rec.docid}): vector has {rec.vec.shape[0]} "
                f"values, expected {dim}"
            )
        if len(rec.qid.encode("utf-8")) > 0xFFFF:
            raise ExportError(f"qid too long: {rec.qid[:32]}...")
        if len(rec.docid.encode("utf-8")) > 0xFFFF:
            raise ExportError(f"docid too long: {rec.docid[:32]}...")


def write_binary(path, records: list[Record], dim: int) -> None:
    _check(records, dim)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, dim))
        for rec in records:
            qb = rec.qid.encode("utf-8")
            db = rec.docid.encode("utf-8")
            f.write(struct.pack("<H", len(qb)))
            f.write(qb)
            f.write(struct.pack("<H", len(db)))
            f.write(db)
            f.write(struct.pack("<I", rec.rank))
            f.write(np.asarray(rec.vec, dtype="<f4").tobytes())


def write_text(path, records: list[Record], dim: int) -> None:
    _check(records, dim)
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            obj = {
                "qid": rec.qid,
                "docid": rec.docid,
                "rank": rec.rank,
                "vec": [float(v) for v in np.asarray(rec.vec, np.float32)],
            }
            f.write(json.dumps(obj) + "\n")


def write_sidecar(path, dim: int, encoder_name: str) -> None:
    with open(f"{path}.meta.json", "w", encoding="utf-8") as f:
        json.dump({"dim": dim, "encoder-name": encoder_name}, f)
        f.write("\n")


def write_store(
    path, records: list[Record], dim: int, encoder_name: str,
    format: str = "binary",
) -> None:
    """Write records plus sidecar in the requested interchange format."""
    if format == "binary":
        write_binary(path, records, dim)
    elif format == "text":
        write_text(path, records, dim)
    else:
        raise ExportError(f"unknown embedding format {format!r}")
    write_sidecar(path, dim, encoder_name)
