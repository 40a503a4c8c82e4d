"""Domain types and ingestion: runs, qrels, passages, pair embeddings.

File formats
------------
Run file      : whitespace-separated ``qid Q0 docid rank score tag``, UTF-8.
Qrels file    : ``qid 0 docid grade`` (second column ignored).
Queries/docs  : TSV, ``id<TAB>text`` per line.
Embeddings    : binary (magic ``QPPE``) or JSON-lines text with a
                ``<path>.meta.json`` sidecar carrying ``dim`` and
                ``encoder-name``.  See `save_embeddings`.
"""
from __future__ import annotations

import io
import json
import logging
import re
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    FormatError,
    InputError,
    MissingDataError,
    ParseError,
)

log = logging.getLogger(__name__)

_TOKEN_SPLIT = re.compile(r"[^0-9a-z]+")

EMBEDDING_MAGIC = b"QPPE"
EMBEDDING_VERSION = 1


def tokenize(text: str) -> list[str]:
    """Case-fold and split on any non-alphanumeric character."""
    return [t for t in _TOKEN_SPLIT.split(text.casefold()) if t]


@dataclass(frozen=True)
class QueryRecord:
    """A keyword query; ``tokens`` is its tokenized text."""

    qid: str
    tokens: tuple[str, ...]

    def __post_init__(self):
        if not self.qid:
            raise InputError("query id must be non-empty")
        if not self.tokens:
            raise InputError(f"query {self.qid!r} has no tokens")

    @classmethod
    def from_text(cls, qid: str, text: str) -> "QueryRecord":
        return cls(qid=qid, tokens=tuple(tokenize(text)))


@dataclass(frozen=True)
class DocRecord:
    docid: str
    tokens: tuple[str, ...]

    def __post_init__(self):
        if not self.docid:
            raise InputError("doc id must be non-empty")

    @classmethod
    def from_text(cls, docid: str, text: str) -> "DocRecord":
        return cls(docid=docid, tokens=tuple(tokenize(text)))


@dataclass(frozen=True)
class RunEntry:
    """One retrieved document: original rank column and retrieval score."""

    qid: str
    docid: str
    rank: int
    score: float


class RetrievalRun:
    """Per-query ranked lists, ordered by descending score (docid tiebreak).

    The score is the ordering authority; the stored ``rank`` field is the
    provenance value from the input file.  Positional (1-based) ranks after
    re-sorting are what the rest of the pipeline uses.
    """

    def __init__(self, entries_by_qid: dict[str, list[RunEntry]]):
        ordered: dict[str, tuple[RunEntry, ...]] = {}
        for qid in sorted(entries_by_qid):
            entries = entries_by_qid[qid]
            if any(e.qid != qid for e in entries):
                raise InputError(f"entry qid mismatch under key {qid!r}")
            ranks = sorted(e.rank for e in entries)
            if ranks != list(range(1, len(entries) + 1)):
                raise InputError(
                    f"query {qid!r}: rank column is not a permutation of "
                    f"1..{len(entries)}"
                )
            ordered[qid] = tuple(
                sorted(entries, key=lambda e: (-e.score, e.docid))
            )
        self._by_qid = ordered

    @property
    def qids(self) -> tuple[str, ...]:
        return tuple(self._by_qid)

    def entries(self, qid: str) -> tuple[RunEntry, ...]:
        return self._by_qid[qid]

    def top(self, qid: str, depth: int) -> tuple[RunEntry, ...]:
        return self._by_qid[qid][:depth]

    def scores(self, qid: str) -> tuple[float, ...]:
        return tuple(e.score for e in self._by_qid[qid])

    def restrict(self, qids) -> "RetrievalRun":
        keep = set(qids)
        return RetrievalRun(
            {q: list(es) for q, es in self._by_qid.items() if q in keep}
        )

    def __contains__(self, qid: str) -> bool:
        return qid in self._by_qid

    def __len__(self) -> int:
        return len(self._by_qid)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, RetrievalRun) and self._by_qid == other._by_qid
        )


def parse_run(raw_text: str) -> RetrievalRun:
    """Parse a 6-column run file; lists are re-sorted by descending score."""
    by_qid: dict[str, list[RunEntry]] = {}
    seen: set[tuple[str, str]] = set()
    n_lines = 0
    for line_no, line in enumerate(io.StringIO(raw_text), start=1):
        if not line.strip():
            continue
        n_lines += 1
        cols = line.split()
        if len(cols) != 6:
            raise ParseError(
                f"expected 6 columns, got {len(cols)}", line_no
            )
        qid, _, docid, rank_s, score_s, _tag = cols
        try:
            rank = int(rank_s)
        except ValueError:
            raise ParseError(f"non-integer rank {rank_s!r}", line_no) from None
        try:
            score = float(score_s)
        except ValueError:
            raise ParseError(
                f"non-numeric score {score_s!r}", line_no
            ) from None
        if rank < 1:
            raise ParseError(f"rank must be positive, got {rank}", line_no)
        if not np.isfinite(score):
            raise ParseError(f"non-finite score {score_s!r}", line_no)
        if (qid, docid) in seen:
            raise ParseError(
                f"duplicate document {docid!r} for query {qid!r}", line_no
            )
        seen.add((qid, docid))
        by_qid.setdefault(qid, []).append(RunEntry(qid, docid, rank, score))
    if n_lines == 0:
        raise MissingDataError("run input is empty")
    return RetrievalRun(by_qid)


def serialize_run(run: RetrievalRun, tag: str = "groupqpp") -> str:
    """Inverse of `parse_run` modulo the tag column."""
    lines = []
    for qid in run.qids:
        for e in run.entries(qid):
            lines.append(f"{e.qid} Q0 {e.docid} {e.rank} {e.score!r} {tag}")
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class QrelsRecord:
    qid: str
    docid: str
    grade: int


class Qrels:
    """Graded relevance judgments; grade >= 1 means relevant."""

    def __init__(self, records: list[QrelsRecord]):
        self._grade: dict[tuple[str, str], int] = {
            (r.qid, r.docid): r.grade for r in records
        }
        self.records: tuple[QrelsRecord, ...] = tuple(
            QrelsRecord(q, d, g) for (q, d), g in sorted(self._grade.items())
        )

    @property
    def qids(self) -> tuple[str, ...]:
        return tuple(sorted({q for q, _ in self._grade}))

    def grade(self, qid: str, docid: str) -> int | None:
        return self._grade.get((qid, docid))

    def relevant_docs(self, qid: str) -> frozenset[str]:
        return frozenset(
            d for (q, d), g in self._grade.items() if q == qid and g >= 1
        )

    def __eq__(self, other) -> bool:
        return isinstance(other, Qrels) and self._grade == other._grade


def parse_qrels(raw_text: str) -> Qrels:
    """Parse a 4-column qrels file; duplicate (qid, docid) -> last wins."""
    records: list[QrelsRecord] = []
    last: dict[tuple[str, str], int] = {}
    n_lines = 0
    for line_no, line in enumerate(io.StringIO(raw_text), start=1):
        if not line.strip():
            continue
        n_lines += 1
        cols = line.split()
        if len(cols) != 4:
            raise ParseError(f"expected 4 columns, got {len(cols)}", line_no)
        qid, _, docid, grade_s = cols
        try:
            grade = int(grade_s)
        except ValueError:
            raise ParseError(
                f"non-integer grade {grade_s!r}", line_no
            ) from None
        if grade < 0:
            raise ParseError(f"negative grade {grade}", line_no)
        if (qid, docid) in last:
            log.warning(
                "qrels line %d: duplicate judgment for (%s, %s); "
                "last occurrence wins",
                line_no,
                qid,
                docid,
            )
        last[(qid, docid)] = grade
    if n_lines == 0:
        raise MissingDataError("qrels input is empty")
    for (qid, docid), grade in last.items():
        records.append(QrelsRecord(qid, docid, grade))
    return Qrels(records)


@dataclass(frozen=True)
class PassageWindow:
    start: int
    tokens: tuple[str, ...]


def slice_passages(
    doc_tokens, window: int = 150, stride: int = 75
) -> list[PassageWindow]:
    """Cut a token sequence into overlapping fixed-size windows.

    Windows start at offsets 0, stride, 2*stride, ...; a final partial
    window is kept only if it contains at least one token no earlier
    window covers.
    """
    if window <= 0:
        raise InputError(f"window must be positive, got {window}")
    if not 0 < stride <= window:
        raise InputError(
            f"stride must be in (0, window], got {stride} (window {window})"
        )
    tokens = tuple(doc_tokens)
    if not tokens:
        raise MissingDataError("cannot slice an empty document")
    out: list[PassageWindow] = []
    covered = 0  # tokens [0, covered) already appear in some window
    for start in range(0, len(tokens), stride):
        chunk = tokens[start : start + window]
        end = start + len(chunk)
        if len(chunk) < window and end <= covered:
            continue  # redundant partial tail
        out.append(PassageWindow(start=start, tokens=chunk))
        covered = max(covered, end)
    return out


def lexical_overlap_scorer(query: QueryRecord, passage: PassageWindow) -> float:
    """Count query-token occurrences (with multiplicity) present in the passage."""
    present = set(passage.tokens)
    return float(sum(1 for t in query.tokens if t in present))


def select_top_passage(
    query: QueryRecord, passages, scorer=lexical_overlap_scorer
) -> int:
    """Index of the best-scoring passage; ties go to the smallest offset."""
    passages = list(passages)
    if not passages:
        raise InputError("need at least one passage")
    best_idx = 0
    best = (scorer(query, passages[0]), -passages[0].start)
    for i, p in enumerate(passages[1:], start=1):
        key = (scorer(query, p), -p.start)
        if key > best:
            best, best_idx = key, i
    return best_idx


@dataclass(frozen=True)
class PairEmbedding:
    """A d-dimensional vector for one (query, document) pair."""

    qid: str
    docid: str
    rank: int
    vec: np.ndarray

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, PairEmbedding)
            and self.qid == other.qid
            and self.docid == other.docid
            and self.rank == other.rank
            and self.vec.dtype == other.vec.dtype
            and np.array_equal(self.vec, other.vec)
        )


@dataclass
class PairEmbeddingStore:
    """All pair vectors of one collection, each of the same dimension."""

    dim: int
    records: list[PairEmbedding] = field(default_factory=list)
    encoder_name: str = "unknown"

    def __post_init__(self):
        if self.dim < 1:
            raise InputError(f"embedding dim must be >= 1, got {self.dim}")
        self._index: dict[tuple[str, str], int] = {}
        originals, self.records = self.records, []
        for rec in originals:
            self.add(rec)

    def _coerce(self, rec: PairEmbedding) -> PairEmbedding:
        # float32 is the interchange precision; holding the same dtype in
        # memory makes save/load round-trips bit-exact.
        vec = np.asarray(rec.vec, dtype=np.float32)
        if vec.shape != (self.dim,):
            raise FormatError(
                f"record ({rec.qid}, {rec.docid}) has dimension "
                f"{vec.shape}, store has ({self.dim},)"
            )
        return PairEmbedding(rec.qid, rec.docid, rec.rank, vec)

    def add(self, rec: PairEmbedding):
        rec = self._coerce(rec)
        self._index[(rec.qid, rec.docid)] = len(self.records)
        self.records.append(rec)

    def get(self, qid: str, docid: str) -> PairEmbedding:
        try:
            return self.records[self._index[(qid, docid)]]
        except KeyError:
            raise InputError(
                f"no embedding for pair ({qid!r}, {docid!r})"
            ) from None

    def __contains__(self, key: tuple[str, str]) -> bool:
        return key in self._index

    def __len__(self) -> int:
        return len(self.records)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, PairEmbeddingStore)
            and self.dim == other.dim
            and self.records == other.records
        )


def save_embeddings(
    store: PairEmbeddingStore, path, format: str = "binary"
) -> None:
    """Write a store in the interchange format.

    Binary layout: magic ``QPPE``, u32-LE version, u32-LE dim, then per
    record u16-LE qid length + bytes, u16-LE docid length + bytes, u32-LE
    rank, dim IEEE-754 float32-LE values.  Text layout: one JSON object
    per line plus a ``<path>.meta.json`` sidecar.
    """
    if format == "binary":
        with open(path, "wb") as f:
            f.write(EMBEDDING_MAGIC)
            f.write(struct.pack("<II", EMBEDDING_VERSION, store.dim))
            for rec in store.records:
                qb = rec.qid.encode("utf-8")
                db = rec.docid.encode("utf-8")
                f.write(struct.pack("<H", len(qb)))
                f.write(qb)
                f.write(struct.pack("<H", len(db)))
                f.write(db)
                f.write(struct.pack("<I", rec.rank))
                f.write(np.asarray(rec.vec, dtype="<f4").tobytes())
    elif format == "text":
        with open(path, "w", encoding="utf-8") as f:
            for rec in store.records:
                obj = {
                    "qid": rec.qid,
                    "docid": rec.docid,
                    "rank": rec.rank,
                    "vec": [float(v) for v in np.asarray(rec.vec, np.float32)],
                }
                f.write(json.dumps(obj) + "\n")
        with open(f"{path}.meta.json", "w", encoding="utf-8") as f:
            json.dump(
                {"dim": store.dim, "encoder-name": store.encoder_name},
                f,
            )
            f.write("\n")
    else:
        raise InputError(f"unknown embedding format {format!r}")


def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated embedding file while reading {what}")
    return buf


def load_embeddings(path) -> PairEmbeddingStore:
    """Load either interchange format; binary is detected by its magic."""
    with open(path, "rb") as f:
        head = f.read(4)
        if head == EMBEDDING_MAGIC:
            version, dim = struct.unpack(
                "<II", _read_exact(f, 8, "header")
            )
            if version != EMBEDDING_VERSION:
                raise FormatError(f"unsupported embedding version {version}")
            if dim < 1:
                raise FormatError(f"bad embedding dimension {dim}")
            store = PairEmbeddingStore(dim=dim)
            while True:
                lb = f.read(2)
                if not lb:
                    break
                if len(lb) != 2:
                    raise FormatError("truncated record header")
                (qlen,) = struct.unpack("<H", lb)
                qid = _read_exact(f, qlen, "qid").decode("utf-8")
                (dlen,) = struct.unpack(
                    "<H", _read_exact(f, 2, "docid length")
                )
                docid = _read_exact(f, dlen, "docid").decode("utf-8")
                (rank,) = struct.unpack("<I", _read_exact(f, 4, "rank"))
                raw = _read_exact(f, 4 * dim, f"vector ({qid}, {docid})")
                vec = np.frombuffer(raw, dtype="<f4").copy()
                store.add(PairEmbedding(qid, docid, rank, vec))
            return store
    # textual fallback
    meta_path = f"{path}.meta.json"
    try:
        with open(meta_path, encoding="utf-8") as f:
            meta = json.load(f)
    except FileNotFoundError:
        raise FormatError(
            f"not a binary embedding file and no sidecar {meta_path}"
        ) from None
    if "dim" not in meta:
        raise FormatError(f"sidecar {meta_path} lacks 'dim'")
    store = PairEmbeddingStore(
        dim=int(meta["dim"]),
        encoder_name=str(meta.get("encoder-name", "unknown")),
    )
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                vec = np.asarray(obj["vec"], dtype=np.float32)
                rec = PairEmbedding(
                    str(obj["qid"]), str(obj["docid"]), int(obj["rank"]), vec
                )
            except (KeyError, ValueError, TypeError) as e:
                raise FormatError(
                    f"bad embedding record at line {line_no}: {e}"
                ) from None
            if vec.ndim != 1 or vec.shape[0] != store.dim:
                raise FormatError(
                    f"line {line_no}: vector has dimension "
                    f"{vec.shape}, sidecar says {store.dim}"
                )
            store.add(rec)
    return store


def load_id_text_tsv(path) -> dict[str, str]:
    """Read ``id<TAB>text`` lines into a dict."""
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t", 1)
            if len(parts) != 2:
                raise ParseError("expected 'id<TAB>text'", line_no)
            out[parts[0]] = parts[1]
    if not out:
        raise MissingDataError(f"no records in {path}")
    return out
