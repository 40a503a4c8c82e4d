"""Apply a fine-tuned cross-encoder checkpoint to a ranked run.

For every (query, document) pair within the configured depth the document
is cut into overlapping token windows, each window is scored against the
query by the checkpoint, and the pooled hidden state of the best-scoring
window becomes the exported pair embedding.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from transformers import AutoModelForSequenceClassification, AutoTokenizer

from embed_export import interchange
from embed_export.errors import ExportError

log = logging.getLogger(__name__)

_TOKEN_SPLIT = re.compile(r"[^0-9a-z]+")

POOLINGS = ("cls", "mean")


def tokenize(text: str) -> list[str]:
    """Case-fold and split on any non-alphanumeric character."""
    return [t for t in _TOKEN_SPLIT.split(text.casefold()) if t]


def slice_windows(
    tokens, window: int, stride: int
) -> list[tuple[int, tuple[str, ...]]]:
    """(start, tokens) windows at offsets 0, stride, 2*stride, ...

    A final partial window is kept only if it contains at least one token
    no earlier window covers.
    """
    tokens = tuple(tokens)
    if not tokens:
        raise ExportError("cannot slice an empty token sequence")
    out: list[tuple[int, tuple[str, ...]]] = []
    covered = 0  # tokens [0, covered) already appear in some window
    for start in range(0, len(tokens), stride):
        chunk = tokens[start : start + window]
        end = start + len(chunk)
        if len(chunk) < window and end <= covered:
            continue  # redundant partial tail
        out.append((start, chunk))
        covered = max(covered, end)
    return out


def read_tsv(path, what: str) -> dict[str, str]:
    """id<TAB>text lines; blank lines skipped; duplicate ids rejected."""
    table: dict[str, str] = {}
    try:
        with open(path, encoding="utf-8") as f:
            for line_no, line in enumerate(f, start=1):
                line = line.rstrip("\n")
                if not line.strip():
                    continue
                if "\t" not in line:
                    raise ExportError(
                        f"{what} line {line_no}: expected id<TAB>text"
                    )
                key, text = line.split("\t", 1)
                if key in table:
                    raise ExportError(
                        f"{what} line {line_no}: duplicate id {key!r}"
                    )
                table[key] = text
    except OSError as e:
        raise ExportError(f"cannot read {what} file: {e}") from e
    if not table:
        raise ExportError(f"{what} file {path} is empty")
    return table


def read_run(path, depth: int) -> dict[str, list[tuple[str, int]]]:
    """qid -> [(docid, rank), ...] with positional 1-based ranks.

    Lists are re-sorted by descending score (docid tiebreak) before the
    depth cut; the input rank column is validated but not trusted.
    """
    by_qid: dict[str, list[tuple[str, float]]] = {}
    seen: set[tuple[str, str]] = set()
    try:
        with open(path, encoding="utf-8") as f:
            for line_no, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                cols = line.split()
                if len(cols) != 6:
                    raise ExportError(
                        f"run line {line_no}: expected 6 columns, "
                        f"got {len(cols)}"
                    )
                qid, _, docid, rank_s, score_s, _tag = cols
                try:
                    rank = int(rank_s)
                    score = float(score_s)
                except ValueError:
                    raise ExportError(
                        f"run line {line_no}: bad rank or score"
                    ) from None
                if rank < 1 or not np.isfinite(score):
                    raise ExportError(
                        f"run line {line_no}: bad rank or score"
                    )
                if (qid, docid) in seen:
                    raise ExportError(
                        f"run line {line_no}: duplicate document "
                        f"{docid!r} for query {qid!r}"
                    )
                seen.add((qid, docid))
                by_qid.setdefault(qid, []).append((docid, score))
    except OSError as e:
        raise ExportError(f"cannot read run file: {e}") from e
    if not by_qid:
        raise ExportError(f"run file {path} is empty")
    out: dict[str, list[tuple[str, int]]] = {}
    for qid in sorted(by_qid):
        ranked = sorted(by_qid[qid], key=lambda p: (-p[1], p[0]))[:depth]
        out[qid] = [(docid, i) for i, (docid, _) in enumerate(ranked, 1)]
    return out


@dataclass
class ExportJob:
    """One export request: a checkpoint applied to a run over a corpus."""

    checkpoint: str
    run: str
    corpus: str
    queries: str
    out: str
    window: int = 150
    stride: int = 75
    max_length: int = 256
    batch_size: int = 16
    depth: int = 100
    format: str = "binary"
    pooling: str = "cls"

    def __post_init__(self):
        for name in ("window", "stride", "max_length", "batch_size", "depth"):
            value = getattr(self, name)
            if value < 1:
                raise ExportError(f"{name} must be >= 1, got {value}")
        if self.stride > self.window:
            raise ExportError(
                f"stride must be <= window, got {self.stride} "
                f"(window {self.window})"
            )
        if self.format not in interchange.FORMATS:
            raise ExportError(f"unknown format {self.format!r}")
        if self.pooling not in POOLINGS:
            raise ExportError(f"unknown pooling {self.pooling!r}")


@dataclass(frozen=True)
class SkippedPair:
    qid: str
    docid: str
    reason: str


@dataclass
class ExportReport:
    """What an export run produced and what it had to leave out."""

    out: str
    dim: int
    encoder_name: str
    n_queries: int
    written: int
    skipped: list[SkippedPair] = field(default_factory=list)

    def summary(self) -> str:
        lines = [
            f"exported {self.written} pair embeddings "
            f"(dim {self.dim}) to {self.out}",
            f"encoder {self.encoder_name}, {self.n_queries} queries",
        ]
        if self.skipped:
            lines.append(f"skipped {len(self.skipped)} pairs:")
            lines.extend(
                f"  {s.qid} {s.docid}: {s.reason}" for s in self.skipped
            )
        return "\n".join(lines)


class CheckpointEncoder:
    """Scores and pools (query, passage) texts with a local checkpoint."""

    def __init__(self, checkpoint: str, max_length: int, batch_size: int,
                 pooling: str):
        try:
            self.tokenizer = AutoTokenizer.from_pretrained(checkpoint)
            self.model = AutoModelForSequenceClassification.from_pretrained(
                checkpoint
            )
        except Exception as e:
            raise ExportError(
                f"cannot load checkpoint {checkpoint!r}: {e}"
            ) from e
        self.model.eval()
        self.dim = int(self.model.config.hidden_size)
        self.max_length = max_length
        self.batch_size = batch_size
        self.pooling = pooling

    def encode(
        self, query_texts: list[str], passage_texts: list[str]
    ) -> tuple[np.ndarray, np.ndarray]:
        """Relevance score and pooled vector per (query, passage) text."""
        scores: list[np.ndarray] = []
        pooled: list[np.ndarray] = []
        for lo in range(0, len(query_texts), self.batch_size):
            hi = lo + self.batch_size
            enc = self.tokenizer(
                query_texts[lo:hi],
                passage_texts[lo:hi],
                padding=True,
                truncation=True,
                max_length=self.max_length,
                return_tensors="pt",
            )
            with torch.no_grad():
                out = self.model(**enc, output_hidden_states=True)
            # last logit column is the relevance score for both 1- and
            # 2-label classification heads
            scores.append(out.logits[:, -1].numpy())
            hidden = out.hidden_states[-1]
            if self.pooling == "cls":
                vecs = hidden[:, 0, :]
            else:
                mask = enc["attention_mask"].unsqueeze(-1).to(hidden.dtype)
                vecs = (hidden * mask).sum(dim=1) / mask.sum(dim=1).clamp(
                    min=1.0
                )
            pooled.append(vecs.numpy())
        if not scores:
            return np.zeros(0), np.zeros((0, self.dim), dtype=np.float32)
        return np.concatenate(scores), np.concatenate(pooled)


def export(job: ExportJob) -> ExportReport:
    """Run one export job; missing texts skip pairs, bad inputs raise."""
    encoder = CheckpointEncoder(
        job.checkpoint, job.max_length, job.batch_size, job.pooling
    )
    queries = read_tsv(job.queries, "queries")
    docs = read_tsv(job.corpus, "corpus")
    run = read_run(job.run, job.depth)

    pending: list[tuple[str, str, int, str, list]] = []
    skipped: list[SkippedPair] = []
    for qid, ranked in run.items():
        if qid not in queries:
            log.warning("query %s: no query text, skipping %d pairs",
                        qid, len(ranked))
            skipped.extend(
                SkippedPair(qid, docid, "query text missing")
                for docid, _ in ranked
            )
            continue
        for docid, rank in ranked:
            if docid not in docs:
                log.warning("pair (%s, %s): no document text, skipping",
                            qid, docid)
                skipped.append(
                    SkippedPair(qid, docid, "document text missing")
                )
                continue
            tokens = tokenize(docs[docid])
            if not tokens:
                log.warning("pair (%s, %s): document has no tokens, "
                            "skipping", qid, docid)
                skipped.append(
                    SkippedPair(qid, docid, "document has no tokens")
                )
                continue
            windows = slice_windows(tokens, job.window, job.stride)
            pending.append((qid, docid, rank, queries[qid], windows))

    flat_q: list[str] = []
    flat_p: list[str] = []
    owner: list[int] = []
    for idx, (_, _, _, qtext, windows) in enumerate(pending):
        for _, chunk in windows:
            flat_q.append(qtext)
            flat_p.append(" ".join(chunk))
            owner.append(idx)
    scores, pooled = encoder.encode(flat_q, flat_p)

    # windows are emitted in increasing offset order, so a strict > keeps
    # the smallest offset on score ties
    best_score = [-np.inf] * len(pending)
    best_row = [-1] * len(pending)
    for row, idx in enumerate(owner):
        if scores[row] > best_score[idx]:
            best_score[idx] = float(scores[row])
            best_row[idx] = row
    records = [
        interchange.Record(qid, docid, rank, pooled[best_row[idx]])
        for idx, (qid, docid, rank, _, _) in enumerate(pending)
    ]

    out_dir = Path(job.out).parent
    if str(out_dir):
        out_dir.mkdir(parents=True, exist_ok=True)
    interchange.write_store(
        job.out, records, encoder.dim, encoder_name=job.checkpoint,
        format=job.format,
    )
    return ExportReport(
        out=str(job.out),
        dim=encoder.dim,
        encoder_name=job.checkpoint,
        n_queries=len(run),
        written=len(records),
        skipped=skipped,
    )
