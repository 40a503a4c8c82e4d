"""Synthetic fixtures for end-to-end testing.

Two generators:

* planted fixture: every document vector of a query carries the query's
  target value in coordinate 0, so a trained predictor can recover the
  labels exactly.  Used for overfit and protocol tests.
* context fixture: the label is the standardized score of the top-ranked
  document *within its query's top results*, so a predictor can only do
  well when it sees the rest of the group.  Used for the group-size
  benefit check.

Both emit qrels whose AP@1000 is strictly decreasing in the offset at
which the two relevant documents are planted, making AP a monotone proxy
of the underlying target value.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import (
    PairEmbedding,
    PairEmbeddingStore,
    Qrels,
    QrelsRecord,
    RetrievalRun,
    RunEntry,
    serialize_run,
)
from .metrics import average_precision

RELEVANT_PER_QUERY = 2


@dataclass
class SyntheticFixture:
    run: RetrievalRun
    store: PairEmbeddingStore
    qrels: Qrels
    targets: dict[str, float]  # qid -> the planted value in [0, 1]
    offsets: dict[str, int]  # qid -> rank offset of the relevant block


def offset_for_target(value: float, n_docs: int) -> int:
    """Rank offset of the relevant block: 0 when value=1, max when 0."""
    return int(round((1.0 - value) * (n_docs - RELEVANT_PER_QUERY)))


def qrels_from_offsets(
    run: RetrievalRun, offsets: dict[str, int]
) -> Qrels:
    """Mark RELEVANT_PER_QUERY docs relevant starting at each offset."""
    records = []
    for qid in run.qids:
        entries = run.entries(qid)
        o = offsets[qid]
        for entry in entries[o : o + RELEVANT_PER_QUERY]:
            records.append(QrelsRecord(qid, entry.docid, 1))
        # judge the rest explicitly nonrelevant
        for i, entry in enumerate(entries):
            if not o <= i < o + RELEVANT_PER_QUERY:
                records.append(QrelsRecord(qid, entry.docid, 0))
    return Qrels(records)


def ap_labels(run: RetrievalRun, qrels: Qrels) -> dict[str, float]:
    return {
        qid: average_precision(
            [e.docid for e in run.entries(qid)], qrels.relevant_docs(qid)
        )
        for qid in run.qids
    }


def _qid(i: int) -> str:
    return f"q{i:03d}"


def make_planted_fixture(
    n_queries: int = 32,
    n_docs: int = 16,
    dim: int = 16,
    seed: int = 0,
) -> SyntheticFixture:
    """Targets planted directly in embedding coordinate 0.

    Retrieval scores are positive decaying curves with per-query scale
    and shape, so score-distribution baselines vary across queries.
    """
    rng = np.random.default_rng([seed, 101])
    entries: dict[str, list[RunEntry]] = {}
    store = PairEmbeddingStore(dim=dim, encoder_name="synthetic-planted")
    targets: dict[str, float] = {}
    offsets: dict[str, int] = {}
    for qi in range(n_queries):
        qid = _qid(qi)
        target = float(rng.uniform(0.05, 0.95))
        targets[qid] = target
        offsets[qid] = offset_for_target(target, n_docs)
        scale = float(rng.uniform(5.0, 20.0))
        decay = float(rng.uniform(0.05, 0.4))
        qentries = []
        for di in range(n_docs):
            docid = f"{qid}d{di:02d}"
            score = scale * math.exp(-decay * di) + 0.5
            qentries.append(RunEntry(qid, docid, di + 1, round(score, 6)))
            vec = rng.normal(0.0, 0.05, size=dim)
            vec[0] = target
            store.add(PairEmbedding(qid, docid, di + 1, vec))
        entries[qid] = qentries
    run = RetrievalRun(entries)
    qrels = qrels_from_offsets(run, offsets)
    return SyntheticFixture(
        run=run, store=store, qrels=qrels, targets=targets, offsets=offsets
    )


def make_context_fixture(
    n_queries: int = 48,
    n_docs: int = 12,
    top_t: int = 8,
    dim: int = 8,
    seed: int = 0,
) -> SyntheticFixture:
    """Labels need within-group context to predict.

    Document i of query q carries feature x = mu_q + eps_i with a wide
    per-query level mu_q.  The target is the standard-normal CDF of the
    top-ranked document's feature z-scored against the query's top
    ``top_t`` features, so a pointwise model cannot remove mu_q but a
    groupwise model over a query's document group can.
    """
    rng = np.random.default_rng([seed, 202])
    entries: dict[str, list[RunEntry]] = {}
    store = PairEmbeddingStore(dim=dim, encoder_name="synthetic-context")
    targets: dict[str, float] = {}
    offsets: dict[str, int] = {}
    for qi in range(n_queries):
        qid = _qid(qi)
        mu = float(rng.uniform(-4.0, 4.0))
        x = mu + rng.normal(0.0, 1.0, size=n_docs)
        top = x[:top_t]
        z = (x[0] - top.mean()) / top.std()
        target = 0.5 * (1.0 + math.erf(z / math.sqrt(2.0)))
        targets[qid] = target
        offsets[qid] = offset_for_target(target, n_docs)
        qentries = []
        for di in range(n_docs):
            docid = f"{qid}d{di:02d}"
            # scores only encode the ranking, not the target
            score = float(n_docs - di)
            qentries.append(RunEntry(qid, docid, di + 1, score))
            vec = rng.normal(0.0, 0.05, size=dim)
            vec[0] = x[di]
            vec[1] = 1.0
            store.add(PairEmbedding(qid, docid, di + 1, vec))
        entries[qid] = qentries
    run = RetrievalRun(entries)
    qrels = qrels_from_offsets(run, offsets)
    return SyntheticFixture(
        run=run, store=store, qrels=qrels, targets=targets, offsets=offsets
    )


def serialize_qrels(qrels: Qrels) -> str:
    return (
        "\n".join(f"{r.qid} 0 {r.docid} {r.grade}" for r in qrels.records)
        + "\n"
    )


def write_fixture(fixture: SyntheticFixture, out_dir) -> dict[str, str]:
    """Write run/qrels/embedding files; returns the path map."""
    from pathlib import Path

    from .data import save_embeddings

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "run": str(out / "run.txt"),
        "qrels": str(out / "qrels.txt"),
        "embeddings": str(out / "pairs.qppe"),
    }
    with open(paths["run"], "w", encoding="utf-8") as f:
        f.write(serialize_run(fixture.run, tag="synthetic"))
    with open(paths["qrels"], "w", encoding="utf-8") as f:
        f.write(serialize_qrels(fixture.qrels))
    save_embeddings(fixture.store, paths["embeddings"], format="binary")
    return paths
