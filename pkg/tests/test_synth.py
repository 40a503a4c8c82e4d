"""Synthetic fixtures with controllable label structure."""

import numpy as np
import pytest

from groupqpp.data import load_embeddings, parse_qrels, parse_run
from groupqpp.metrics import pearson
from groupqpp.synth import (
    RELEVANT_PER_QUERY,
    ap_labels,
    make_context_fixture,
    make_planted_fixture,
    offset_for_target,
    qrels_from_offsets,
    serialize_qrels,
    write_fixture,
)


class TestOffsets:
    def test_extremes(self):
        assert offset_for_target(1.0, 16) == 0
        assert offset_for_target(0.0, 16) == 16 - RELEVANT_PER_QUERY

    def test_monotone_in_target(self):
        offs = [offset_for_target(v, 16) for v in np.linspace(0, 1, 21)]
        assert offs == sorted(offs, reverse=True)


class TestQrelsFromOffsets:
    def test_marks_block_and_judges_rest(self):
        fx = make_planted_fixture(n_queries=4, n_docs=8, dim=4, seed=0)
        qrels = qrels_from_offsets(fx.run, fx.offsets)
        for qid in fx.run.qids:
            rel = qrels.relevant_docs(qid)
            assert len(rel) == RELEVANT_PER_QUERY
            entries = fx.run.entries(qid)
            o = fx.offsets[qid]
            assert rel == {e.docid for e in entries[o : o + RELEVANT_PER_QUERY]}
            judged = {r.docid for r in qrels.records if r.qid == qid}
            assert judged == {e.docid for e in entries}


class TestPlantedFixture:
    def test_deterministic_per_seed(self):
        a = make_planted_fixture(n_queries=6, n_docs=8, dim=4, seed=3)
        b = make_planted_fixture(n_queries=6, n_docs=8, dim=4, seed=3)
        assert a.targets == b.targets
        assert a.run.entries(a.run.qids[0]) == b.run.entries(b.run.qids[0])
        qid = a.run.qids[0]
        docid = a.run.entries(qid)[0].docid
        np.testing.assert_allclose(
            a.store.get(qid, docid).vec, b.store.get(qid, docid).vec
        )
        c = make_planted_fixture(n_queries=6, n_docs=8, dim=4, seed=4)
        assert a.targets != c.targets

    def test_shapes(self):
        fx = make_planted_fixture(n_queries=5, n_docs=7, dim=6, seed=0)
        assert len(fx.run.qids) == 5
        assert all(len(fx.run.entries(q)) == 7 for q in fx.run.qids)
        assert fx.store.dim == 6
        assert len(fx.store) == 35

    def test_scores_positive_and_decreasing(self):
        fx = make_planted_fixture(n_queries=4, n_docs=10, dim=4, seed=1)
        for qid in fx.run.qids:
            scores = [e.score for e in fx.run.entries(qid)]
            assert all(s > 0 for s in scores)
            assert scores == sorted(scores, reverse=True)

    def test_target_planted_in_first_coordinate(self):
        fx = make_planted_fixture(n_queries=4, n_docs=6, dim=4, seed=2)
        for qid in fx.run.qids:
            docid = fx.run.entries(qid)[0].docid
            np.testing.assert_allclose(
                fx.store.get(qid, docid).vec[0], fx.targets[qid], atol=1e-6
            )

    def test_targets_track_average_precision(self):
        fx = make_planted_fixture(seed=0)
        labels = ap_labels(fx.run, fx.qrels)
        qids = sorted(fx.targets)
        r = pearson(
            [fx.targets[q] for q in qids], [labels[q] for q in qids]
        )
        assert r > 0.9


class TestContextFixture:
    def test_targets_in_unit_interval(self):
        fx = make_context_fixture(n_queries=12, seed=0)
        assert all(0.0 <= v <= 1.0 for v in fx.targets.values())

    def test_scores_carry_no_target_information(self):
        fx = make_context_fixture(n_queries=6, n_docs=5, seed=1)
        rows = {tuple(e.score for e in fx.run.entries(q)) for q in fx.run.qids}
        assert rows == {(5.0, 4.0, 3.0, 2.0, 1.0)}

    def test_target_recoverable_from_group_features(self):
        fx = make_context_fixture(n_queries=10, n_docs=12, top_t=8, seed=5)
        from math import erf, sqrt

        for qid in fx.run.qids:
            x = np.array([
                fx.store.get(qid, e.docid).vec[0]
                for e in fx.run.entries(qid)
            ])
            top = x[:8]
            z = (x[0] - top.mean()) / top.std()
            want = 0.5 * (1.0 + erf(z / sqrt(2.0)))
            np.testing.assert_allclose(fx.targets[qid], want, atol=1e-6)

    def test_deterministic_per_seed(self):
        a = make_context_fixture(n_queries=5, seed=2)
        b = make_context_fixture(n_queries=5, seed=2)
        assert a.targets == b.targets


class TestSerialization:
    def test_qrels_lines(self):
        fx = make_planted_fixture(n_queries=2, n_docs=4, dim=4, seed=0)
        text = serialize_qrels(fx.qrels)
        parts = text.splitlines()[0].split()
        assert len(parts) == 4
        assert parts[1] == "0"
        assert parse_qrels(text).relevant_docs(fx.run.qids[0]) == (
            fx.qrels.relevant_docs(fx.run.qids[0])
        )

    def test_write_fixture_round_trip(self, tmp_path):
        fx = make_planted_fixture(n_queries=3, n_docs=5, dim=4, seed=1)
        paths = write_fixture(fx, tmp_path / "fx")
        run = parse_run(open(paths["run"], encoding="utf-8").read())
        assert run.qids == fx.run.qids
        assert run.entries(run.qids[0]) == fx.run.entries(fx.run.qids[0])
        qrels = parse_qrels(open(paths["qrels"], encoding="utf-8").read())
        labels_disk = ap_labels(run, qrels)
        labels_mem = ap_labels(fx.run, fx.qrels)
        assert labels_disk == pytest.approx(labels_mem)
        store = load_embeddings(paths["embeddings"])
        assert store.dim == 4
        qid = fx.run.qids[0]
        docid = fx.run.entries(qid)[0].docid
        np.testing.assert_allclose(
            store.get(qid, docid).vec,
            fx.store.get(qid, docid).vec,
        )
