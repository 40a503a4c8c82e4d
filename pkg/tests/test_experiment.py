"""The split protocol: config handling, labels, reports, sweeps."""

import dataclasses
import json

import numpy as np
import pytest

from groupqpp.baselines import predict_baseline
from groupqpp.errors import ExperimentError, InputError, UsageError
from groupqpp.experiment import (
    ExperimentConfig,
    compute_labels,
    config_from_mapping,
    config_to_mapping,
    dump_config_text,
    parse_config_text,
    read_label_file,
    read_predictions,
    render_table,
    run_experiment,
    sweep,
    write_labels,
    write_predictions,
)
from groupqpp.metrics import QueryLabel, pearson, precision_at_k
from groupqpp.model import StoreSource
from groupqpp.synth import (
    ap_labels,
    make_planted_fixture,
    qrels_from_offsets,
)


def fast_config(**kw):
    base = dict(
        methods=("nsigma", "model", "model+nsigma"),
        strategy="doc",
        group_size=4,
        train_depth=6,
        infer_depth=6,
        baseline_depth=6,
        lr_grid=(1e-3,),
        epochs=1,
        n_heads=2,
        n_layers=1,
        d_model=8,
        seed=9,
        n_splits=2,
        max_steps=8,
    )
    base.update(kw)
    return ExperimentConfig(**base)


def fixture_inputs(n_queries=12, seed=3):
    fx = make_planted_fixture(n_queries=n_queries, n_docs=6, dim=8, seed=seed)
    return fx, fx.run, fx.qrels, StoreSource(fx.store)


class TestConfigText:
    def test_parse_comments_blanks_quotes(self):
        text = "\n".join([
            "# comment",
            "",
            "seed = 4",
            'methods = "nsigma,model"',
            "strategy = 'doc'",
        ])
        mapping = parse_config_text(text)
        assert mapping == {
            "seed": "4",
            "methods": "nsigma,model",
            "strategy": "doc",
        }

    def test_missing_equals_rejected(self):
        with pytest.raises(UsageError, match="line 2"):
            parse_config_text("seed = 4\nbroken line\n")

    def test_dump_parses_back(self):
        cfg = fast_config()
        mapping = parse_config_text(dump_config_text(cfg))
        assert config_from_mapping(mapping) == cfg


class TestConfigMapping:
    def test_round_trip(self):
        cfg = fast_config(lambda_grid=(0.0, 0.5, 1.0), x_grid=(25.0, 75.0))
        assert config_from_mapping(config_to_mapping(cfg)) == cfg

    def test_unknown_key_rejected(self):
        with pytest.raises(UsageError, match="unknown config key"):
            config_from_mapping({"seeed": "4"})

    def test_bad_integer_rejected(self):
        with pytest.raises(UsageError, match="integer"):
            config_from_mapping({"seed": "many"})

    def test_grid_strings_split_on_commas(self):
        cfg = config_from_mapping({"lr_grid": "1e-3, 1e-4", "methods": "sigma_k"})
        assert cfg.lr_grid == (1e-3, 1e-4)
        assert cfg.methods == ("sigma_k",)

    def test_none_values_skipped(self):
        cfg = config_from_mapping({"seed": None, "group_size": "3"})
        assert cfg.seed == ExperimentConfig().seed
        assert cfg.group_size == 3


class TestConfigValidation:
    def test_unknown_method_rejected(self):
        with pytest.raises(UsageError, match="unknown methods"):
            ExperimentConfig(methods=("sigma_k", "oracle"))

    def test_bad_label_kind_rejected(self):
        with pytest.raises(UsageError, match="label kind"):
            ExperimentConfig(label_kind="NDCG")

    def test_bad_strategy_rejected(self):
        with pytest.raises(InputError):
            ExperimentConfig(strategy="sideways")

    def test_train_config_mapping(self):
        cfg = fast_config(max_steps=0, inference_order="auto")
        tcfg = cfg.train_config(seed=5)
        assert tcfg.max_steps is None
        assert tcfg.inference_order is None
        assert tcfg.seed == 5
        forced = fast_config(inference_order="random").train_config(seed=0)
        assert forced.inference_order is not None


class TestComputeLabels:
    def test_ap_values(self):
        fx, run, qrels, _ = fixture_inputs()
        labels = compute_labels(run, qrels, "AP@1000")
        want = ap_labels(run, qrels)
        assert set(labels) == set(want)
        for qid, lab in labels.items():
            assert lab.kind == "AP@1000"
            np.testing.assert_allclose(lab.value, want[qid])

    def test_p_at_k_values(self):
        fx, run, qrels, _ = fixture_inputs()
        labels = compute_labels(run, qrels, "P@k", k=3)
        for qid, lab in labels.items():
            assert lab.kind == "P@3"
            docids = [e.docid for e in run.entries(qid)]
            np.testing.assert_allclose(
                lab.value,
                precision_at_k(docids, qrels.relevant_docs(qid), 3),
            )

    def test_unjudged_query_dropped_with_warning(self, caplog):
        fx, run, qrels, _ = fixture_inputs(n_queries=5)
        held_out = run.qids[0]
        sub_qrels = qrels_from_offsets(
            run.restrict(run.qids[1:]),
            {q: fx.offsets[q] for q in run.qids[1:]},
        )
        with caplog.at_level("WARNING"):
            labels = compute_labels(run, sub_qrels, "AP@1000")
        assert held_out not in labels
        assert any(held_out in m for m in caplog.messages)

    def test_no_overlap_rejected(self):
        fx, run, qrels, _ = fixture_inputs(n_queries=4)
        held_out = run.qids[0]
        rest = run.qids[1:]
        sub_qrels = qrels_from_offsets(
            run.restrict(rest), {q: fx.offsets[q] for q in rest}
        )
        with pytest.raises(InputError):
            compute_labels(run.restrict([held_out]), sub_qrels, "AP@1000")


class TestRunExperiment:
    def test_report_structure(self):
        cfg = fast_config()
        fx, run, qrels, source = fixture_inputs()
        report = run_experiment(cfg, run=run, qrels=qrels, source=source)
        assert set(report["methods"]) == set(cfg.methods)
        assert report["n_splits"] == 2
        assert len(report["splits"]) == 2
        assert sorted(report["queries"]) == sorted(run.qids)
        for method, block in report["methods"].items():
            per = block["per_split"]
            assert len(per) == 2
            np.testing.assert_allclose(
                block["mean_kendall"],
                np.mean([s["kendall"] for s in per]),
            )
            for split, preds in zip(report["splits"], report["predictions"][method]):
                assert sorted(preds) == sorted(split["fold2"])
        assert set(report["significance"]["kendall"]) == {
            "nsigma|model", "nsigma|model+nsigma", "model|model+nsigma",
        }
        tuned = report["methods"]["model+nsigma"]["per_split"][0]["tuned"]
        assert set(tuned) == {"lr", "aggregation", "lambda", "x_percent"}

    def test_deterministic(self):
        cfg = fast_config()
        _, run, qrels, source = fixture_inputs()
        a = run_experiment(cfg, run=run, qrels=qrels, source=source)
        _, run, qrels, source = fixture_inputs()
        b = run_experiment(cfg, run=run, qrels=qrels, source=source)
        assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)

    def test_output_files(self, tmp_path):
        out = tmp_path / "exp"
        cfg = fast_config(methods=("nsigma",), out=str(out))
        _, run, qrels, _ = fixture_inputs()
        report = run_experiment(cfg, run=run, qrels=qrels)
        on_disk = json.loads((out / "report.json").read_text())
        assert on_disk == json.loads(json.dumps(report))
        assert "out" not in on_disk["config"]
        table = (out / "table.txt").read_text()
        assert "nsigma" in table
        split_lines = (out / "splits.txt").read_text().splitlines()
        assert len(split_lines) == 2 * len(run.qids)

    def test_p_at_k_supervision_still_evaluated_against_ap(self):
        # supervision labels change, the evaluation target must not:
        # a fixed baseline's reported correlation is recomputable from
        # its fold-2 predictions and the AP labels
        cfg = fast_config(methods=("sigma_k",), label_kind="P@k", label_k=3)
        fx, run, qrels, _ = fixture_inputs()
        report = run_experiment(cfg, run=run, qrels=qrels)
        ap = ap_labels(run, qrels)
        split0 = report["splits"][0]
        fold2 = split0["fold2"]
        preds = predict_baseline(
            "sigma_k", run.restrict(fold2), cfg.baseline_depth
        )
        want = pearson([preds[q] for q in fold2], [ap[q] for q in fold2])
        got = report["methods"]["sigma_k"]["per_split"][0]["pearson"]
        np.testing.assert_allclose(got, want)

    def test_failure_names_stage_and_split(self, tmp_path):
        # identical relevant-block offsets give every query the same
        # label, so the first correlation is degenerate
        fx, run, _, _ = fixture_inputs(n_queries=6)
        flat_qrels = qrels_from_offsets(run, {q: 2 for q in run.qids})
        out = tmp_path / "exp"
        cfg = fast_config(methods=("sigma_k",), n_splits=1, out=str(out))
        with pytest.raises(ExperimentError) as exc_info:
            run_experiment(cfg, run=run, qrels=flat_qrels)
        err = exc_info.value
        assert err.stage == "correlation:sigma_k"
        assert err.split_index == 0
        assert err.__cause__ is not None
        partial = json.loads((out / "partial_report.json").read_text())
        assert partial["failed_stage"] == "correlation:sigma_k"
        assert partial["completed_splits"] == []

    def test_model_without_source_rejected(self):
        cfg = fast_config(methods=("model",))
        _, run, qrels, _ = fixture_inputs()
        with pytest.raises(ExperimentError) as exc_info:
            run_experiment(cfg, run=run, qrels=qrels)
        assert exc_info.value.stage == "load-inputs"
        assert isinstance(exc_info.value.__cause__, InputError)

    def test_too_few_queries_rejected(self):
        cfg = fast_config(methods=("sigma_k",))
        _, run, qrels, _ = fixture_inputs(n_queries=4)
        small = run.restrict(run.qids[:3])
        with pytest.raises(ExperimentError) as exc_info:
            run_experiment(cfg, run=small, qrels=qrels)
        assert exc_info.value.stage == "labels"


class TestSweep:
    def test_bad_axis_rejected(self):
        with pytest.raises(UsageError, match="axis"):
            sweep(fast_config(), "learning_rate")

    def test_requires_model_method(self):
        with pytest.raises(UsageError, match="model"):
            sweep(fast_config(methods=("nsigma",)), "group_size")

    def test_points_track_model(self, tmp_path):
        fx, run, qrels, source = fixture_inputs(n_queries=8)
        paths = {}
        from groupqpp.synth import write_fixture

        paths = write_fixture(fx, tmp_path / "fx")
        cfg = fast_config(
            methods=("model",),
            n_splits=1,
            max_steps=4,
            run=paths["run"],
            qrels=paths["qrels"],
            embeddings=paths["embeddings"],
            out=str(tmp_path / "sweep"),
        )
        result = sweep(cfg, "group_size", grid=(1, 2))
        assert [p["value"] for p in result["points"]] == [1, 2]
        data = json.loads((tmp_path / "sweep" / "sweep.json").read_text())
        assert data == json.loads(json.dumps(result))
        assert (tmp_path / "sweep" / "group_size=1" / "report.json").exists()
        text = (tmp_path / "sweep" / "sweep.txt").read_text()
        assert "mean_kendall" in text


class TestPredictionFiles:
    def test_round_trip(self):
        preds = {"q2": 0.25, "q1": -1.5}
        text = write_predictions(preds, "nsigma")
        lines = text.splitlines()
        assert lines[0].split() == ["q1", "-1.5", "nsigma"]
        assert read_predictions(text) == preds

    def test_two_column_accepted(self):
        assert read_predictions("q1 0.5\n") == {"q1": 0.5}

    def test_bad_column_count_rejected(self):
        with pytest.raises(InputError, match="line 1"):
            read_predictions("q1 0.5 m extra\n")

    def test_bad_score_rejected(self):
        with pytest.raises(InputError, match="bad score"):
            read_predictions("q1 high\n")

    def test_empty_rejected(self):
        with pytest.raises(InputError):
            read_predictions("\n\n")


class TestLabelFiles:
    def test_round_trip(self):
        labels = {
            "q1": QueryLabel("q1", 0.75, "AP@1000"),
            "q2": QueryLabel("q2", 0.5, "AP@1000"),
        }
        text = write_labels(labels)
        assert text.splitlines()[0].split() == ["q1", "0.75", "AP@1000"]
        assert read_label_file(text) == {"q1": 0.75, "q2": 0.5}

    def test_bad_value_rejected(self):
        with pytest.raises(InputError, match="bad value"):
            read_label_file("q1 perfect AP@1000\n")


class TestRenderTable:
    def test_rows_and_significance(self):
        cfg = fast_config(methods=("sigma_k", "nsigma"))
        _, run, qrels, _ = fixture_inputs()
        report = run_experiment(cfg, run=run, qrels=qrels)
        table = render_table(report)
        assert "sigma_k" in table and "nsigma" in table
        assert "sigma_k|nsigma" in table
