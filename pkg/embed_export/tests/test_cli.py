import json

from groupqpp.data import load_embeddings

from embed_export.cli import main

from conftest import RUN_LINES


def base_args(checkpoint, corpus_files, out):
    return [
        "--checkpoint", checkpoint,
        "--run", corpus_files["run"],
        "--corpus", corpus_files["corpus"],
        "--queries", corpus_files["queries"],
        "--out", str(out),
        "--max-length", "32",
        "--batch-size", "4",
    ]


class TestCli:
    def test_end_to_end(self, checkpoint, corpus_files, tmp_path, capsys):
        out = tmp_path / "pairs.qppe"
        code = main(base_args(checkpoint, corpus_files, out))
        assert code == 0
        stdout = capsys.readouterr().out
        assert f"exported {len(RUN_LINES)} pair embeddings" in stdout
        assert "dim 32" in stdout
        store = load_embeddings(out)
        assert len(store) == len(RUN_LINES)
        meta = json.loads((tmp_path / "pairs.qppe.meta.json").read_text())
        assert meta["encoder-name"] == checkpoint

    def test_text_format_flag(self, checkpoint, corpus_files, tmp_path):
        out = tmp_path / "pairs.jsonl"
        args = base_args(checkpoint, corpus_files, out)
        args += ["--format", "text", "--pooling", "mean"]
        assert main(args) == 0
        assert load_embeddings(out).dim == 32

    def test_missing_required_flag_is_usage_error(self, capsys):
        assert main(["--run", "r.txt"]) == 1
        assert "error" in capsys.readouterr().err

    def test_bad_job_value_is_usage_error(
        self, checkpoint, corpus_files, tmp_path, capsys
    ):
        args = base_args(checkpoint, corpus_files, tmp_path / "p.qppe")
        args += ["--window", "0"]
        assert main(args) == 1
        assert "window" in capsys.readouterr().err

    def test_unknown_flag_is_usage_error(
        self, checkpoint, corpus_files, tmp_path
    ):
        args = base_args(checkpoint, corpus_files, tmp_path / "p.qppe")
        args += ["--no-such-flag"]
        assert main(args) == 1

    def test_missing_run_file_is_data_error(
        self, checkpoint, corpus_files, tmp_path, capsys
    ):
        args = base_args(checkpoint, corpus_files, tmp_path / "p.qppe")
        args[args.index("--run") + 1] = str(tmp_path / "absent.txt")
        assert main(args) == 2
        assert "run" in capsys.readouterr().err

    def test_unreadable_checkpoint_is_data_error(
        self, corpus_files, tmp_path, capsys
    ):
        empty = tmp_path / "not-a-checkpoint"
        empty.mkdir()
        args = base_args(str(empty), corpus_files, tmp_path / "p.qppe")
        assert main(args) == 2
        assert "checkpoint" in capsys.readouterr().err
