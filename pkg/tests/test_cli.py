"""CLI tests: each verb end to end on a one-block model, override parsing,
and error reporting via exit codes."""

import os

import pytest

from conftest import TINY_RUN_OVERRIDES
from deskssl import cli, harness


def write_tiny_config(path, out, run_id="clirun", extra=()):
    lines = [f"{k} = {v}" for k, v in TINY_RUN_OVERRIDES.items()]
    lines += [f"run.id = {run_id}", f"run.out = {out}"]
    lines += list(extra)
    path.write_text("\n".join(lines) + "\n")


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "run.cfg"
    write_tiny_config(p, str(tmp_path / "out"))
    return p


class TestTrainVerb:
    def test_train_runs_and_prints_results(self, cfg_file, capsys):
        assert cli.main(["train", "--config", str(cfg_file)]) == 0
        out = capsys.readouterr().out
        assert out.splitlines()[0] == ",".join(harness.RESULT_COLUMNS)
        assert "linear_acc" in out and "collapsed" in out

    def test_override_beats_file(self, cfg_file, tmp_path, capsys):
        code = cli.main(
            ["train", "--config", str(cfg_file), "--run.id=other",
             "--train.total_steps=2", "--eval.n_points=1"]
        )
        assert code == 0
        rd = os.path.join(str(tmp_path / "out"), "other")
        assert os.path.isdir(rd)
        assert "step" in capsys.readouterr().out

    def test_unknown_key_is_exit_2(self, cfg_file, capsys):
        assert cli.main(["train", "--config", str(cfg_file), "--modee=x"]) == 2
        assert "unknown key: modee" in capsys.readouterr().err


class TestEvalVerbs:
    @pytest.fixture
    def trained(self, cfg_file, tmp_path):
        cli.main(["train", "--config", str(cfg_file)])
        return os.path.join(str(tmp_path / "out"), "clirun", "checkpoint")

    def test_eval_prints_metrics(self, trained, capsys):
        assert cli.main(["eval", "--checkpoint", trained]) == 0
        out = capsys.readouterr().out
        assert out.splitlines()[0] == "metric,value"
        assert "knn_acc" in out

    def test_eval_dataset_selector(self, trained, capsys):
        assert cli.main(
            ["eval", "--checkpoint", trained, "--dataset", "synthetic:16"]
        ) == 0
        assert "linear_acc" in capsys.readouterr().out

    def test_invariance_verb(self, trained, capsys):
        assert cli.main(
            ["invariance", "--checkpoint", trained, "--views", "3", "--images", "4"]
        ) == 0
        out = capsys.readouterr().out
        assert "mean_pos_cos" in out and "normalized_sim" in out

    def test_missing_checkpoint_is_exit_2(self, tmp_path, capsys):
        code = cli.main(["eval", "--checkpoint", str(tmp_path / "none")])
        assert code == 2
        assert "error:" in capsys.readouterr().err


class TestGridAndReport:
    def test_grid_verb(self, tmp_path, capsys):
        out = tmp_path / "gridout"
        spec = tmp_path / "grid.cfg"
        lines = [f"{k} = {v}" for k, v in TINY_RUN_OVERRIDES.items()]
        lines += [
            f"run.out = {out}",
            "run.id = gv",
            "train.total_steps = 4",
            "sweep.mode = original,crop",
        ]
        spec.write_text("\n".join(lines) + "\n")
        assert cli.main(["grid", "--spec", str(spec)]) == 0
        printed = capsys.readouterr().out
        assert "summary" in printed
        assert os.path.exists(out / "summary.csv")
        assert os.path.exists(out / "report_gap.csv")

    def test_report_verb_rebuilds(self, cfg_file, tmp_path, capsys):
        cli.main(["train", "--config", str(cfg_file)])
        root = str(tmp_path / "out")
        assert cli.main(["report", "--dir", root]) == 0
        assert os.path.exists(os.path.join(root, "report_tidy.csv"))

    def test_report_empty_dir_is_exit_2(self, tmp_path, capsys):
        empty = tmp_path / "empty"
        empty.mkdir()
        assert cli.main(["report", "--dir", str(empty)]) == 2
