import numpy as np
import pytest

from ctd2gan.cli import build_parser, run
from ctd2gan.data import load_dataset
from ctd2gan.scoring import ScoreSeries
from ctd2gan.training import read_loss_log


def test_synth_is_deterministic(tmp_path, capsys):
    for name in ("a", "b"):
        assert run(["synth", "--preset", "tiny", "--seed", "7", "--out", str(tmp_path / f"{name}.ctds")]) == 0
    assert (tmp_path / "a.ctds").read_bytes() == (tmp_path / "b.ctds").read_bytes()
    assert run(["synth", "--preset", "tiny", "--split", "test", "--seed", "7", "--out", str(tmp_path / "t.ctds")]) == 0
    assert load_dataset(tmp_path / "t.ctds").labels.sum() > 0
    assert load_dataset(tmp_path / "a.ctds").labels.sum() == 0


def write_scores(path, regularity, labels):
    n = len(labels)
    ScoreSeries(np.zeros(n, int), np.arange(5, 5 + n), np.ones(n), np.zeros(n), np.asarray(regularity, float),
                np.asarray(labels)).to_csv(path)


def test_eval_prints_auc_one_for_separated_scores(tmp_path, capsys):
    write_scores(tmp_path / "s.csv", [0.9, 0.8, 0.1, 0.2], [0, 0, 1, 1])
    assert run(["eval", "--scores", str(tmp_path / "s.csv"), "--out", str(tmp_path / "e.txt")]) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[0] == "AUC 1.0"
    assert "auc=1.0" in (tmp_path / "e.txt").read_text()


def test_help_documents_every_flag(capsys):
    parser = build_parser()
    sub = next(a for a in parser._actions if a.choices and "synth" in a.choices)
    for name, p in sub.choices.items():
        assert run([name, "--help"]) == 0
        text = capsys.readouterr().out
        for action in p._actions:
            if action.option_strings and action.dest != "help":
                assert action.option_strings[0] in text, (name, action.dest)
                assert action.help, (name, action.dest)
                assert action.required or "(default:" in action.help or "default:" in text


@pytest.mark.parametrize("argv", [
    ["train", "--data", "x.ctds", "--out", "m.ckpt", "--bogus"],
    ["frobnicate"],
    ["eval"],
    ["train", "--data", "x.ctds", "--out", "m.ckpt", "--epochs", "many"],
])
def test_usage_errors_exit_one(argv, capsys):
    assert run(argv) == 1
    assert capsys.readouterr().err


def test_validation_errors_exit_one_with_messages(tmp_path, capsys):
    assert run(["score", "--model", str(tmp_path / "none.ckpt"), "--data", "x", "--out", "y"]) == 1
    (tmp_path / "bad.ctds").write_bytes(b"NOPE" + bytes(20))
    assert run(["train", "--data", str(tmp_path / "bad.ctds"), "--out", str(tmp_path / "m.ckpt")]) == 1
    assert "magic" in capsys.readouterr().err
    write_scores(tmp_path / "one.csv", [0.1, 0.2], [1, 1])
    assert run(["eval", "--scores", str(tmp_path / "one.csv")]) == 1
    assert "undefined" in capsys.readouterr().err
    assert run(["train", "--data", str(tmp_path / "bad.ctds"), "--out", "m", "--resolution", "40"]) == 1


def test_gradcheck_operation_suite_exits_zero(capsys):
    assert run(["gradcheck", "--instances", "1", "--skip-model"]) == 0
    out = capsys.readouterr().out
    assert "conv3d" in out and "FAIL" not in out


def test_gradcheck_failure_exits_two(capsys):
    assert run(["gradcheck", "--instances", "1", "--skip-model", "--tolerance", "0"]) == 2
    assert "gradient check failed" in capsys.readouterr().err


def test_tiny_pipeline_runs_without_intervention(tmp_path, capsys):
    d = str(tmp_path)
    assert run(["synth", "--preset", "tiny", "--split", "train", "--out", f"{d}/train.ctds"]) == 0
    assert run(["synth", "--preset", "tiny", "--split", "test", "--out", f"{d}/test.ctds"]) == 0
    assert run(["train", "--preset", "tiny", "--data", f"{d}/train.ctds", "--out", f"{d}/m.ckpt",
                "--epochs", "1", "--max-steps", "2"]) == 0
    assert len(read_loss_log(f"{d}/m.ckpt.loss.csv")) == 2
    assert run(["score", "--model", f"{d}/m.ckpt", "--data", f"{d}/test.ctds", "--out", f"{d}/s.csv"]) == 0
    assert run(["eval", "--scores", f"{d}/s.csv", "--data", f"{d}/test.ctds"]) == 0
    assert capsys.readouterr().out.splitlines()[-5].startswith("AUC ")
    assert run(["perturb", "--model", f"{d}/m.ckpt", "--data", f"{d}/test.ctds", "--out", f"{d}/p.txt",
                "--windows", "10"]) == 0
    assert "fraction_lower=" in (tmp_path / "p.txt").read_text()
    # a 32x32 dataset cannot feed the default 64x64 architecture
    assert run(["train", "--data", f"{d}/train.ctds", "--out", f"{d}/x.ckpt", "--max-steps", "1"]) == 1
