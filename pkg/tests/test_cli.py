import json

import pytest

from reflectrl.cli import main
from reflectrl.episode import read_records
from reflectrl.policy import load_checkpoint
from reflectrl.tasks import read_problems


def run(argv):
    return main(argv)


class TestVerifyCommand:
    def test_success_exit_zero(self, capsys):
        code = run(["verify", "--numbers", "4,73,4,23", "--target", "76", "--text", r"\boxed{(4*23-73)*4}"])
        out = capsys.readouterr().out
        assert code == 0
        assert out.startswith("Success")

    def test_failure_categorized(self, capsys):
        code = run(["verify", "--numbers", "1,2,3", "--target", "10", "--text", r"\boxed{1+2+3}"])
        assert code == 0
        assert "MissedTarget" in capsys.readouterr().out

    def test_unknown_flag_exits_2(self):
        with pytest.raises(SystemExit) as err:
            run(["verify", "--bogus", "1"])
        assert err.value.code == 2

    def test_unknown_subcommand_exits_2(self):
        with pytest.raises(SystemExit) as err:
            run(["frobnicate"])
        assert err.value.code == 2


class TestSolveCommand:
    def test_solvable(self, capsys):
        assert run(["solve", "--numbers", "4,73,4,23", "--target", "76"]) == 0
        out = capsys.readouterr().out.strip()
        assert out and "unsolvable" not in out

    def test_unsolvable(self, capsys):
        assert run(["solve", "--numbers", "1,1,1", "--target", "100"]) == 0
        assert "unsolvable" in capsys.readouterr().out


class TestGenCountdown:
    def test_writes_problems(self, tmp_path, capsys):
        out = tmp_path / "problems.jsonl"
        assert run(["gen-countdown", "--count", "7", "--seed", "3", "--out", str(out)]) == 0
        problems = read_problems(out)
        assert len(problems) == 7

    def test_deterministic_in_seed(self, tmp_path):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        run(["gen-countdown", "--count", "5", "--seed", "9", "--out", str(a)])
        run(["gen-countdown", "--count", "5", "--seed", "9", "--out", str(b)])
        assert a.read_bytes() == b.read_bytes()


@pytest.fixture(scope="module")
def small_world(tmp_path_factory):
    """problems + pretrained-ish checkpoint for pipeline commands."""
    root = tmp_path_factory.mktemp("cli")
    problems = root / "problems.jsonl"
    assert run([
        "gen-countdown", "--count", "6", "--seed", "1", "--min-numbers", "2", "--max-numbers", "2",
        "--out", str(problems),
    ]) == 0
    ckpt = root / "init.ckpt"
    assert run([
        "pretrain", "--problems", str(problems), "--out", str(ckpt),
        "--steps", "3", "--batch-size", "4", "--layers", "1", "--width", "16", "--heads", "2",
        "--context", "160", "--seed", "0",
    ]) == 0
    return root, problems, ckpt


class TestPipelineCommands:
    def test_build_failures(self, small_world, capsys):
        root, problems, ckpt = small_world
        failures = root / "failures.jsonl"
        code = run([
            "build-failures", "--checkpoint", str(ckpt), "--tasks", str(problems),
            "--k", "2", "--seed", "0", "--max-attempt-tokens", "8", "--out", str(failures),
        ])
        assert code == 0
        records = read_records(failures)
        assert records, "an untrained policy should fail plenty"

    def test_train_zero_steps_writes_initial_checkpoint(self, small_world):
        root, problems, ckpt = small_world
        failures = root / "failures.jsonl"
        ckdir = root / "ckpts"
        code = run([
            "train", "--failures", str(failures), "--init", str(ckpt),
            "--steps", "0", "--checkpoint-dir", str(ckdir),
        ])
        assert code == 0
        saved = sorted(ckdir.glob("*.ckpt"))
        assert [p.name for p in saved] == ["step_000000.ckpt"]
        params, _, meta = load_checkpoint(saved[0])
        assert meta["step"] == 0

    def test_eval_and_report(self, small_world, tmp_path):
        root, problems, ckpt = small_world
        eval_json = root / "eval.json"
        code = run([
            "eval", "--checkpoint", str(ckpt), "--tasks", str(problems),
            "--label", "vanilla", "--seed", "0", "--out", str(eval_json),
        ])
        assert code == 0
        payload = json.loads(eval_json.read_text())
        assert payload["label"] == "vanilla"
        assert payload["samples"] == 6
        report_md = root / "report.md"
        code = run(["report", "--inputs", str(eval_json), "--format", "markdown", "--out", str(report_md)])
        assert code == 0
        assert "| vanilla |" in report_md.read_text()

    def test_missing_generator_is_usage_error(self, small_world, capsys):
        root, problems, _ = small_world
        code = run(["eval", "--tasks", str(problems)])
        assert code == 2
        assert "error" in capsys.readouterr().err

    def test_runtime_failure_is_exit_one(self, capsys, tmp_path):
        code = run(["eval", "--checkpoint", str(tmp_path / "missing.ckpt"), "--tasks", str(tmp_path / "nope.jsonl")])
        assert code == 1
        err = capsys.readouterr().err
        assert json.loads(err)["error"]
