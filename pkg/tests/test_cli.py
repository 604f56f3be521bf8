"""Command-line surface: subcommands, outputs and exit codes."""

import json

import pytest

from udon import cli
from udon import model as M
from udon.datagen import read_dataset
from smallcfg import tiny_experiment


@pytest.fixture()
def tiny_cfg(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(tiny_experiment(steps=20).to_text())
    return path


@pytest.fixture()
def tiny_file(tmp_path, tiny_cfg):
    out = tmp_path / "data.bin"
    assert cli.main(["gen-data", "--config", str(tiny_cfg), "--out", str(out)]) == 0
    return out


class TestGenData:
    def test_writes_dataset_and_metadata(self, tiny_file):
        d = read_dataset(tiny_file)
        assert d.classes_per_domain == [4, 5, 6]
        assert d.metadata["seed"] == "0"

    def test_seed_flag(self, tmp_path, tiny_cfg, tiny_file):
        out = tmp_path / "other.bin"
        assert cli.main(["gen-data", "--config", str(tiny_cfg), "--out", str(out),
                         "--seed", "5"]) == 0
        assert not read_dataset(out).equals(read_dataset(tiny_file))


class TestTrain:
    def test_outputs(self, tmp_path, tiny_cfg, tiny_file, capsys):
        out = tmp_path / "run"
        code = cli.main(["train", "--config", str(tiny_cfg), "--seed", "1", "--out-dir", str(out),
                         "--data", str(tiny_file), "--set", "eval_every=10"])
        assert code == 0
        for name in ("checkpoint.ckpt", "config.cfg", "steps.csv", "sampler_trace.csv",
                     "val_metrics.csv", "metrics.csv", "metrics.json"):
            assert (out / name).exists(), name
        assert "data_path = " + str(tiny_file) in (out / "config.cfg").read_text()
        assert "mean R@1" in capsys.readouterr().out
        _, extra = M.load_checkpoint(out / "checkpoint.ckpt")
        assert extra.startswith("seed=1\n") and "eval_every = 10" in extra

    def test_same_seed_same_checkpoint(self, tmp_path, tiny_cfg, tiny_file):
        for sub in ("a", "b"):
            assert cli.main(["train", "--config", str(tiny_cfg), "--out-dir", str(tmp_path / sub),
                             "--data", str(tiny_file)]) == 0
        assert (tmp_path / "a/checkpoint.ckpt").read_bytes() == \
            (tmp_path / "b/checkpoint.ckpt").read_bytes()
        assert (tmp_path / "a/metrics.csv").read_bytes() == \
            (tmp_path / "b/metrics.csv").read_bytes()

    def test_offline_writes_teachers(self, tmp_path, tiny_cfg, tiny_file):
        out = tmp_path / "off"
        assert cli.main(["train", "--config", str(tiny_cfg), "--out-dir", str(out), "--data",
                         str(tiny_file), "--set", "mode=offline_distill_8"]) == 0
        assert sorted(p.name for p in out.glob("teacher_*.ckpt")) == [
            "teacher_0.ckpt", "teacher_1.ckpt", "teacher_2.ckpt"]

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_exit_3(self, tmp_path, tiny_cfg, tiny_file, capsys):
        out = tmp_path / "div"
        code = cli.main(["train", "--config", str(tiny_cfg), "--out-dir", str(out), "--data",
                         str(tiny_file), "--set", "lr=1e300"])
        assert code == 3
        report = json.loads((out / "divergence.json").read_text())
        assert report["status"] == "diverged" and report["step"] >= 1
        assert f"step {report['step']}" in capsys.readouterr().err
        assert not (out / "metrics.json").exists()

    def test_env_override(self, tmp_path, tiny_cfg, tiny_file, monkeypatch):
        monkeypatch.setenv("UDON_STEPS", "7")
        out = tmp_path / "env"
        assert cli.main(["train", "--config", str(tiny_cfg), "--out-dir", str(out),
                         "--data", str(tiny_file)]) == 0
        assert "steps = 7" in (out / "config.cfg").read_text()

    @pytest.mark.parametrize("args", [
        ["--set", "no_any_distill=true"],
        ["--set", "unknown_key=1"],
        ["--set", "steps"],
        ["--config", "/nonexistent.cfg"],
    ])
    def test_contract_errors_exit_2(self, tmp_path, tiny_cfg, tiny_file, args, capsys):
        argv = ["train", "--config", str(tiny_cfg), "--out-dir", str(tmp_path / "x"),
                "--data", str(tiny_file), *args]
        assert cli.main(argv) == 2
        assert capsys.readouterr().err.startswith("error:")

    def test_bad_dataset_exit_2(self, tmp_path, tiny_cfg):
        bad = tmp_path / "bad.bin"
        bad.write_bytes(b"garbage")
        assert cli.main(["train", "--config", str(tiny_cfg), "--out-dir", str(tmp_path / "x"),
                         "--data", str(bad)]) == 2


class TestEval:
    @pytest.fixture()
    def trained(self, tmp_path, tiny_cfg, tiny_file):
        out = tmp_path / "run"
        assert cli.main(["train", "--config", str(tiny_cfg), "--out-dir", str(out),
                         "--data", str(tiny_file)]) == 0
        return out / "checkpoint.ckpt"

    def test_joint_matches_train_report(self, trained, tiny_file):
        assert cli.main(["eval", "--checkpoint", str(trained), "--data", str(tiny_file),
                         "--split", "test", "--mode", "joint"]) == 0
        run = trained.parent
        assert (run / "eval_test_joint_student.csv").read_text().splitlines()[1:] == [
            line.replace(",20,", ",final,") for line in
            (run / "metrics.csv").read_text().splitlines()[1:]]

    def test_separate_teacher_and_repeatable(self, trained, tiny_file, tmp_path):
        for sub in ("a", "b"):
            assert cli.main(["eval", "--checkpoint", str(trained), "--data", str(tiny_file),
                             "--mode", "separate", "--embedding", "teacher", "--out-dir",
                             str(tmp_path / sub), "--no-timestamp"]) == 0
        name = "eval_test_separate_teacher"
        for ext in (".csv", ".json"):
            assert (tmp_path / "a" / (name + ext)).read_bytes() == \
                (tmp_path / "b" / (name + ext)).read_bytes()

    def test_teacher_needs_separate(self, trained, tiny_file):
        assert cli.main(["eval", "--checkpoint", str(trained), "--data", str(tiny_file),
                         "--embedding", "teacher"]) == 2

    def test_mismatched_dataset(self, trained, tmp_path, tiny_cfg):
        other = tmp_path / "other.bin"
        cli.main(["gen-data", "--config", str(tiny_cfg), "--out", str(other),
                  "--set", "feature_dim=48"])
        assert cli.main(["eval", "--checkpoint", str(trained), "--data", str(other)]) == 2

    def test_bad_checkpoint(self, tmp_path, tiny_file):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"NOTACKPT")
        assert cli.main(["eval", "--checkpoint", str(bad), "--data", str(tiny_file)]) == 2


class TestAblate:
    def test_grid(self, tmp_path, tiny_cfg, capsys):
        grid = tmp_path / "grid.cfg"
        grid.write_text("steps = 10\nseeds = 0,1\ncells = full, no_dyn_sampler_rr\n"
                        "cell.hot.temperature = 0.5\n")
        out = tmp_path / "abl"
        assert cli.main(["ablate", "--config", str(tiny_cfg), "--grid", str(grid),
                         "--out-dir", str(out)]) == 0
        lines = (out / "ablation.csv").read_text().splitlines()
        assert lines[0] == "cell,seed,domain,metric,value"
        cells = {line.split(",")[0] for line in lines[1:]}
        assert cells == {"full", "no_dyn_sampler_rr", "hot"}
        assert "steps = 10" in (out / "base_config.cfg").read_text()
        assert capsys.readouterr().out.count("seed") == 6

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergent_cell_reported(self, tmp_path, tiny_cfg):
        grid = tmp_path / "grid.cfg"
        grid.write_text("steps = 10\ncells = full\ncell.boom.lr = 1e300\n")
        out = tmp_path / "abl"
        assert cli.main(["ablate", "--config", str(tiny_cfg), "--grid", str(grid),
                         "--out-dir", str(out)]) == 3
        assert "boom" in (out / "failures.csv").read_text()
        assert "full" in (out / "ablation.csv").read_text()

    def test_unknown_cell(self, tmp_path, tiny_cfg):
        grid = tmp_path / "grid.cfg"
        grid.write_text("cells = nonsense\n")
        assert cli.main(["ablate", "--config", str(tiny_cfg), "--grid", str(grid),
                         "--out-dir", str(tmp_path / "o")]) == 2
