import csv
import json
import subprocess
import sys

import pytest
from test_data import same_tree

from biped import tensor as T
from biped.cli import main

WORLD = """\
n_crossing = 3
n_noncrossing = 5
n_background = 2
raster_downsample = 8
val_fraction = 0.3
test_fraction = 0.2
"""


@pytest.fixture(scope="module")
def world_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "world.cfg"
    path.write_text(WORLD)
    return path


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory, world_file):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert main(["synth", "--config", str(world_file), "--out", str(out), "--seed", "7"]) == 0
    return out


@pytest.fixture(scope="module")
def trained(tmp_path_factory, data_dir):
    out = tmp_path_factory.mktemp("run") / "train"
    code = main(["train", "--data", str(data_dir), "--out", str(out), "--preset", "tiny",
                 "--epochs", "2", "--batch-size", "4", "--lr", "1e-3", "--seed", "3"])
    assert code == 0
    return out


def tracks(path):
    lines = (path / "manifest.jsonl").read_text().splitlines()[1:]
    ids = {json.loads(line)["track"] for line in lines}
    return sum(t.startswith("c") for t in ids), sum(t.startswith("n") for t in ids)


class TestSynth:
    def test_tree_and_summary(self, data_dir, world_file, tmp_path, capsys):
        assert tracks(data_dir) == (3, 5)
        assert (data_dir / "world.cfg").exists()
        assert main(["synth", "--config", str(world_file), "--out", str(tmp_path / "b"), "--seed", "7"]) == 0
        summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert summary["crossing_tracks"] == 3 and "crossing_ratio" in summary
        assert same_tree(data_dir, tmp_path / "b")

    def test_refuses_non_empty_out(self, data_dir, world_file, capsys):
        assert main(["synth", "--config", str(world_file), "--out", str(data_dir), "--seed", "7"]) == 2
        assert "--force" in capsys.readouterr().err

    def test_force_only_replaces_owned_files(self, world_file, tmp_path):
        out = tmp_path / "d"
        out.mkdir()
        (out / "notes.txt").write_text("keep me")
        assert main(["synth", "--config", str(world_file), "--out", str(out), "--force"]) == 0
        assert (out / "notes.txt").read_text() == "keep me"

    def test_missing_config(self, tmp_path, capsys):
        missing = tmp_path / "nope.cfg"
        assert main(["synth", "--config", str(missing), "--out", str(tmp_path / "o")]) == 2
        assert str(missing) in capsys.readouterr().err

    def test_invalid_config_value(self, tmp_path):
        bad = tmp_path / "bad.cfg"
        bad.write_text("focal = -1\n")
        assert main(["synth", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2


class TestTrainEval:
    def test_outputs(self, trained):
        for name in ("model.cfg", "params.bin", "train_log.csv", "metrics.csv", "metrics.txt"):
            assert (trained / name).exists()
        with open(trained / "train_log.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 2 and rows[0]["val_ADE"]
        with open(trained / "metrics.csv") as fh:
            assert next(csv.reader(fh)) == ["run", "ADE", "FDE", "ARB", "FRB", "Acc", "AUC", "F1", "Prec"]

    def test_seed_reproduces_metrics(self, trained, data_dir, tmp_path):
        out = tmp_path / "again"
        assert main(["train", "--data", str(data_dir), "--out", str(out), "--preset", "tiny",
                     "--epochs", "2", "--batch-size", "4", "--lr", "1e-3", "--seed", "3"]) == 0
        for name in ("metrics.csv", "train_log.csv", "params.bin"):
            assert (out / name).read_bytes() == (trained / name).read_bytes()

    def test_eval_matches_train_report(self, trained, data_dir, tmp_path):
        out = tmp_path / "ev"
        assert main(["eval", "--data", str(data_dir), "--params", str(trained / "params.bin"),
                     "--out", str(out), "--errors"]) == 0
        train_rows = (trained / "metrics.csv").read_text().splitlines()
        eval_rows = (out / "metrics.csv").read_text().splitlines()
        assert train_rows[1].split(",")[1:] == eval_rows[1].split(",")[1:]
        assert (out / "errors.csv").read_text().startswith("sample,ADE,FDE,ARB,FRB,score,label")

    def test_eval_several_params_reports_mean_std(self, trained, data_dir, tmp_path):
        p = str(trained / "params.bin")
        assert main(["eval", "--data", str(data_dir), "--params", p, p, "--out", str(tmp_path)]) == 0
        names = [line.split(",")[0] for line in (tmp_path / "metrics.csv").read_text().splitlines()]
        assert names[-2:] == ["mean", "std"]

    def test_config_conflicting_with_dataset(self, data_dir, tmp_path, capsys):
        cfg = tmp_path / "m.cfg"
        cfg.write_text("obs_len = 9\n")
        assert main(["train", "--data", str(data_dir), "--out", str(tmp_path / "o"),
                     "--model-config", str(cfg), "--epochs", "1"]) == 2
        assert "obs_len" in capsys.readouterr().err

    def test_missing_params(self, data_dir, tmp_path):
        assert main(["eval", "--data", str(data_dir), "--params", str(tmp_path / "none.bin")]) == 2

    def test_corrupt_params(self, trained, data_dir, tmp_path):
        bad = tmp_path / "params.bin"
        bad.write_bytes((trained / "params.bin").read_bytes()[:-10])
        (tmp_path / "model.cfg").write_text((trained / "model.cfg").read_text())
        assert main(["eval", "--data", str(data_dir), "--params", str(bad)]) == 1

    def test_divergence_exit_code(self, data_dir, tmp_path, capsys):
        assert main(["train", "--data", str(data_dir), "--out", str(tmp_path / "o"), "--preset", "tiny",
                     "--epochs", "1", "--lr", "nan"]) == 1
        assert "training aborted" in capsys.readouterr().err


class TestOtherCommands:
    def test_inspect(self, trained, data_dir, capsys):
        assert main(["inspect", "--data", str(data_dir), "--params", str(trained / "params.bin"),
                     "--model-config", str(trained / "model.cfg")]) == 0
        out = capsys.readouterr().out
        assert '"map_shape": [27, 48]' in out and "parameters = " in out and "total " in out
        assert main(["inspect"]) == 2

    def test_gradcheck_ops(self, capsys):
        assert main(["gradcheck", "--scope", "ops"]) == 0
        assert "30/30 passed" in capsys.readouterr().out

    def test_gradcheck_detects_corrupted_rule(self, monkeypatch, capsys):
        def bad_tanh(a):
            return T._unary(a, T.np.tanh, lambda x, y: 1.0 - y, "tanh")

        monkeypatch.setattr(T, "tanh", bad_tanh)
        assert main(["gradcheck", "--scope", "ops"]) == 1
        assert "FAIL tanh" in capsys.readouterr().out

    def test_ablate_toggles(self, data_dir, tmp_path):
        out = tmp_path / "abl"
        assert main(["ablate", "--data", str(data_dir), "--preset", "tiny", "--toggle", "use_iau=true,false",
                     "--grid", "grid_cell=120,none", "--epochs", "1", "--out", str(out)]) == 0
        lines = (out / "ablation.csv").read_text().splitlines()
        assert len(lines) == 5
        names = [line.split(",")[0] for line in lines[1:]]
        assert "use_iau=false;grid_cell=none" in names
        params = {line.split(",")[0]: int(line.split(",")[2]) for line in lines[1:]}
        assert len(set(params.values())) == 4

    def test_ablate_bad_toggle(self, data_dir, capsys):
        assert main(["ablate", "--data", str(data_dir), "--toggle", "use_magic=true"]) == 2
        assert "use_mie" in capsys.readouterr().err

    def test_bad_log_level(self, monkeypatch, capsys):
        monkeypatch.setenv("BIPED_LOG", "loud")
        assert main(["gradcheck", "--scope", "ops"]) == 2

    def test_usage_errors_exit_2(self):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 2

    def test_module_entry_point(self):
        proc = subprocess.run([sys.executable, "-m", "biped", "inspect"], capture_output=True, text=True)
        assert proc.returncode == 2 and "inspect needs" in proc.stderr
