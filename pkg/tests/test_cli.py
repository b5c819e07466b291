import json

import pytest

from chmfl import cli
from chmfl.evaluation import CLASSIFICATION_KEYS, DEFAULT_WEIGHTS
from chmfl.imaging import Modality, load_manifest, read_volume

SYNTH = ["--n", "6", "--extents", "24,24,24", "--tumor-radius-mm", "4,6", "--seed", "7"]
TINY = ["--input-extents", "16,16,16", "--base-channels", "2", "--levels", "3", "--fc-hidden", "8,4",
        "--box-mm", "16,16,16", "--max-epochs", "1", "--learning-rate", "1e-3"]


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert cli.main(["synth", *SYNTH, "--out", str(d)]) == 0
    return d


@pytest.fixture(scope="module")
def trained(data_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert cli.main(["train", "--data", str(data_dir), *TINY, "--out", str(out)]) == 0
    return out


class TestSynth:
    def test_writes_records(self, data_dir):
        recs = load_manifest(data_dir / "manifest.csv")
        assert len(recs) == 6 and sum(r.dm_label for r in recs) == 3

    def test_rerun_identical(self, data_dir, tmp_path, capsys):
        code, out, _ = run(capsys, "synth", *SYNTH, "--out", tmp_path)
        assert code == 0 and out.strip() == str(tmp_path / "manifest.csv")
        for f in data_dir.iterdir():
            assert (tmp_path / f.name).read_bytes() == f.read_bytes()

    def test_zero_patients_warns(self, tmp_path, capsys):
        with pytest.warns(UserWarning, match="empty"):
            code, _, _ = run(capsys, "synth", "--n", "0", "--out", tmp_path)
        assert code == 0 and load_manifest(tmp_path / "manifest.csv") == []

    def test_data_dir_from_environment(self, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv(cli.DATA_DIR_ENV, str(tmp_path))
        code, _, _ = run(capsys, "synth", *SYNTH)
        assert code == 0 and (tmp_path / "manifest.csv").exists()


class TestConfig:
    def test_unknown_key_is_usage_error(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"bogus": 1}))
        code, _, err = run(capsys, "train", "--config", cfg)
        assert code == cli.EXIT_USAGE and "bogus" in err

    def test_unknown_flag_is_usage_error(self, capsys):
        with pytest.raises(SystemExit) as exc:
            cli.main(["train", "--nope", "1"])
        assert exc.value.code == cli.EXIT_USAGE

    def test_bad_value(self, capsys):
        code, _, err = run(capsys, "train", "--w", "heavy")
        assert code == cli.EXIT_USAGE and "w" in err

    def test_precedence(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"learning_rate": 0.01, "max_epochs": 3}))
        resolved = cli.resolve_config("train", str(cfg), {"max_epochs": "4"}, "desk")
        assert resolved["learning_rate"] == 0.01 and resolved["max_epochs"] == 4
        assert resolved["base_channels"] == 4

    def test_paper_defaults(self):
        resolved = cli.resolve_config("train", None, {}, None)
        assert resolved["w"] == 0.5 and resolved["learning_rate"] == 1e-4 and resolved["batch_size"] == 1
        assert resolved["box_mm"] == (112.0, 112.0, 144.0)

    def test_k_defaults_to_six(self):
        assert cli.resolve_config("crossval", None, {}, None)["k"] == 6

    def test_sweep_default_grid(self):
        assert cli.resolve_config("sweep", None, {}, None)["w_values"] == (0.0, 0.25, 0.5, 0.75, 1.0)
        assert DEFAULT_WEIGHTS == (0.0, 0.25, 0.5, 0.75, 1.0)


class TestTrain:
    def test_writes_outputs(self, trained):
        assert {p.name for p in trained.iterdir()} >= {"checkpoint.chk", "history.csv", "config.json"}

    def test_weight_echoed(self, data_dir, tmp_path, capsys):
        code, _, err = run(capsys, "train", "--data", data_dir, *TINY, "--w", "0.5", "--out", tmp_path)
        assert code == 0
        echoed = json.loads(err.split("resolved config: ", 1)[1].splitlines()[0])
        assert echoed["w"] == 0.5

    def test_missing_manifest(self, tmp_path, capsys):
        code, _, err = run(capsys, "train", "--data", tmp_path / "absent", *TINY, "--out", tmp_path / "o")
        assert code == cli.EXIT_RUNTIME and err
        assert not (tmp_path / "o" / "checkpoint.chk").exists()

    def test_no_data_given(self, tmp_path, monkeypatch, capsys):
        monkeypatch.delenv(cli.DATA_DIR_ENV, raising=False)
        code, _, _ = run(capsys, "train", *TINY, "--out", tmp_path)
        assert code == cli.EXIT_USAGE

    def test_extent_mismatch(self, data_dir, tmp_path, capsys):
        code, _, err = run(capsys, "train", "--data", data_dir, *TINY, "--box-mm", "20,20,20", "--out", tmp_path)
        assert code == cli.EXIT_USAGE and "box_mm" in err


class TestPredict:
    def test_probability_and_mask(self, data_dir, trained, tmp_path, capsys):
        rec = "P000"
        args = ["predict", "--checkpoint", trained / "checkpoint.chk", "--pet", data_dir / f"{rec}_pet.chvl",
                "--ct", data_dir / f"{rec}_ct.chvl", "--mask", data_dir / f"{rec}_mask.chvl",
                "--box-mm", "16,16,16"]
        code, out, _ = run(capsys, *args, "--out", tmp_path / "a.chvl")
        assert code == 0
        prob = float(out.strip())
        assert 0.0 <= prob <= 1.0
        seg = read_volume(tmp_path / "a.chvl")
        assert seg.modality is Modality.MASK
        assert seg.extents == read_volume(data_dir / f"{rec}_pet.chvl").extents
        code, out2, _ = run(capsys, *args, "--out", tmp_path / "b.chvl")
        assert out2 == out
        assert (tmp_path / "a.chvl").read_bytes() == (tmp_path / "b.chvl").read_bytes()

    def test_without_mask(self, data_dir, trained, tmp_path, capsys):
        code, out, _ = run(capsys, "predict", "--checkpoint", trained / "checkpoint.chk",
                           "--pet", data_dir / "P001_pet.chvl", "--ct", data_dir / "P001_ct.chvl",
                           "--box-mm", "16,16,16", "--out", tmp_path / "m.chvl")
        assert code == 0 and 0.0 <= float(out) <= 1.0

    def test_box_mismatch(self, data_dir, trained, tmp_path, capsys):
        code, _, _ = run(capsys, "predict", "--checkpoint", trained / "checkpoint.chk",
                         "--pet", data_dir / "P001_pet.chvl", "--ct", data_dir / "P001_ct.chvl",
                         "--out", tmp_path / "m.chvl")
        assert code == cli.EXIT_USAGE

    def test_missing_checkpoint_argument(self, capsys):
        code, _, _ = run(capsys, "predict")
        assert code == cli.EXIT_USAGE


class TestReports:
    def test_crossval_report(self, data_dir, tmp_path, capsys):
        code, out, _ = run(capsys, "crossval", "--data", data_dir, *TINY, "--k", "3", "--out", tmp_path)
        assert code == 0
        report = (tmp_path / "report.txt").read_text()
        for key in CLASSIFICATION_KEYS + ("auc",):
            assert key.upper() in report.upper()
        metrics = json.loads((tmp_path / "metrics.json").read_text())
        assert len(metrics["folds"]) == 3
        assert (tmp_path / "roc_pooled.txt").exists() and (tmp_path / "roc_fold0.txt").exists()

    def test_sweep_report(self, data_dir, tmp_path, capsys):
        code, _, _ = run(capsys, "sweep", "--data", data_dir, *TINY, "--k", "3", "--w-values", "0,1",
                         "--out", tmp_path)
        assert code == 0
        rows = json.loads((tmp_path / "sweep.json").read_text())["rows"]
        assert [r["w"] for r in rows] == [0.0, 1.0]
