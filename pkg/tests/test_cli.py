import json

import pytest

from wavenilm.cli import main, sweep_grid
from wavenilm.models import TrainedModel

TINY = ["--layers", "3", "--iterations", "6", "--model.residual_channels=4", "--model.skip_channels=4",
        "--train.eval_every=3", "--train.batch_size=16"]


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert main(["synth", "--synth.n_samples=4000", "--synth.seed=3", "--out", str(d)]) == 0
    return d


@pytest.fixture(scope="module")
def model_dir(data, tmp_path_factory):
    out = tmp_path_factory.mktemp("model")
    assert main(["train", f"--data.train={data / 'train.csv'}", "--out", str(out)] + TINY) == 0
    return out


def test_synth_outputs(data):
    assert (data / "train.csv").read_text().startswith("timestamp,aggregate,kettle,washing_machine\n")
    assert len((data / "test.csv").read_text().splitlines()) == 801
    manifest = json.loads((data / "manifest.json").read_text())
    assert manifest["command"] == "synth" and manifest["seed"] == 3


def test_synth_replay_byte_identical(data, tmp_path):
    assert main(["replay", str(data / "manifest.json"), f"--output.dir={tmp_path}"]) == 0
    for name in ("train.csv", "test.csv"):
        assert (tmp_path / name).read_bytes() == (data / name).read_bytes()


def test_train_writes_manifest_model_log(model_dir):
    m = json.loads((model_dir / "manifest.json").read_text())
    assert m["config"]["model"]["receptive_field"] == "15"
    assert m["config"]["model"]["layers"] == "3"
    assert len(next(iter(m["inputs"].values()))) == 64
    assert set(m["outputs"]) >= {"model", "log"}
    assert (model_dir / "train.log").read_text().startswith("# wavenilm-train-log v1")
    assert TrainedModel.load(model_dir / "model.wnm").config.receptive_field == 15


def test_train_twice_identical(data, model_dir, tmp_path):
    assert main(["train", f"--data.train={data / 'train.csv'}", "--out", str(tmp_path)] + TINY) == 0
    assert (tmp_path / "model.wnm").read_bytes() == (model_dir / "model.wnm").read_bytes()


def test_train_replay_identical(model_dir, tmp_path):
    assert main(["replay", str(model_dir / "manifest.json"), f"--output.dir={tmp_path}"]) == 0
    assert (tmp_path / "model.wnm").read_bytes() == (model_dir / "model.wnm").read_bytes()


def test_replay_detects_changed_input(data, tmp_path, capsys):
    src = tmp_path / "train.csv"
    src.write_bytes((data / "train.csv").read_bytes())
    out = tmp_path / "m"
    assert main(["train", f"--data.train={src}", "--out", str(out)] + TINY) == 0
    with open(src, "a") as fh:
        fh.write("9999999999,1,0,0\n")
    assert main(["replay", str(out / "manifest.json")]) == 2
    assert "changed" in capsys.readouterr().err


def test_missing_dataset_exit_2(tmp_path, capsys):
    missing = tmp_path / "nope.csv"
    assert main(["train", f"--data.train={missing}", "--out", str(tmp_path)]) == 2
    assert str(missing) in capsys.readouterr().err


def test_layers_six_implies_127(data, tmp_path):
    code = main(["train", f"--data.train={data / 'train.csv'}", "--family", "wavenet", "--layers", "6",
                 "--iterations", "0", "--model.residual_channels=2", "--model.skip_channels=2",
                 "--out", str(tmp_path)])
    assert code == 0
    m = json.loads((tmp_path / "manifest.json").read_text())
    assert m["config"]["model"]["receptive_field"] == "127"


def test_inconsistent_pair_exit(data, tmp_path, capsys):
    code = main(["train", f"--data.train={data / 'train.csv'}", "--layers", "3", "--receptive-field", "31",
                 "--out", str(tmp_path)])
    assert code == 2
    assert "L = (2^s - 1)*(m - 1) + 1" in capsys.readouterr().err


def test_flag_overrides_file(data, tmp_path):
    cfg = tmp_path / "train.ini"
    cfg.write_text(f"[data]\ntrain = {data / 'train.csv'}\n[model]\nreceptive_field = 31\n"
                   "residual_channels = 4\nskip_channels = 4\n[train]\nmax_iterations = 2\n")
    assert main(["train", "--config", str(cfg), "--layers", "3", "--out", str(tmp_path)]) == 0
    m = json.loads((tmp_path / "manifest.json").read_text())
    assert m["config"]["model"]["receptive_field"] == "15"
    assert m["config"]["train"]["max_iterations"] == "2"


def test_config_dir_env(data, tmp_path, monkeypatch):
    (tmp_path / "train.ini").write_text(f"[data]\ntrain = {data / 'train.csv'}\n[train]\nmax_iterations = 1\n"
                                        "[model]\nlayers = 3\nresidual_channels = 2\nskip_channels = 2\n")
    monkeypatch.setenv("WAVENILM_CONFIG_DIR", str(tmp_path))
    out = tmp_path / "o"
    assert main(["train", "--out", str(out)]) == 0
    assert json.loads((out / "manifest.json").read_text())["config"]["train"]["max_iterations"] == "1"


def test_unknown_key_exit_2(tmp_path):
    assert main(["train", "--model.nope=1", "--out", str(tmp_path)]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_loss_exit_1_with_snapshot(data, tmp_path, capsys):
    code = main(["train", f"--data.train={data / 'train.csv'}", "--train.lr=1e300", "--out", str(tmp_path)]
                + TINY)
    assert code == 1
    assert "diverged.snap" in capsys.readouterr().err
    assert (tmp_path / "diverged.snap").read_bytes()[:8] == b"WNILMSNP"


def test_predict(data, model_dir, tmp_path):
    assert main(["predict", str(model_dir / "model.wnm"), str(data / "test.csv"), "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "predictions.csv").read_text().splitlines()
    assert lines[0] == "timestamp,value"
    assert len(lines) - 1 == ((800 - 24) // 10 + 1) * 10


def test_detect_regression_and_report(data, model_dir, tmp_path):
    assert main(["detect", str(model_dir / "model.wnm"), str(data / "test.csv"), "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "states.csv").read_text().splitlines()
    assert len(lines) - 1 == ((800 - 24) // 10 + 1) * 10
    assert {l.split(",")[1] for l in lines[1:]} <= {"0", "1"}
    m = json.loads((tmp_path / "manifest.json").read_text())
    assert m["config"]["detect"]["cutoff"] == "0.3"
    assert (tmp_path / "detect_report.txt").read_text().startswith("# wavenilm-report v1")


def test_detect_framework_mismatch(data, model_dir, tmp_path, capsys):
    code = main(["detect", str(model_dir / "model.wnm"), str(data / "test.csv"), "--framework",
                 "classification", "--out", str(tmp_path)])
    assert code != 0
    assert "regression head" in capsys.readouterr().err


def test_detect_classifier(data, tmp_path):
    mdir = tmp_path / "c"
    assert main(["train", f"--data.train={data / 'train.csv'}", "--framework", "classification",
                 "--out", str(mdir)] + TINY) == 0
    out = tmp_path / "d"
    assert main(["detect", str(mdir / "model.wnm"), str(data / "test.csv"), "--framework", "classification",
                 "--out", str(out)]) == 0
    assert json.loads((out / "manifest.json").read_text())["config"]["detect"]["cutoff"] == "0.3"


def test_evaluate_report(data, model_dir, tmp_path):
    assert main(["evaluate", str(model_dir / "model.wnm"), str(data / "test.csv"),
                 "--evaluate.notes=synthetic stand-in", "--out", str(tmp_path)]) == 0
    text = (tmp_path / "report.txt").read_text().splitlines()
    assert text[1] == "# synthetic stand-in"
    assert {l.split()[1] for l in text[2:]} == {"model=always-mean", "model=always-zero",
                                                  "model=wavenet-regression"}


def test_ingest(data, tmp_path):
    raw = tmp_path / "raw.csv"
    raw.write_text("timestamp,aggregate,kettle\n0,100,0\n5,120,0\n10,bad,0\n31,90,0\n")
    assert main(["ingest", str(raw), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "clean.csv").read_text() == "timestamp,aggregate,kettle\n0,100,0\n10,120,0\n20,120,0\n30,120,0\n"


def test_ingest_missing_file(tmp_path):
    assert main(["ingest", str(tmp_path / "none.csv"), "--out", str(tmp_path)]) == 2


class TestSweep:
    def test_grids(self):
        assert len(sweep_grid(["wavenet"], target_fields=())) == 8
        assert len(sweep_grid(["cnn"], target_fields=())) == 6
        assert len(sweep_grid(["rnn"], target_fields=())) == 6
        cells = sweep_grid(["wavenet"], receptive_fields=[15], target_fields=[1, 10, 100, 1000])
        assert [(L, r) for _, L, r in cells if L == 127] == [(127, 1), (127, 10), (127, 100), (127, 1000)]

    def test_cnn_large_fields_excluded(self):
        cells = sweep_grid(["cnn"], receptive_fields=[15, 1023, 2047], target_fields=())
        assert cells == [("cnn", 15, 10)]

    def test_run_resume_and_failures(self, data, tmp_path):
        args = ["sweep", f"--data.train={data / 'train.csv'}", f"--data.test={data / 'test.csv'}",
                "--sweep.families=wavenet", "--sweep.receptive_fields=15 31", "--sweep.target_fields=1 5000",
                "--sweep.fixed_receptive_field=15", "--sweep.max_iterations=2",
                "--model.residual_channels=2", "--model.skip_channels=2", "--out", str(tmp_path)]
        with pytest.warns(UserWarning, match="shorter than one window"):
            code = main(args)
        assert code == 1  # r=5000 cannot fit the training series
        state = json.loads((tmp_path / "sweep_state.json").read_text())["cells"]
        assert state["wavenet:15:5000"]["status"] == "failed"
        assert state["wavenet:15:10"]["status"] == "ok"
        assert (tmp_path / "curve_mae_vs_L.csv").read_text().splitlines()[0] == "family,receptive_field,mae,status"
        mae_r = (tmp_path / "curve_mae_vs_r.csv").read_text().splitlines()
        assert [l.split(",")[1] for l in mae_r[1:]] == ["1", "10", "5000"]
        before = state["wavenet:15:10"]
        with pytest.warns(UserWarning):
            assert main(args) == 1
        after = json.loads((tmp_path / "sweep_state.json").read_text())["cells"]["wavenet:15:10"]
        assert after == before  # completed cells are not re-run
