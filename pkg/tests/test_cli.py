import csv
import json

import pytest

from shared_transfer.cli import main


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--out-dir", str(out), "--N", "30", "--p", "4", "--seed", "7"]) == 0
    return out


def read_json_model(path):
    d = json.loads(path.read_text())
    d.pop("created")
    return d


def test_synth_is_deterministic(synth_dir, tmp_path):
    assert main(["synth", "--out-dir", str(tmp_path), "--N", "30", "--p", "4", "--seed", "7"]) == 0
    for name in ("train.csv", "test.csv", "truth.json"):
        assert (tmp_path / name).read_bytes() == (synth_dir / name).read_bytes()


def test_fit_is_deterministic_for_any_thread_count(synth_dir, tmp_path, monkeypatch, capsys):
    train = str(synth_dir / "train.csv")
    a, b, c = tmp_path / "a.json", tmp_path / "b.json", tmp_path / "c.json"
    assert main(["fit", train, "-o", str(a), "--max-iterations", "4", "--seed", "3"]) == 0
    history = capsys.readouterr().out.strip().splitlines()
    assert len(history) == 4 and history[0].startswith("1\t")
    assert main(["fit", train, "-o", str(b), "--max-iterations", "4", "--seed", "3",
                 "--threads", "3"]) == 0
    monkeypatch.setenv("SHARED_TRANSFER_THREADS", "0")
    assert main(["fit", train, "-o", str(c), "--max-iterations", "4", "--seed", "3"]) == 0
    assert read_json_model(a) == read_json_model(b) == read_json_model(c)


def test_config_file_and_flags(synth_dir, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"L": 2, "max_iterations": 7, "nu": 2.0}))
    out = tmp_path / "m.json"
    assert main(["fit", str(synth_dir / "train.csv"), "-o", str(out), "--config", str(cfg),
                 "--max-iterations", "2"]) == 0
    config = json.loads(out.read_text())["config"]
    assert (config["L"], config["max_iterations"], config["nu"]) == (2, 2, 2.0)


def test_usage_errors(synth_dir, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"bogus": 1}))
    train = str(synth_dir / "train.csv")
    assert main(["fit", train, "-o", str(tmp_path / "m.json"), "--config", str(cfg)]) == 2
    assert main(["fit", train, "-o", str(tmp_path / "m.json"), "--nu", "-1"]) == 2
    assert main(["fit", train]) == 2
    assert main(["no-such-command"]) == 2


def test_data_errors(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("task_id,row,x,y\nt,0,1,nan\n")
    assert main(["fit", str(bad), "-o", str(tmp_path / "m.json")]) == 1
    assert main(["fit", str(tmp_path / "missing.csv"), "-o", str(tmp_path / "m.json")]) == 1


@pytest.fixture(scope="module")
def model_path(synth_dir):
    path = synth_dir / "model.json"
    assert main(["fit", str(synth_dir / "train.csv"), "-o", str(path),
                 "--max-iterations", "10"]) == 0
    return path


def test_eval_beats_iam(synth_dir, model_path, capsys):
    capsys.readouterr()
    assert main(["eval", str(model_path), str(synth_dir / "test.csv"), "--train",
                 str(synth_dir / "train.csv"), "--baselines", "iam,kam,lr"]) == 0
    rows = {r["method"]: r for r in csv.DictReader(capsys.readouterr().out.splitlines())}
    assert set(rows) == {"proposed", "iam", "kam", "lr"}
    assert float(rows["proposed"]["test_rmse"]) < float(rows["iam"]["test_rmse"])


def test_eval_baselines_need_train(synth_dir, model_path):
    assert main(["eval", str(model_path), str(synth_dir / "test.csv"),
                 "--baselines", "iam"]) == 2


def test_predict_and_export(synth_dir, model_path, tmp_path):
    pred = tmp_path / "pred.csv"
    assert main(["predict", str(model_path), str(synth_dir / "test.csv"), "-o", str(pred)]) == 0
    rows = list(csv.reader(pred.open()))
    assert rows[0] == ["task_id", "row", "prediction"] and len(rows) == 1 + 30 * 400
    tf = tmp_path / "tf.csv"
    assert main(["export-tf", str(model_path), "--grid-size", "11", "-o", str(tf)]) == 0
    rows = list(csv.reader(tf.open()))
    assert rows[0] == ["covariate", "function", "z", "value"]
    # 4 covariates x 3 functions x 11 points
    assert len(rows) == 1 + 4 * 3 * 11


def test_coherence_report(synth_dir, model_path, capsys):
    capsys.readouterr()
    assert main(["coherence", str(model_path), str(synth_dir / "train.csv")]) == 0
    report = json.loads(capsys.readouterr().out)
    assert set(report) == {"mu_global", "mu_intra", "mu_inter", "omp_max_p", "bcomp_holds"}
    assert report["mu_global"] == max(report["mu_intra"], report["mu_inter"])
    expected = report["mu_intra"] + 2 * 3 * report["mu_inter"] < 1
    assert report["bcomp_holds"] == expected


def test_bench(capsys):
    capsys.readouterr()
    assert main(["bench", "--N", "10", "--L", "2", "--n", "30", "--p", "2", "--T", "6",
                 "--repeats", "1"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert {"N_ratio", "L_ratio", "base_seconds"} <= set(out)
