import csv
import json
from pathlib import Path

import pytest

from fdia_detect import __version__
from fdia_detect.errors import KirchhoffWarning
from fdia_detect.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main, sha256

TINY = {
    "generator": {"length": 400, "seed": 3},
    "model": {"n_w": 8, "enc_filters": [4, 3], "enc_kernels": [5, 3], "bottleneck": 5,
              "batch_size": 16, "epochs": 2, "seed": 1},
    "attack": {"count": 6, "seed": 2},
}


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, Path(out.out.strip()) if code == EXIT_OK else out.err


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps(TINY))
    return path


@pytest.fixture
def pipeline(tmp_path, cfg_file, capsys):
    """generate -> train -> detect on the tiny configuration."""
    out = tmp_path / "runs"
    _, gen = run(capsys, "generate", "--config", cfg_file, "--out", out)
    data = gen / "dataset.csv"
    _, tr = run(capsys, "train", "--config", cfg_file, "--out", out, "--data", data)
    _, det = run(capsys, "detect", "--config", cfg_file, "--out", out, "--data", data,
                 "--checkpoint", tr / "checkpoint.bin")
    return {"out": out, "data": data, "train": tr, "detect": det, "cfg": cfg_file}


def test_generate_length(tmp_path, capsys):
    code, run_dir = run(capsys, "generate", "--length", 100, "--out", tmp_path)
    assert code == EXIT_OK
    lines = (run_dir / "dataset.csv").read_text().splitlines()
    assert lines[0] == "t,v,i,theta,delta,p,q" and len(lines) == 101
    manifest = json.loads((run_dir / "manifest.json").read_text())
    assert manifest["config"]["generator"]["length"] == 100
    assert manifest["version"] == __version__
    assert manifest["outputs"]["dataset.csv"] == sha256(run_dir / "dataset.csv")


def test_generate_same_seed_identical(tmp_path, capsys):
    _, a = run(capsys, "generate", "--length", 200, "--seed", 4, "--out", tmp_path)
    _, b = run(capsys, "generate", "--length", 200, "--seed", 4, "--out", tmp_path)
    assert a != b
    assert sha256(a / "dataset.csv") == sha256(b / "dataset.csv")


def test_manifest_records_defaults(tmp_path, capsys):
    _, run_dir = run(capsys, "generate", "--length", 50, "--out", tmp_path)
    manifest = json.loads((run_dir / "manifest.json").read_text())
    assert manifest["config"]["model"]["patience"] == 20
    assert manifest["config"]["scoring"]["quantile"] == 0.995


class TestExitCodes:
    def test_usage_missing_flag(self, capsys):
        with pytest.raises(SystemExit) as err:
            main(["train"])
        assert err.value.code == EXIT_USAGE

    def test_usage_unknown_command(self, capsys):
        with pytest.raises(SystemExit) as err:
            main(["frobnicate"])
        assert err.value.code == EXIT_USAGE

    def test_bad_config_json(self, tmp_path, capsys):
        path = tmp_path / "c.json"
        path.write_text("{not json")
        code, err = run(capsys, "generate", "--config", path, "--out", tmp_path)
        assert code == EXIT_USAGE and "not valid JSON" in err

    def test_unknown_config_section(self, tmp_path, capsys):
        path = tmp_path / "c.json"
        path.write_text('{"gnerator": {}}')
        assert run(capsys, "generate", "--config", path, "--out", tmp_path)[0] == EXIT_USAGE

    def test_missing_data_file(self, tmp_path, capsys):
        code, err = run(capsys, "train", "--data", tmp_path / "nope.csv", "--out", tmp_path)
        assert code == EXIT_DATA and "not found" in err

    def test_malformed_csv(self, tmp_path, capsys):
        bad = tmp_path / "bad.csv"
        bad.write_text("t,v,i,theta,delta,p,q\n0,1,x,0,0,1,0\n")
        code, err = run(capsys, "inject", "--data", bad, "--out", tmp_path)
        assert code == EXIT_DATA and "row 2" in err

    def test_bad_checkpoint(self, tmp_path, capsys):
        ck = tmp_path / "ck.bin"
        ck.write_bytes(b"garbage" * 10)
        _, gen = run(capsys, "generate", "--length", 100, "--out", tmp_path)
        code, err = run(capsys, "detect", "--checkpoint", ck, "--data", gen / "dataset.csv", "--out", tmp_path)
        assert code == EXIT_DATA and "bad format" in err


def test_train_outputs(pipeline):
    tr = pipeline["train"]
    assert {"checkpoint.bin", "losses.csv", "train_report.txt", "manifest.json"} <= {p.name for p in tr.iterdir()}
    rows = list(csv.DictReader((tr / "losses.csv").open()))
    assert len(rows) == 2 and rows[0]["val_phy_p"] != ""


def test_no_physics_losses_empty(pipeline, capsys):
    _, tr = run(capsys, "train", "--config", pipeline["cfg"], "--out", pipeline["out"], "--data", pipeline["data"],
                "--no-physics")
    rows = list(csv.DictReader((tr / "losses.csv").open()))
    assert all(r["val_phy_p"] == "" and r["val_phy_q"] == "" for r in rows)
    assert "physics_enabled = False" in (tr / "train_report.txt").read_text()


def test_two_trainings_same_seed_identical(pipeline, capsys):
    _, again = run(capsys, "train", "--config", pipeline["cfg"], "--out", pipeline["out"], "--data", pipeline["data"])
    assert sha256(again / "losses.csv") == sha256(pipeline["train"] / "losses.csv")
    assert sha256(again / "checkpoint.bin") == sha256(pipeline["train"] / "checkpoint.bin")


def test_detect_outputs(pipeline):
    det = pipeline["detect"]
    text = (det / "metrics.txt").read_text()
    for key in ("acc", "prec", "rec", "f1", "threshold"):
        assert f"{key} = " in text
    rows = list(csv.DictReader((det / "scores.csv").open()))
    assert len(rows) == 400 - int(0.85 * 400)
    assert sum(int(r["label"]) for r in rows) == 6
    thr = float(text.split("threshold = ")[1].split()[0])
    assert all((float(r["score"]) > thr) == bool(int(r["verdict"])) for r in rows)


def test_inject_then_detect_with_labels(pipeline, capsys):
    out, data = pipeline["out"], pipeline["data"]
    _, inj = run(capsys, "inject", "--config", pipeline["cfg"], "--out", out, "--data", data)
    assert json.loads((inj / "campaign.json").read_text())["kind"] == "combined"
    with pytest.warns(KirchhoffWarning) as caught:
        _, det = run(capsys, "detect", "--config", pipeline["cfg"], "--out", out, "--data", inj / "attacked.csv",
                     "--labels", inj / "labels.csv", "--checkpoint", pipeline["train"] / "checkpoint.bin")
    # every attacked row breaks the power identities and is reported on ingest
    assert len(caught) == 6
    # same campaign either way, so the verdict files agree
    assert sha256(det / "scores.csv") == sha256(pipeline["detect"] / "scores.csv")


def test_evaluate(pipeline, capsys):
    _, ev = run(capsys, "evaluate", "--scores", pipeline["detect"] / "scores.csv", "--out", pipeline["out"])
    assert "f1 = " in (ev / "metrics.txt").read_text()
    code, _ = run(capsys, "evaluate", "--scores", pipeline["detect"] / "scores.csv", "--threshold", 1e9,
                  "--out", pipeline["out"])
    assert code == EXIT_OK


def test_sweep_rows(pipeline, capsys):
    _, sw = run(capsys, "sweep", "--config", pipeline["cfg"], "--out", pipeline["out"], "--data", pipeline["data"],
                "--checkpoint", pipeline["train"] / "checkpoint.bin", "--grid", 0.01, 0.05, 5)
    rows = list(csv.DictReader((sw / "sweep.csv").open()))
    assert list(rows[0]) == ["alpha", "acc", "prec", "rec", "f1"]
    alphas = [float(r["alpha"]) for r in rows]
    assert alphas == sorted(alphas) and len(alphas) == 5


@pytest.mark.parametrize("step", ["generate", "train", "detect"])
def test_replay_reproduces(pipeline, capsys, step):
    run_dir = {"generate": pipeline["data"].parent, "train": pipeline["train"], "detect": pipeline["detect"]}[step]
    code, new = run(capsys, "replay", run_dir / "manifest.json")
    assert code == EXIT_OK
    old = json.loads((run_dir / "manifest.json").read_text())["outputs"]
    assert json.loads((new / "manifest.json").read_text())["outputs"] == old


def test_replay_detects_changed_input(pipeline, capsys):
    data = pipeline["data"]
    data.write_text(data.read_text().replace("\n1,", "\n1,0", 1))
    code, err = run(capsys, "replay", pipeline["train"] / "manifest.json")
    assert code == EXIT_DATA and "changed" in err


def test_replay_mismatch_exit(pipeline, capsys):
    path = pipeline["detect"] / "manifest.json"
    manifest = json.loads(path.read_text())
    manifest["outputs"]["scores.csv"] = "0" * 64
    path.write_text(json.dumps(manifest))
    code, err = run(capsys, "replay", path)
    assert code == EXIT_NUMERIC and "scores.csv" in err
