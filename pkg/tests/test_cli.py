import json

import numpy as np
import pytest

from hvts.anomaly import detect_outliers
from hvts.cli import main
from hvts.dataio import read_segments
from hvts.evalmetrics import ErrorMatrix


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    err = capsys.readouterr().err
    return code, (json.loads(err) if err.strip() else None)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data.hvsg"
    assert main(["synth", "--out", str(data), "--n", "24", "--channels", "2", "--samples", "64", "--fs", "64",
                 "--labels", "2", "--seed", "3"]) == 0
    out = root / "run"
    assert main(["train", "--data", str(data), "--out", str(out), "--epochs", "2", "--runs", "2",
                 "--batch", "6", "--checkpoint-every", "1"]) == 0
    return data, out


def test_synth_is_deterministic(tmp_path, capsys):
    a, b = tmp_path / "a.hvsg", tmp_path / "b.hvsg"
    assert run(capsys, "synth", "--out", a, "--n", "5", "--seed", "9")[0] == 0
    assert run(capsys, "synth", "--out", b, "--n", "5", "--seed", "9")[0] == 0
    assert a.read_bytes() == b.read_bytes()
    assert len(read_segments(a)) == 5


def test_train_layout(trained):
    _, out = trained
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "train" and set(manifest["inputs"]) == {"data.hvsg"}
    assert [r["checkpoint"] for r in manifest["runs"]] == ["run00_epoch0002.hvts", "run01_epoch0002.hvts"]
    names = sorted(p.name for p in (out / "checkpoints").iterdir())
    assert names == ["run00_epoch0001.hvts", "run00_epoch0002.hvts", "run01_epoch0001.hvts", "run01_epoch0002.hvts"]
    history = json.loads((out / "metrics" / "history_run00.json").read_text())
    assert len(history["epochs"]) == 2
    assert (out / "plots" / "training_curve.svg").read_text().startswith("<svg")
    assert "wall_seconds" in json.loads((out / "timings.json").read_text())


def test_score_detect_and_reconstruct(trained, tmp_path, capsys):
    data, out = trained
    scored = tmp_path / "score"
    assert run(capsys, "score", "--data", data, "--run-dir", out, "--out", scored)[0] == 0
    summary = json.loads((scored / "metrics" / "summary.json").read_text())
    mean = ErrorMatrix.from_tsv((scored / "metrics" / "E_mean.tsv").read_text())
    assert mean.shape == (24, 2) and summary["mean"] == pytest.approx(mean.values.mean())

    report = tmp_path / "outliers.json"
    assert run(capsys, "detect", "--matrix", scored / "metrics" / "E_mean.tsv", "--out", report, "--k", "3")[0] == 0
    assert json.loads(report.read_text()) == json.loads(detect_outliers(mean, 3).to_json())

    for level in ("z1", "z2", "z3"):
        rec = tmp_path / f"rec_{level}.hvsg"
        ckpt = out / "checkpoints" / "run00_epoch0002.hvts"
        assert run(capsys, "reconstruct", "--checkpoint", ckpt, "--data", data, "--out", rec, "--level", level)[0] == 0
        segs = read_segments(rec)
        assert len(segs) == 24 and segs[0].meta["level"] == level

    spectra = tmp_path / "spectra"
    code, _ = run(capsys, "spectra", "--data", data, "--reconstructions", tmp_path / "rec_z3.hvsg",
                  "--out", spectra, "--window", "32", "--overlap", "16")
    assert code == 0 and (spectra / "plots" / "psd.svg").exists()


def test_score_at_intermediate_epoch(trained, tmp_path, capsys):
    data, out = trained
    code, _ = run(capsys, "score", "--data", data, "--run-dir", out, "--out", tmp_path / "s", "--epoch", "1",
                  "--subset", "test")
    assert code == 0
    assert ErrorMatrix.from_tsv((tmp_path / "s" / "metrics" / "E_mean.tsv").read_text()).shape == (12, 2)


def test_error_exit_codes(trained, tmp_path, capsys):
    data, out = trained
    code, err = run(capsys, "score", "--data", tmp_path / "nope.hvsg", "--checkpoint", "x", "--out", tmp_path / "o")
    assert code == 3 and err["error"] == "missing-input"

    code, err = run(capsys, "train", "--data", data, "--out", out)
    assert code == 6 and err["error"] == "output-exists"

    code, err = run(capsys, "train", "--data", data)
    assert code == 2 and err["error"] == "usage"

    broken = tmp_path / "broken.hvsg"
    broken.write_bytes(data.read_bytes()[:50])
    code, err = run(capsys, "score", "--data", broken, "--checkpoint", "x", "--out", tmp_path / "o2")
    assert code == 4 and "byte" in err["message"]

    other = tmp_path / "other.hvsg"
    run(capsys, "synth", "--out", other, "--n", "4", "--channels", "3", "--samples", "64", "--fs", "64")
    code, err = run(capsys, "reconstruct", "--checkpoint", out / "checkpoints" / "run00_epoch0002.hvts",
                    "--data", other, "--out", tmp_path / "r.hvsg")
    assert code == 5 and err["error"] == "shape-mismatch"


def test_thread_cap_sets_library_variables(monkeypatch, tmp_path, capsys):
    import os

    for var in ("OMP_NUM_THREADS", "NUMBA_NUM_THREADS"):
        monkeypatch.delenv(var, raising=False)
    monkeypatch.setenv("HVTS_THREADS", "1")
    assert run(capsys, "synth", "--out", tmp_path / "t.hvsg", "--n", "2")[0] == 0
    assert os.environ["OMP_NUM_THREADS"] == "1" and os.environ["NUMBA_NUM_THREADS"] == "1"


def test_saturation_flag_injects_rails(tmp_path, capsys):
    path = tmp_path / "sat.hvsg"
    assert run(capsys, "synth", "--out", path, "--n", "40", "--saturation-rate", "0.05")[0] == 0
    segs = read_segments(path)
    hit = [s for s in segs if "artifacts" in s.meta]
    assert len(hit) == 2 and all(np.isclose(np.abs(s.samples).max(), 200.0) for s in hit)
