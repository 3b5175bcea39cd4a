import csv
import io
import json
import shutil
import subprocess
import sys

import numpy as np
import pytest

from monokp.cli import main


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def rows(text):
    return list(csv.DictReader(io.StringIO(text)))


@pytest.fixture
def fixture_dir(tmp_path, capsys):
    root = tmp_path / "fx"
    assert run(capsys, "fixture", "--out", str(root), "--scenes", "2", "--objects", "3", "--seed", "4")[0] == 0
    return root


def test_fixture_layout(fixture_dir):
    for sub, suffix in (("calib", ".txt"), ("label_2", ".txt"), ("maps", ".hmap"), ("keypoints", ".json")):
        assert sorted(p.name for p in (fixture_dir / sub).iterdir()) == [f"00000{i}{suffix}" for i in range(2)]


def test_solve_fixture_residuals(fixture_dir, capsys):
    code, out, _ = run(capsys, "solve", "--calib", str(fixture_dir / "calib/000000.txt"), "--keypoints", str(fixture_dir / "keypoints/000000.json"))
    assert code == 0
    recs = rows(out)
    truth = json.loads((fixture_dir / "keypoints/000000.json").read_text())["objects"]
    assert len(recs) == 3
    for r, t in zip(recs, truth):
        assert float(r["residual"]) < 1e-9
        assert np.allclose([float(r["X"]), float(r["Y"]), float(r["Z"])], t["T"], atol=1e-6)


def test_solve_from_maps_json(fixture_dir, capsys):
    code, out, _ = run(capsys, "solve", "--calib", str(fixture_dir / "calib/000001.txt"), "--maps", str(fixture_dir / "maps/000001.hmap"), "--format", "json")
    assert code == 0
    recs = json.loads(out)
    assert len(recs) == 3 and all(r["residual"] < 1e-9 for r in recs)


def test_solve_dropout_deterministic(fixture_dir, capsys):
    args = ["solve", "--calib", str(fixture_dir / "calib/000000.txt"), "--keypoints", str(fixture_dir / "keypoints/000000.json"), "--drop-keypoints", "7", "--seed", "1"]
    code1, out1, _ = run(capsys, *args)
    code2, out2, _ = run(capsys, *args)
    assert code1 == code2 == 0 and out1 == out2
    assert all(r["mask"].count("1") == 2 for r in rows(out1))


def test_solve_input_errors(fixture_dir, tmp_path, capsys):
    bad = tmp_path / "calib.txt"
    bad.write_text("P0: 1 0 0 0 0 1 0 0 0 0 1 0\n")
    code, _, err = run(capsys, "solve", "--calib", str(bad), "--keypoints", str(fixture_dir / "keypoints/000000.json"))
    assert code == 2 and "MissingKey" in err
    code, _, err = run(capsys, "solve", "--calib", str(tmp_path / "nope.txt"), "--keypoints", str(fixture_dir / "keypoints/000000.json"))
    assert code == 2
    broken = tmp_path / "kp.json"
    broken.write_text('{"objects": [{"keypoints": [[1, 2]]}]}')
    code, _, err = run(capsys, "solve", "--calib", str(fixture_dir / "calib/000000.txt"), "--keypoints", str(broken))
    assert code == 2 and "object 0" in err


def test_solve_degenerate_names_object(fixture_dir, tmp_path, capsys):
    doc = json.loads((fixture_dir / "keypoints/000000.json").read_text())
    doc["objects"][1]["keypoints"] = [[600.0, 170.0]] * 9
    path = tmp_path / "kp.json"
    path.write_text(json.dumps(doc))
    code, _, err = run(capsys, "solve", "--calib", str(fixture_dir / "calib/000000.txt"), "--keypoints", str(path))
    assert code == 3 and "object 1" in err


def test_gradcheck(capsys):
    code, out, _ = run(capsys, "gradcheck", "--trials", "100", "--seed", "3")
    assert code == 0
    recs = rows(out)
    assert len(recs) == 100 and all(float(r["max_rel_error"]) < 1e-4 for r in recs)
    assert run(capsys, "gradcheck", "--trials", "100", "--seed", "3")[1] == out
    code, out, err = run(capsys, "gradcheck", "--trials", "0")
    assert code == 0 and "warning" in err


def test_seed_from_environment(monkeypatch, capsys):
    monkeypatch.setenv("MONOKP_SEED", "17")
    env_out = run(capsys, "gradcheck", "--trials", "3")[1]
    monkeypatch.delenv("MONOKP_SEED")
    assert run(capsys, "gradcheck", "--trials", "3", "--seed", "17")[1] == env_out
    assert run(capsys, "gradcheck", "--trials", "3")[1] != env_out


def _results_from_labels(src, dst, score="1.00"):
    dst.mkdir()
    for p in src.iterdir():
        (dst / p.name).write_text("".join(line + f" {score}\n" for line in p.read_text().splitlines()))


def test_eval_perfect_and_empty(fixture_dir, tmp_path, capsys):
    det = tmp_path / "det"
    _results_from_labels(fixture_dir / "label_2", det)
    code, out, _ = run(capsys, "eval", "--det", str(det), "--gt", str(fixture_dir / "label_2"), "--calib", str(fixture_dir / "calib"), "--metrics", "AP2D", "APBEV", "AP3D", "AOS")
    assert code == 0
    recs = rows(out)
    assert len(recs) == 4 * 3 and {r["class"] for r in recs} == {"Car"}
    assert list(recs[0]) == ["class", "metric", "difficulty", "threshold", "sampling", "AP"]
    assert all(float(r["AP"]) == 1.0 for r in recs if r["difficulty"] != "easy" or r["AP"] != "nan")
    empty = tmp_path / "empty"
    empty.mkdir()
    code, out, _ = run(capsys, "eval", "--det", str(empty), "--gt", str(fixture_dir / "label_2"), "--sampling", "11")
    assert code == 0 and all(float(r["AP"]) == 0.0 or r["AP"] == "nan" for r in rows(out))
    assert any(float(r["AP"]) == 0.0 for r in rows(out))


def test_eval_stem_mismatch(fixture_dir, tmp_path, capsys):
    det = tmp_path / "det"
    _results_from_labels(fixture_dir / "label_2", det)
    shutil.copy(det / "000000.txt", det / "000099.txt")
    code, _, err = run(capsys, "eval", "--det", str(det), "--gt", str(fixture_dir / "label_2"))
    assert code == 2 and "000099" in err
    calib = tmp_path / "calib"
    calib.mkdir()
    code, _, _ = run(capsys, "eval", "--det", str(fixture_dir / "label_2"), "--gt", str(fixture_dir / "label_2"), "--calib", str(calib))
    assert code == 2


def test_extreme(capsys):
    code, out, _ = run(capsys, "extreme", "--sigma", "0", "2", "--trials", "300", "--seed", "2")
    assert code == 0
    recs = rows(out)
    assert len(recs) == 2 * 8
    assert all(float(r["median_error"]) < 1e-6 for r in recs if r["sigma"] == "0.0")
    noisy = {int(r["k"]): float(r["median_error"]) for r in recs if r["sigma"] == "2.0"}
    assert noisy[2] >= noisy[9]
    code, out, _ = run(capsys, "extreme", "--sigma", "1", "--trials", "5", "--format", "json")
    assert len(json.loads(out)) == 8


def test_consistency(fixture_dir, capsys):
    code, out, _ = run(capsys, "consistency", "--format", "json")
    assert code == 0 and json.loads(out)[0]["loss"] == 0.0
    code, out, _ = run(capsys, "consistency", "--aug1", "scale=1.3,shift=12:-7,flip=1", "--aug2", "scale=0.7,shift=-30:4", "--dropout", "0.5", "--format", "json")
    assert json.loads(out)[0]["loss"] < 1e-10
    code, out, _ = run(capsys, "consistency", "--fixture", str(fixture_dir), "--aug2", "flip=1", "--perturb-dims", "0.1", "--format", "json")
    rec = json.loads(out)[0]
    assert rec["dimension"] == pytest.approx(0.01) and rec["pairs"] == 3
    code, _, err = run(capsys, "consistency", "--aug1", "scale=2")
    assert code == 2 and "InvalidScale" in err
    code, _, _ = run(capsys, "consistency", "--aug1", "zoom=2")
    assert code == 2


def test_console_script_entry_point():
    proc = subprocess.run([sys.executable, "-m", "monokp.cli", "gradcheck", "--trials", "2"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("trial,")
