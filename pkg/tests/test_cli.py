import json

import numpy as np
import pytest

from voxmatch.cli import main


@pytest.fixture
def shapes(tmp_path):
    a, b = tmp_path / "a.txt", tmp_path / "b.csv"
    assert main(["synth", "chain", "--pose", "straight", "--sampling", "2", "-o", str(a)]) == 0
    assert main(["synth", "chain", "--joint", "link1=60", "--sampling", "2", "-o", str(b)]) == 0
    return a, b


def test_synth_writes_truth_sidecar(shapes, capsys):
    a, b = shapes
    assert (a.parent / "a.truth.json").exists()
    assert b.read_text().startswith("x,y,z\n")


def test_embed_align_match_eval(shapes, tmp_path, capsys):
    a, b = shapes
    ea, eb = tmp_path / "ea.txt", tmp_path / "eb.txt"
    assert main(["--seed", "1", "embed", str(a), "-o", str(ea), "-k", "8"]) == 0
    assert main(["--seed", "1", "embed", str(b), "-o", str(eb), "-k", "8"]) == 0
    capsys.readouterr()
    r0 = tmp_path / "r0.txt"
    assert main(["align", str(ea), str(eb), "-o", str(r0)]) == 0
    table = capsys.readouterr().out.splitlines()
    assert table[0] == "k_x\tl_y\tsign\tcost"
    rot = np.loadtxt(r0, ndmin=2)
    np.testing.assert_array_equal(rot.T @ rot, np.eye(len(rot)))

    out = tmp_path / "run"
    assert main(["--threads", "1", "match", str(a), str(b), "-o", str(out), "--figures"]) == 0
    rep = json.loads((out / "match_report.json").read_text())
    assert "metrics" in rep and len(rep["figures"]) == 4
    capsys.readouterr()
    assert main(["eval", str(out / "match_correspondences.csv"), str(tmp_path / "a.truth.json"),
                 str(tmp_path / "b.truth.json")]) == 0
    metrics = json.loads(capsys.readouterr().out)
    assert metrics["accuracy"] == pytest.approx(rep["metrics"]["accuracy"])


def test_exit_code_parse_error(tmp_path, capsys):
    bad = tmp_path / "bad.txt"
    bad.write_text("0 0 0\n1 2\n")
    assert main(["match", str(bad), str(bad), "-o", str(tmp_path)]) == 2
    assert "bad.txt:2" in capsys.readouterr().err
    assert main(["embed", str(tmp_path / "missing.txt"), "-o", str(tmp_path / "e.txt")]) == 2
    assert main(["match", str(tmp_path / "missing.txt"), str(bad), "-o", str(tmp_path)]) == 2
    cfg = tmp_path / "c.cfg"
    cfg.write_text("oops\n")
    assert main(["--config", str(cfg), "synth", "chain", "-o", str(tmp_path / "s.txt")]) == 2


def test_exit_code_numerical_failure(shapes, tmp_path):
    a, _ = shapes
    assert main(["embed", str(a), "-o", str(tmp_path / "e.txt"), "-k", "100000"]) == 3


def test_exit_code_no_retained_pairs(shapes, tmp_path):
    a, b = shapes
    cfg = tmp_path / "c.cfg"
    cfg.write_text("align.retain_threshold = -1\n")
    assert main(["--config", str(cfg), "match", str(a), str(b), "-o", str(tmp_path)]) == 4
