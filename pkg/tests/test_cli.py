import csv
import json

import numpy as np
import pytest

from measurezip.cli import VOLATILE_FIELDS, run
from measurezip.mesh import icosphere, save_obj, uv_sphere

KERNEL = '{"gaussian": 0.5}'
VKERNEL = '{"product": {"spatial": {"gaussian": 0.5}, "spherical": {"spherical_gaussian": 0.5}}}'


@pytest.fixture
def meshes(tmp_path):
    save_obj(icosphere(1), tmp_path / "ico.obj")
    save_obj(uv_sphere(8, 12), tmp_path / "uv.obj")
    ell = icosphere(1)
    save_obj(ell.with_vertices(ell.vertices * np.array([1.0, 0.8, 1.2])), tmp_path / "ell.obj")
    return tmp_path


def strip_volatile(obj):
    if isinstance(obj, dict):
        return {k: strip_volatile(v) for k, v in obj.items() if k not in VOLATILE_FIELDS}
    if isinstance(obj, list):
        return [strip_volatile(v) for v in obj]
    return obj


def test_info(meshes, capsys):
    assert run(["info", str(meshes / "ico.obj")]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["n_triangles"] == 80 and out["n_vertices"] == 42
    assert out["bounding_box"]["size"] == pytest.approx([2.0, 2.0, 2.0])
    assert 0 < out["total_area"] < 4 * np.pi
    assert out["manifest"]["command"] == "info"


def test_usage_errors(meshes, capsys):
    base = ["compress", "--input", str(meshes / "ico.obj"), "--kernel", KERNEL, "--out", str(meshes / "o.json")]
    assert run(base + ["--m", "0"]) == 2
    assert run(base + ["--m", "3", "--tau", "1"]) == 2
    assert run(base) == 2
    assert run(base + ["--m", "81"]) == 2
    assert run(["compress", "--input", str(meshes / "ico.obj"), "--kernel", "{bad", "--m", "3",
                "--out", str(meshes / "o.json")]) == 2
    assert run(["frobnicate"]) == 2
    err = capsys.readouterr().err
    assert "--m" in err and "not allowed with" in err


def test_runtime_errors(meshes, capsys):
    assert run(["info", str(meshes / "missing.obj")]) == 1
    # a spatial kernel cannot act on varifold atoms
    assert run(["compress", "--input", str(meshes / "ico.obj"), "--rep", "varifold", "--kernel", KERNEL,
                "--m", "5", "--out", str(meshes / "o.json")]) == 1
    assert "error" in capsys.readouterr().err


def test_compress_is_reproducible(meshes):
    outs = []
    for k in range(2):
        out = meshes / f"c{k}.json"
        argv = ["compress", "--input", str(meshes / "uv.obj"), "--rep", "varifold", "--kernel", VKERNEL,
                "--sampler", "rls", "--m", "40", "--seed", "3", "--out", str(out), "--evaluate"]
        assert run(argv) == 0
        outs.append(out)
    a, b = (json.loads(p.read_text()) for p in outs)
    assert a["compressed"] == b["compressed"] and a["controls"] == b["controls"]
    assert strip_volatile(a) == strip_volatile(b)
    assert a["m"] == 40 and a["squared_error"] >= 0 and a["trace_error"] >= 0
    man = json.loads((meshes / "c0.json.manifest.json").read_text())
    assert man["seed"] == 3 and man["config"]["m"] == 40 and man["command"] == "compress"
    assert set(man["volatile_fields"]) == set(VOLATILE_FIELDS)


def test_compress_by_tau_and_choose_m(meshes, capsys):
    out = meshes / "t.json"
    assert run(["compress", "--input", str(meshes / "ico.obj"), "--rep", "current", "--kernel", KERNEL,
                "--tau", "0.05", "--tau-relative", "--out", str(out)]) == 0
    res = json.loads(out.read_text())
    assert res["trace_error"] <= 0.05 * 80 + 1e-9
    assert run(["choose-m", "--input", str(meshes / "ico.obj"), "--rep", "current", "--kernel", KERNEL,
                "--tau", "4", "--growth", "add_one"]) == 0
    printed = json.loads(capsys.readouterr().out)
    assert printed["m"] == res["m"] or printed["final_trace"] <= 4
    traj = [t for _, t in printed["trajectory"]]
    assert all(b <= a for a, b in zip(traj, traj[1:]))
    assert run(["choose-m", "--input", str(meshes / "ico.obj"), "--rep", "current", "--kernel", KERNEL,
                "--tau", "4", "--sampler", "kdpp", "--mcmc-iters", "50"]) == 0


def test_error_curve_csv(meshes):
    out = meshes / "curve.csv"
    argv = ["error-curve", "--input", str(meshes / "uv.obj"), "--rep", "current", "--kernel", KERNEL,
            "--m", "10,20", "--samplers", "rls,uniform", "--seeds", "1..3", "--out", str(out)]
    assert run(argv) == 0
    raw = out.read_bytes()
    assert b"\r" not in raw
    rows = list(csv.DictReader(raw.decode("utf-8").splitlines()))
    assert list(rows[0]) == ["sampler", "m", "seed", "squared_error", "trace_error", "wall_time_s"]
    assert len(rows) == 12
    first = [(r["sampler"], r["m"], r["seed"], r["squared_error"], r["trace_error"]) for r in rows]
    assert run(argv) == 0
    again = [(r["sampler"], r["m"], r["seed"], r["squared_error"], r["trace_error"])
             for r in csv.DictReader(out.read_text().splitlines())]
    assert first == again
    assert (meshes / "curve.csv.manifest.json").exists()
    assert run(argv[:-2] + ["--samplers", "greedy", "--out", str(out)]) == 2


def test_match(meshes):
    out, deformed = meshes / "m.json", meshes / "def.obj"
    argv = ["match", "--template", str(meshes / "ico.obj"), "--target", str(meshes / "ell.obj"),
            "--rep", "current", "--kernel", KERNEL, "--defkernel", '{"gaussian": 0.7}', "--lambda", "50",
            "--m-template", "40", "--m-target", "40", "--steps", "5", "--iters", "5", "--seed", "1",
            "--out", str(out), "--deformed", str(deformed)]
    assert run(argv) == 0
    res = json.loads(out.read_text())
    assert res["n_iters"] <= 5 and res["hausdorff"] > 0
    assert res["config"]["deformation"]["n_steps"] == 5
    assert deformed.exists()
    first = strip_volatile(res)
    assert run(argv) == 0
    assert strip_volatile(json.loads(out.read_text())) == first


def test_hausdorff_command(meshes, capsys):
    assert run(["hausdorff", str(meshes / "ico.obj"), str(meshes / "ico.obj")]) == 0
    assert json.loads(capsys.readouterr().out)["hausdorff"] == 0.0


def test_threads(meshes, monkeypatch, capsys):
    monkeypatch.setenv("MEASUREZIP_THREADS", "1")
    assert run(["info", str(meshes / "ico.obj")]) == 0
    assert run(["--threads", "2", "info", str(meshes / "ico.obj")]) == 0
    monkeypatch.setenv("MEASUREZIP_THREADS", "zero")
    assert run(["info", str(meshes / "ico.obj")]) == 2
    assert run(["--threads", "0", "info", str(meshes / "ico.obj")]) == 2


def test_version(capsys):
    assert run(["--version"]) == 0
    assert capsys.readouterr().out.strip() == "0.1.0"
