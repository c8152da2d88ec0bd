import json
import subprocess
import sys

import numpy as np
import pytest

from conftest import random_model
from gsfuse.cli import main
from gsfuse.ply import load_ply, save_ply
from gsfuse.synth import SceneSpec, Structure
from gsfuse.transform import SimilarityTransform


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out = capsys.readouterr().out
    return code, (json.loads(out) if code == 0 else None)


@pytest.fixture(scope="module")
def pair_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("pair")
    assert main(["synth", str(d), "--preset", "ridge", "--seed", "2", "--noise", "0.005"]) == 0
    return d


@pytest.fixture
def line_spec(tmp_path):
    spec = SceneSpec([Structure("line", {"p0": [0, 0, 0], "p1": [3, 0, 0]}, 80.0, scale=0.05,
                                clumps=5, clump_gap=0.3),
                      Structure("line", {"p0": [0, 2, 0], "p1": [0, 2, 2]}, 80.0, scale=0.05)])
    path = tmp_path / "spec.json"
    path.write_text(json.dumps(spec.to_dict()))
    return path


def test_usage_error_exit_code():
    for argv in ([], ["nope"], ["register", "only_one.ply"], ["fuse", "a", "b", "t"]):
        with pytest.raises(SystemExit) as exc:
            main(argv)
        assert exc.value.code == 2


def test_console_script_runs():
    res = subprocess.run([sys.executable, "-m", "gsfuse.cli", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and "gsfuse" in res.stdout


def test_missing_file_exit_code(tmp_path, capsys):
    assert main(["features", str(tmp_path / "missing.ply")]) == 3
    assert "missing.ply" in capsys.readouterr().err


def test_bad_config_exit_code(tmp_path, pair_dir, capsys):
    bad = tmp_path / "cfg.json"
    for doc in ('{"skeleton": {"no_such_knob": 1}}', '{"colour": {}}', "{not json", '{"fusion": {"tau": 3}}'):
        bad.write_text(doc)
        assert main(["features", str(pair_dir / "a.ply"), "--config", str(bad)]) == 4
    assert main(["features", str(pair_dir / "a.ply"), "--threads", "0"]) == 4


def test_bad_ply_exit_code(tmp_path):
    p = tmp_path / "x.ply"
    p.write_bytes(b"ply\nformat ascii 1.0\nend_header\n")
    assert main(["skeletonize", str(p)]) == 4


def test_degenerate_exit_code(tmp_path):
    # a handful of scattered primitives: DBSCAN finds no cluster
    p = tmp_path / "sparse.ply"
    save_ply(random_model(np.random.default_rng(0), 4, spread=50.0), p)
    assert main(["skeletonize", str(p)]) == 5


def test_disjoint_register_exit_code(tmp_path, pair_dir):
    other = tmp_path / "noise.ply"
    save_ply(random_model(np.random.default_rng(0), 3000, spread=1.5), other)
    report = tmp_path / "r.json"
    assert main(["register", str(pair_dir / "a.ply"), str(other), "--report", str(report)]) == 6
    assert json.loads(report.read_text())["error"] == "registration_failure"


def test_config_file_and_flag_precedence(tmp_path, line_spec, capsys):
    assert main(["synth", str(tmp_path), "--spec", str(line_spec)]) == 0
    capsys.readouterr()
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"skeleton": {"dbscan_eps": 0.2, "lam": 0.5}, "seed": 9}))
    code, rep = run(["skeletonize", tmp_path / "scene.ply", "--config", cfg, "--lam", "0.25"], capsys)
    assert code == 0
    assert rep["config"]["skeleton"]["dbscan_eps"] == 0.2
    assert rep["config"]["skeleton"]["lam"] == 0.25
    assert rep["config"]["seed"] == 9


def test_sweep_grid(tmp_path, line_spec, capsys):
    assert main(["synth", str(tmp_path), "--spec", str(line_spec)]) == 0
    capsys.readouterr()
    code, rep = run(["skeletonize", tmp_path / "scene.ply", "--reference", tmp_path / "scene_gt.json",
                     "--sweep-dbscan", "0.1:5,0.2:5,0.3:8"], capsys)
    assert code == 0
    assert rep["rows"] == ["ga-l1", "l1"]
    assert len(rep["cells"]) == 2 and all(len(row) == 3 for row in rep["cells"])
    assert {"curv_dev_pct", "connectivity", "num_nodes", "hausdorff"} <= set(rep["cells"][0][0])
    assert main(["skeletonize", str(tmp_path / "scene.ply"), "--sweep-dbscan", "0.1"]) == 4


def test_skeletonize_and_features_outputs(tmp_path, pair_dir, capsys):
    code, rep = run(["skeletonize", pair_dir / "a.ply", "-o", tmp_path / "s.json", "--baseline", "l1"], capsys)
    assert code == 0 and rep["method"] == "l1" and rep["num_nodes"] >= 1
    assert "nodes" in json.loads((tmp_path / "s.json").read_text())
    code, rep = run(["features", pair_dir / "a.ply", "-o", tmp_path / "f.json", "--dump", tmp_path / "f.npz",
                     "--report", tmp_path / "r.json"], capsys)
    assert code == 0 and rep["num_primitives"] == len(load_ply(pair_dir / "a.ply"))
    assert json.loads((tmp_path / "r.json").read_text())["num_primitives"] == rep["num_primitives"]


def test_self_register_and_self_fuse(tmp_path, pair_dir, capsys):
    a = pair_dir / "a.ply"
    SimilarityTransform().save(tmp_path / "identity.json")
    code, rep = run(["register", a, a, "-o", tmp_path / "t.json", "--gt", tmp_path / "identity.json"], capsys)
    assert code == 0
    assert rep["rre_deg"] < 1e-6 and rep["rte_m"] < 1e-6 and rep["rse"] < 1e-6
    code, rep = run(["fuse", a, a, tmp_path / "t.json", "-o", tmp_path / "self.ply"], capsys)
    assert code == 0
    assert rep["fused_size"] == len(load_ply(a)) == len(load_ply(tmp_path / "self.ply"))


def test_full_chain(tmp_path, pair_dir, capsys):
    a, b, gt = pair_dir / "a.ply", pair_dir / "b.ply", pair_dir / "gt.json"
    code, reg = run(["register", a, b, "-o", tmp_path / "t.json", "--gt", gt, "--report", tmp_path / "reg.json"],
                    capsys)
    assert code == 0 and reg["rre_deg"] < 2.0 and reg["rte_m"] < 0.05
    reports = []
    for name in ("one", "two"):
        code, _ = run(["fuse", a, b, tmp_path / "t.json", "-o", tmp_path / f"{name}.ply",
                       "--report", tmp_path / f"{name}.json"], capsys)
        assert code == 0
        rep = json.loads((tmp_path / f"{name}.json").read_text())
        rep.pop("time_s")
        reports.append(rep)
    assert reports[0] == reports[1]
    assert (tmp_path / "one.ply").read_bytes() == (tmp_path / "two.ply").read_bytes()
    code, ev = run(["eval", tmp_path / "one.ply", gt, "--fusion-report", tmp_path / "one.json"], capsys)
    assert code == 0
    assert 0.9 <= ev["coverage"] <= 1.0 and 0 <= ev["redundancy"] < 0.5 and 0 < ev["detail_retention"] <= 1
    code, base = run(["fuse", a, b, tmp_path / "t.json", "-o", tmp_path / "base.ply",
                      "--baseline", "center-proximity", "--verbose-report", "--report", tmp_path / "base.json"],
                     capsys)
    assert code == 0 and base["config"]["baseline"] == "center-proximity"
    assert "pair_records" in json.loads((tmp_path / "base.json").read_text())
    # eval needs the provenance lists
    (tmp_path / "thin.json").write_text("{}")
    assert main(["eval", str(tmp_path / "one.ply"), str(gt), "--fusion-report", str(tmp_path / "thin.json")]) == 4


def test_register_skeleton_fallback_flag(tmp_path, pair_dir, capsys):
    code, rep = run(["register", pair_dir / "a.ply", pair_dir / "b.ply", "--skeleton-fallback",
                     "--gt", pair_dir / "gt.json"], capsys)
    assert code == 0 and rep["level"] in ("primitives", "skeleton")
