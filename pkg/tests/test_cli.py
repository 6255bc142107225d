import csv
from pathlib import Path

import pytest

from flgpr.cli import _algorithms, main
from flgpr.config import load_config, parse_config

SMOKE = Path(__file__).resolve().parents[1] / "configs" / "smoke.yaml"


def _files(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run1")
    assert main(["all", "--config", str(SMOKE), "--out", str(out)]) == 0
    return out


def test_rerun_byte_identical(smoke_run, tmp_path_factory):
    out2 = tmp_path_factory.mktemp("run2")
    assert main(["all", "--config", str(SMOKE), "--out", str(out2)]) == 0
    a, b = _files(smoke_run), _files(out2)
    assert a.keys() == b.keys()
    diff = [str(k) for k in a if a[k] != b[k]]
    assert diff == []
    kinds = {k.parts[0] for k in a}
    assert {"lanes", "alarms", "features", "models", "results", "figures"} <= kinds


def test_report_rows(smoke_run):
    cfg = load_config(SMOKE)
    report = next((smoke_run / "results").glob("results_s*.csv"))
    with open(report) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2 * 4 * 2
    assert {(r["polarization"], r["feature"], r["classifier"]) for r in rows} == \
        set(_algorithms(cfg))
    for r in rows:
        assert float(r["pauc_ci_lo"]) <= float(r["pauc_mean"]) <= float(r["pauc_ci_hi"])


def test_default_grid_has_81_algorithms():
    cfg = parse_config({"seed": 0, "lanes": [
        {"lane_id": "A", "length_m": 10.0, "width_m": 6.0, "n_targets": 1},
        {"lane_id": "B", "length_m": 10.0, "width_m": 6.0, "n_targets": 1}]})
    assert len(_algorithms(cfg)) == 81


def test_missing_upstream_names_feature_matrix(tmp_path, capsys):
    for st in ("generate", "prescreen"):
        assert main([st, "--config", str(SMOKE), "--out", str(tmp_path)]) == 0
    capsys.readouterr()
    assert main(["evaluate", "--config", str(SMOKE), "--out", str(tmp_path)]) == 1
    err = capsys.readouterr().err
    assert "missing upstream artifact" in err and "feat_" in err and str(tmp_path) in err


def test_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text(SMOKE.read_text().replace("n_boot: 2", "n_boot: 0"))
    assert main(["all", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "evaluation.n_boot" in capsys.readouterr().err


def test_seed_override_changes_artifact_tags(tmp_path):
    assert main(["generate", "--config", str(SMOKE), "--out", str(tmp_path), "--seed", "9"]) == 0
    names = [p.name for p in (tmp_path / "lanes").iterdir()]
    assert names and all("_s9_" in n for n in names)


def test_stage_by_stage_matches_all(smoke_run, tmp_path):
    for st in ("generate", "prescreen", "extract"):
        assert main([st, "--config", str(SMOKE), "--out", str(tmp_path), "--threads", "1"]) == 0
    for p in (tmp_path / "features").iterdir():
        assert p.read_bytes() == (smoke_run / "features" / p.name).read_bytes()
