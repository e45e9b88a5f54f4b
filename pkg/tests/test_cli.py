import json
from pathlib import Path

import pytest
from click.testing import CliRunner

from qpgamma.cli import main

STAGES = [
    ["simulate-decays", "--n-decays", "50000"],
    ["build-table", "--scale", "2"],
    ["transport-charges", "--max-events", "5"],
    ["footprint", "--burst-events", "50"],
    ["synth", "--distances", "0.3,0.6", "--tomo-duration", "200", "--parity-samples", "50000",
     "--coupled-samples", "200000"],
    ["analyze"],
    ["coincide"],
    ["calibrate", "--n-decays", "50000", "--events", "100", "--quick"],
    ["nai-validate", "--n-decays", "50000"],
    ["report"],
]


def _run(out: Path, args, jobs=1):
    return CliRunner().invoke(main, ["--out-dir", str(out), "--seed", "7", "--jobs", str(jobs)] + list(args))


def _pipeline(out: Path, jobs=1):
    for args in STAGES:
        r = _run(out, args, jobs)
        assert r.exit_code == 0, (args, r.output, r.exception)


def _files(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.name != "manifest.json"}


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    _pipeline(out)
    return out


def test_full_pipeline_manifest(run_dir):
    m = json.loads((run_dir / "manifest.json").read_text())
    assert set(m["stages"]) == {a[0] for a in STAGES}
    assert m["seed"] == 7
    # every consumed input carries the hash recorded by its producer
    produced = {rel: h for st in m["stages"].values() for rel, h in st["outputs"].items()}
    for st in m["stages"].values():
        for rel, h in st["inputs"].items():
            assert produced[rel] == h
    assert (run_dir / "report" / "measured_coincidences.csv").exists()


def test_rerun_is_byte_identical(run_dir, tmp_path):
    _pipeline(tmp_path, jobs=2)
    a, b = _files(run_dir), _files(tmp_path)
    assert a.keys() == b.keys()
    assert [k for k in a if a[k] != b[k]] == []


def test_analyze_before_synth_is_data_error(tmp_path):
    r = _run(tmp_path, ["analyze"])
    assert r.exit_code == 3
    assert "missing stage input" in r.output


def test_hash_mismatch_detected(run_dir, tmp_path):
    import shutil
    work = tmp_path / "w"
    shutil.copytree(run_dir, work)
    (work / "decays" / "deposits.csv").write_text("tampered\n")
    r = _run(work, ["transport-charges", "--max-events", "5"])
    assert r.exit_code == 3 and "hash mismatch" in r.output


def test_schema_mismatch_detected(tmp_path):
    (tmp_path / "manifest.json").write_text(json.dumps({"schema": "other/9", "stages": {}}))
    r = _run(tmp_path, ["report"])
    assert r.exit_code == 3 and "schema" in r.output


def test_seed_change_needs_force(run_dir, tmp_path):
    import shutil
    work = tmp_path / "w"
    shutil.copytree(run_dir, work)
    r = CliRunner().invoke(main, ["--out-dir", str(work), "--seed", "8", "report"])
    assert r.exit_code == 3
    r = CliRunner().invoke(main, ["--out-dir", str(work), "--seed", "8", "--force", "report"])
    assert r.exit_code == 0


def test_bad_config_exit_code(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("geometry:\n  source_distance_m: -1\n")
    r = CliRunner().invoke(main, ["--config", str(cfg), "--out-dir", str(tmp_path / "o"), "report"])
    assert r.exit_code == 2


def test_out_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("QPGAMMA_OUT_DIR", str(tmp_path / "env"))
    r = CliRunner().invoke(main, ["analyze"])
    assert r.exit_code == 3
    assert (tmp_path / "env").is_dir()
