import csv
import io
import json
import os
import shutil
import subprocess

import numpy as np
import pytest

from pcstream import experiment as ex
from pcstream.cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, main
from pcstream.sim import LOG_COLUMNS

TINY = {
    "seed": 3,
    "algorithm": "frl",
    "manifest": {"synthetic": {"grid": [2, 2, 2], "tile_extent": [0.5, 0.5, 0.5], "origin": [-0.5, -0.5, 0.0],
                               "chunks": 8, "base_tile_bytes": 4e5, "compression_ratio": 0.2, "levels": 3}},
    "client_defaults": {"bandwidth": {"synthetic": {"mean_mbps": 60.0, "volatility": 0.3}},
                        "fov": {"synthetic": {"start": [-2.0, 0.0, 0.5, 0.0, 0.0, 0.0]}},
                        "compute": {"capacity": 6.0}},
    "fed": {"clients": 1, "rounds": 10, "local_steps": 4},
    "arch": {"filters": 8, "hidden": 16, "kernel": 2},
    "eval": {"episodes": 2},
}


def write_spec(path, **changes):
    doc = json.loads(json.dumps(TINY))
    doc.update(changes)
    path.write_text(json.dumps(doc))
    return str(path)


def read_csv(path):
    with open(path) as fh:
        first = fh.readline()
        rows = list(csv.DictReader(fh))
    return first, rows


@pytest.fixture
def trained(tmp_path):
    spec = write_spec(tmp_path / "spec.json")
    out = tmp_path / "run"
    assert main(["train", "--spec", spec, "--out", str(out)]) == EXIT_OK
    return spec, out


def test_train_smoke_and_determinism(trained, tmp_path):
    spec, out = trained
    first, rows = read_csv(out / "curve.csv")
    assert first.startswith("# spec_hash=") and len(rows) == 10
    assert list(rows[0]) == ex.CURVE_COLUMNS
    assert (out / "model.ckpt").exists()
    again = tmp_path / "again"
    assert main(["train", "--spec", spec, "--out", str(again)]) == EXIT_OK
    assert (again / "curve.csv").read_bytes() == (out / "curve.csv").read_bytes()
    assert (again / "model.ckpt").read_bytes() == (out / "model.ckpt").read_bytes()


def test_eval_summary_matches_log(trained):
    spec, out = trained
    assert main(["eval", "--spec", spec, "--out", str(out), "--checkpoint", str(out / "model.ckpt")]) == EXIT_OK
    first, rows = read_csv(out / "chunks.csv")
    summary = json.loads((out / "summary.json").read_text())
    assert first.strip() == f"# spec_hash={summary['spec_hash']}"
    assert list(rows[0]) == ["episode"] + LOG_COLUMNS
    assert len(rows) == 2 * 8
    assert summary["mean_qoe"] == pytest.approx(np.mean([float(r["qoe"]) for r in rows]), rel=1e-12)
    assert summary["total_rebuffer_s"] == pytest.approx(sum(float(r["rebuffer_s"]) for r in rows), rel=1e-12)


def test_bb_eval_is_deterministic(tmp_path):
    spec = write_spec(tmp_path / "s.json", algorithm="bb")
    assert main(["eval", "--spec", spec, "--out", str(tmp_path / "a")]) == EXIT_OK
    assert main(["eval", "--spec", spec, "--out", str(tmp_path / "b")]) == EXIT_OK
    assert (tmp_path / "a" / "summary.json").read_text() == (tmp_path / "b" / "summary.json").read_text()


def test_compare_matches_individual_runs(trained, tmp_path):
    spec, out = trained
    ckpt = str(out / "model.ckpt")
    assert main(["compare", "--spec", spec, "--algo", "frl", "--algo", "bb", "--algo", "rmpc",
                 "--checkpoint", ckpt, "--out", str(tmp_path / "cmp")]) == EXIT_OK
    _, rows = read_csv(tmp_path / "cmp" / "compare.csv")
    assert [r["algorithm"] for r in rows] == ["frl", "bb", "rmpc"]
    for r in rows:
        d = tmp_path / r["algorithm"]
        args = ["eval", "--spec", spec, "--algo", r["algorithm"], "--out", str(d)]
        assert main(args + (["--checkpoint", ckpt] if r["algorithm"] == "frl" else [])) == EXIT_OK
        s = json.loads((d / "summary.json").read_text())
        assert float(r["mean_qoe"]) == s["mean_qoe"]
        assert r["spec_hash"] == s["spec_hash"]


def test_exit_codes(tmp_path, trained):
    spec, out = trained
    assert main(["eval", "--spec", spec, "--out", str(tmp_path / "x")]) == EXIT_CONFIG  # frl, no checkpoint
    assert main(["eval", "--spec", str(tmp_path / "missing.json")]) == EXIT_CONFIG
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["train", "--spec", str(bad)]) == EXIT_CONFIG
    assert main(["train", "--spec", write_spec(tmp_path / "ns.json", seed="x")]) == EXIT_CONFIG
    assert main(["train", "--spec", write_spec(tmp_path / "u.json", bogus=1)]) == EXIT_CONFIG
    assert main(["train", "--spec", spec, "--algo", "bb"]) == EXIT_CONFIG
    # checkpoint built for another architecture
    other = write_spec(tmp_path / "o.json", arch={"filters": 4, "hidden": 16, "kernel": 2})
    assert main(["eval", "--spec", other, "--checkpoint", str(out / "model.ckpt"),
                 "--out", str(tmp_path / "o")]) == EXIT_CONFIG


def test_missing_trace_file_is_config_error(tmp_path):
    cd = dict(TINY["client_defaults"], bandwidth={"path": "nope.csv"})
    spec = write_spec(tmp_path / "s.json", client_defaults=cd)
    assert main(["train", "--spec", spec, "--out", str(tmp_path / "r")]) == EXIT_CONFIG


def test_compare_rejects_mismatched_traces(tmp_path):
    a = write_spec(tmp_path / "a.json", algorithm="bb")
    b = write_spec(tmp_path / "b.json", algorithm="quetra", seed=4)
    assert main(["compare", "--spec", a, "--spec", b, "--out", str(tmp_path / "c")]) == EXIT_CONFIG
    c = write_spec(tmp_path / "c.json", algorithm="quetra")
    assert main(["compare", "--spec", a, "--spec", c, "--out", str(tmp_path / "c")]) == EXIT_OK


def test_unwritable_output_is_io_error(tmp_path):
    spec = write_spec(tmp_path / "s.json", algorithm="bb")
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["eval", "--spec", spec, "--out", str(blocker / "sub")]) == EXIT_IO


def test_init_writes_loadable_spec(tmp_path):
    p = tmp_path / "d.json"
    assert main(["init", str(p), "--seed", "5", "--algo", "bb"]) == EXIT_OK
    spec = ex.load_spec(str(p))
    assert spec.seed == 5 and spec.algorithm == "bb"


def test_overrides_change_the_hash(tmp_path):
    p = write_spec(tmp_path / "s.json")
    a = ex.load_spec(p)
    b = ex.load_spec(p, {"rounds": 11})
    assert a.hash() != b.hash() and b.doc["fed"]["rounds"] == 11
    assert ex.load_spec(p).hash() == a.hash()


@pytest.mark.skipif(shutil.which("pcstream") is None, reason="console script not installed")
def test_console_script(tmp_path):
    spec = write_spec(tmp_path / "s.json", algorithm="quetra")
    res = subprocess.run(["pcstream", "eval", "--spec", spec, "--out", str(tmp_path / "o")],
                         capture_output=True, text=True, timeout=300)
    assert res.returncode == 0, res.stderr
    assert json.loads(res.stdout)["algorithm"] == "quetra"


def test_per_client_quality_floor():
    spec = ex.resolve_spec({**TINY, "fed": {"clients": 2}, "clients": [{}, {"quality_floor": 2}]})
    m = ex.build_manifest(spec)
    assert ex.client_env(spec, m, 0).config.quality_floor == 1
    assert ex.client_env(spec, m, 1).config.quality_floor == 2
