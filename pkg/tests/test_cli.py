import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from shlfluct import cli
from shlfluct import estimators as est


@pytest.fixture(autouse=True)
def fresh_cache():
    est.clear_cache()


def run(args, **kw):
    return cli.main([str(a) for a in args], **kw)


def test_verify_passes(tmp_path, capsys):
    assert run(["verify", "--out", tmp_path, "--seed", 1]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and out.count("PASS") >= 15
    res = json.loads((tmp_path / "results.json").read_text())
    assert res["ok"] and all(c["passed"] for c in res["checks"])


def test_verify_with_loose_tolerance_still_passes(tmp_path, capsys):
    assert run(["verify", "--rel-tol", "1e-1", "--out", tmp_path, "--seed", 1]) == 0
    assert "FAIL" not in capsys.readouterr().out


def test_verify_catches_a_wrong_branch(tmp_path, capsys):
    def wrong(x, z):
        return (cli.cf.slit_apply(x, z) - x).conjugate() + x

    assert run(["verify", "--out", tmp_path, "--seed", 1], slit=wrong) == 1
    out = capsys.readouterr().out
    assert "FAIL  branch_positivity" in out


@pytest.mark.parametrize("argv", [
    ["variance"],
    ["variance", "--t", "abc"],
    ["variance", "--t", "-1"],
    ["variance", "--t", "8", "--window", "3"],
    ["variance", "--t", "8", "--samples", "1"],
    ["render", "--t", "1"],
    ["render", "--t", "1", "--grid", "0:1"],
    ["frobnicate"],
])
def test_usage_errors_exit_2(argv, tmp_path):
    with pytest.raises(SystemExit) as info:
        run(argv + ["--out", tmp_path])
    assert info.value.code == 2


def test_estimator_failure_exits_1(tmp_path, capsys):
    rc = run(["expmoment", "--t", "4", "--alpha", "2", "--samples", "10", "--out", tmp_path, "--seed", 0])
    assert rc == 1
    assert "alpha" in capsys.readouterr().err


def test_outputs_manifest_and_reproducibility(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    argv = ["variance", "--t", "2,4,8", "--samples", "200", "--seed", 9, "--dump-samples"]
    assert run(argv + ["--out", a]) == 0
    est.clear_cache()
    assert run(argv + ["--out", b, "--threads", 3]) == 0
    assert (a / "results.json").read_bytes() == (b / "results.json").read_bytes()
    assert (a / "samples.ndjson").read_bytes() == (b / "samples.ndjson").read_bytes()
    ma = json.loads((a / "manifest.json").read_text())
    mb = json.loads((b / "manifest.json").read_text())
    assert ma["digests"] == mb["digests"]
    assert set(ma["digests"]) == {"results.json", "results.csv", "samples.ndjson"}
    assert ma["master_seed"] == 9 and ma["tool_version"] == cli.__version__
    assert set(ma["wall_clock"]) == {"compute_s", "write_s"}
    lines = (a / "samples.ndjson").read_text().splitlines()
    assert len(lines) == 600
    rec = json.loads(lines[0])
    assert rec["sample_id"] == 0 and rec["t"] == 2 and len(rec["im_m"]) == 1


def test_repeat_runs_differ_only_in_wall_clock(tmp_path):
    argv = ["lln", "--t", "4", "--samples", "40", "--seed", 3, "--a", "1", "--out", tmp_path]
    run(argv)
    first = json.loads((tmp_path / "manifest.json").read_text())
    est.clear_cache()
    run(argv)
    second = json.loads((tmp_path / "manifest.json").read_text())
    first.pop("wall_clock")
    second.pop("wall_clock")
    assert first == second


def test_csv_is_lossless(tmp_path):
    run(["variance", "--t", "2,4,8", "--samples", "200", "--seed", 4, "--out", tmp_path])
    res = json.loads((tmp_path / "results.json").read_text())
    rows = (tmp_path / "results.csv").read_text().splitlines()
    assert rows[0].startswith("t,estimate,stderr")
    for row, e in zip(rows[1:], res["estimates"]):
        assert float(row.split(",")[1]) == e["estimate"]
    assert res["fit"]["slope_stderr"] > 0


def test_seed_is_recorded_when_missing(tmp_path):
    run(["lln", "--t", "2", "--samples", "10", "--out", tmp_path])
    seed = json.loads((tmp_path / "manifest.json").read_text())["master_seed"]
    assert isinstance(seed, int)
    assert json.loads((tmp_path / "results.json").read_text())["seed"] == seed


def test_config_file_with_flag_precedence(tmp_path):
    conf = tmp_path / "c.toml"
    conf.write_text('t = [2.0, 4.0, 8.0]\nsamples = 100\nseed = 12\ndrift-mode = "exact_quadrature"\n')
    run(["variance", "--config", conf, "--samples", 150, "--out", tmp_path / "o"])
    res = json.loads((tmp_path / "o" / "results.json").read_text())
    assert res["seed"] == 12
    assert res["config"]["samples"] == 150
    assert res["config"]["drift_mode"] == "exact_quadrature"
    assert [e["n"] for e in res["estimates"]] == [150, 150, 150]


def svg_polyline(path):
    root = ET.parse(path).getroot()
    lines = [el for el in root.iter() if el.tag.endswith("polyline")]
    assert len(lines) == 1
    pts = np.array([[float(v) for v in p.split(",")] for p in lines[0].get("points").split()])
    box = [float(v) for v in root.get("viewBox").split()]
    return pts, box


def test_render_writes_fitted_svg_and_csv(tmp_path):
    assert run(["render", "--t", 3, "--grid=-5:5:0.1", "--seed", 2, "--profile", "--out", tmp_path]) == 0
    pts, (x0, y0, w, h) = svg_polyline(tmp_path / "render.svg")
    assert len(pts) == 101
    assert np.all(pts[:, 0] >= x0) and np.all(pts[:, 0] <= x0 + w)
    assert np.all(pts[:, 1] >= y0) and np.all(pts[:, 1] <= y0 + h)
    # y axis is flipped: the cluster sits above the axis
    assert np.all(pts[:, 1] <= 0)
    rows = (tmp_path / "results.csv").read_text().splitlines()
    assert rows[0] == "x,re,im" and len(rows) == 102
    prof, _ = svg_polyline(tmp_path / "profile.svg")
    assert len(prof) == 101
    digests = json.loads((tmp_path / "manifest.json").read_text())["digests"]
    assert {"render.svg", "profile.svg", "profile.csv"} <= set(digests)


def test_render_of_an_empty_picture_is_the_real_axis(tmp_path):
    assert run(["render", "--t", 1e-9, "--grid=-2:2:0.5", "--seed", 1, "--out", tmp_path]) == 0
    pts, _ = svg_polyline(tmp_path / "render.svg")
    assert np.allclose(pts[:, 1], 0.0)
    assert np.allclose(pts[:, 0], np.linspace(-2, 2, 9))


def test_every_command_runs(tmp_path):
    cmds = [
        ["covariance", "--t", 4, "--b", "0,1,2", "--samples", 300],
        ["maxfluct", "--t", "4,8", "--samples", 10, "--beta", 1, "--window", 32],
        ["expmoment", "--t", 4, "--alpha", 0.5, "--beta", 1, "--samples", 40],
        ["derivmoment", "--t", 4, "--samples", 20],
        ["truncation", "--t", 2, "--m-small", "8,16", "--m-large", 256, "--samples", 20],
        ["histogram", "--t", 4, "--samples", 100, "--bins", 12],
        ["koebe", "--t", 4, "--maps", 3, "--pairs", 10],
    ]
    for c in cmds:
        out = tmp_path / c[0]
        assert run(c + ["--seed", 1, "--out", out]) == 0, c
        res = json.loads((out / "results.json").read_text())
        assert res["command"] == c[0]
        assert len((out / "results.csv").read_text().splitlines()) >= 2
    hist = json.loads((tmp_path / "histogram" / "results.json").read_text())
    assert sum(hist["im_counts"]) == 100


def test_rerender_is_byte_identical(tmp_path):
    argv = ["render", "--t", 5, "--grid=-3:3:0.25", "--seed", 8, "--window", 40]
    run(argv + ["--out", tmp_path / "a"])
    run(argv + ["--out", tmp_path / "b"])
    a = (tmp_path / "a" / "results.csv").read_bytes()
    assert a == (tmp_path / "b" / "results.csv").read_bytes()
    assert len(a.decode().splitlines()) == 1 + 25
