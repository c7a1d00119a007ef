import csv
import json
import subprocess
import sys

import pytest

from d3a.cli import main
from d3a.streamio import read_frames


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def kv(line):
    return dict(tok.split("=", 1) for tok in line.split())


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("sim")
    assert main(["simulate", "--static", "6", "--dynamic", "1", "--hours", "0.5", "--seed", "3", "--out", str(d)]) == 0
    return d


@pytest.fixture(scope="module")
def d3a_store(sim_dir, tmp_path_factory):
    d = tmp_path_factory.mktemp("store")
    assert main(["ingest", "--engine", "d3a", "--in", str(sim_dir), "--out", str(d)]) == 0
    return d


def test_simulate_frame_count(tmp_path, capsys):
    code, out, _ = run(capsys, "simulate", "--static", 1, "--dynamic", 0, "--hours", 0.1, "--seed", 7, "--out", tmp_path)
    assert code == 0
    frames = read_frames(tmp_path / "frames.jsonl")
    assert abs(len(frames) - 0.1 * 60 * 7.67) <= 1.5
    assert kv(out.splitlines()[0])["frames"] == str(len(frames))
    manifest = json.loads((tmp_path / "run_manifest.json").read_text())
    assert manifest["command"] == "simulate" and manifest["flags"]["seed"] == 7


def test_simulate_repeatable(tmp_path, capsys):
    for name in ("a", "b"):
        run(capsys, "simulate", "--static", 3, "--dynamic", 1, "--hours", 0.2, "--seed", 5, "--out", tmp_path / name)
    for f in ("frames.jsonl", "gt.jsonl"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_simulate_requires_out(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["simulate", "--static", "1"])
    assert exc.value.code == 2
    assert "--out" in capsys.readouterr().err


def test_simulate_infeasible(tmp_path, capsys):
    code, _, err = run(capsys, "simulate", "--static", 500, "--dynamic", 0, "--hours", 0.1, "--out", tmp_path)
    assert code != 0 and "infeasible" in err


def test_ingest_echoes_defaults(sim_dir, tmp_path, capsys):
    code, out, _ = run(capsys, "ingest", "--engine", "d3a", "--in", sim_dir, "--out", tmp_path)
    assert code == 0
    lines = out.splitlines()
    assert lines[0] == "d_thresh=0.5 window=10 cos=0.4 stm=400"
    stats = kv(lines[1])
    assert int(stats["oic_count"]) == 7


def test_ingest_overrides(sim_dir, tmp_path, capsys):
    code, out, _ = run(capsys, "ingest", "--in", sim_dir, "--out", tmp_path, "--d-thresh", 0.7, "--stm-cap", 12)
    assert code == 0 and out.splitlines()[0] == "d_thresh=0.7 window=10 cos=0.4 stm=12"
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["config"]["stm_capacity"] == 12


def test_ingest_naive_counts_detections(sim_dir, tmp_path, capsys):
    n = sum(len(f.detections) for f in read_frames(sim_dir / "frames.jsonl"))
    code, out, _ = run(capsys, "ingest", "--engine", "naive", "--in", sim_dir, "--out", tmp_path)
    assert code == 0 and kv(out.splitlines()[1])["oic_count"] == str(n)


def test_ingest_repeatable(sim_dir, tmp_path, capsys):
    for name in ("a", "b"):
        run(capsys, "ingest", "--in", sim_dir, "--out", tmp_path / name)
    for f in ("manifest.json", "oic.jsonl", "stc.jsonl"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_ingest_bad_input(tmp_path, capsys):
    code, _, err = run(capsys, "ingest", "--in", tmp_path / "missing", "--out", tmp_path / "s")
    assert code != 0 and "cannot read" in err


def test_ingest_bad_config(sim_dir, tmp_path, capsys):
    code, _, err = run(capsys, "ingest", "--in", sim_dir, "--out", tmp_path, "--stm-cap", 0)
    assert code != 0 and "stm_capacity" in err


def test_query_perfect(d3a_store, capsys):
    q = json.dumps({"kind": "Q1", "precision": "Perfect", "targets": [{"object_id": 1}]})
    code, out, _ = run(capsys, "query", "--store", d3a_store, "--query", q)
    assert code == 0
    res = json.loads(out)
    assert len(res["answers"]) >= 1 and res["answers"][0]["object_id"] == 1


def test_query_absent_category(d3a_store, capsys):
    q = json.dumps({"kind": "Q1", "precision": "Category", "targets": [{"category": "umbrella"}]})
    code, out, _ = run(capsys, "query", "--store", d3a_store, "--query", q)
    assert code == 0 and json.loads(out)["answers"] == []


def test_query_reversed_range(d3a_store, capsys):
    q = json.dumps({"kind": "Q3", "precision": "Any", "targets": [{}], "time_range": [10, 5]})
    code, _, err = run(capsys, "query", "--store", d3a_store, "--query", q)
    assert code == 2
    assert "time_range" in json.loads(err)["errors"]


def test_query_file_of_lines(d3a_store, tmp_path, capsys):
    p = tmp_path / "q.jsonl"
    p.write_text(
        json.dumps({"kind": "Q1", "precision": "Any", "targets": [{}]}) + "\n"
        + json.dumps({"kind": "Q2", "precision": "Any", "targets": [{}, {}]}) + "\n"
    )
    code, out, _ = run(capsys, "query", "--store", d3a_store, "--query", p, "--manifest-dir", tmp_path)
    assert code == 0 and len(json.loads(out)) == 2
    assert (tmp_path / "run_manifest.json").exists()


def test_query_malformed_json(d3a_store, capsys):
    code, _, err = run(capsys, "query", "--store", d3a_store, "--query", "{oops")
    assert code != 0 and "JSON" in err


def test_stats(d3a_store, capsys):
    code, out, _ = run(capsys, "stats", "--store", d3a_store)
    d = json.loads(out)
    assert code == 0 and d["oic_count"] == 7 and d["meta"]["engine"] == "d3a"


def test_bench_with_sweep(sim_dir, tmp_path, capsys):
    code, out, _ = run(capsys, "bench", "--in", sim_dir, "--out", tmp_path, "--repeats", 1, "--queries", 60,
                       "--sweep", "0,0.1,0.2,0.3,0.4,0.5")
    assert code == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert sorted(report["engines"]) == ["d3a", "naive", "nonspatial"]
    with open(tmp_path / "sweep.csv") as fh:
        rows = list(csv.DictReader(fh))
    for eng in ("d3a", "naive"):
        assert [float(r["fpr"]) for r in rows if r["engine"] == eng] == [0, 0.1, 0.2, 0.3, 0.4, 0.5]
    with open(tmp_path / "insertions.csv") as fh:
        ins = list(csv.DictReader(fh))
    last = {r["engine"]: int(r["cumulative_insertions"]) for r in ins}
    assert last["d3a"] < last["naive"]
    for name in ("table3.csv", "table4.csv", "timings.json", "query_log.jsonl", "insertions.png", "sweep.png",
                 "run_manifest.json"):
        assert (tmp_path / name).exists()


def test_bench_gt_mismatch(sim_dir, tmp_path, capsys):
    other = tmp_path / "other"
    run(capsys, "simulate", "--static", 2, "--dynamic", 0, "--hours", 0.1, "--seed", 1, "--out", other)
    code, _, err = run(capsys, "bench", "--in", sim_dir / "frames.jsonl", "--gt", other / "gt.jsonl",
                       "--out", tmp_path / "b", "--repeats", 1)
    assert code != 0 and "ground truth" in err


def test_bench_unknown_engine(sim_dir, tmp_path, capsys):
    code, _, err = run(capsys, "bench", "--in", sim_dir, "--out", tmp_path, "--engines", "d3a,magic")
    assert code != 0 and "magic" in err


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "d3a", "stats", "--store", str(tmp_path / "none")],
                          capture_output=True, text=True)
    assert proc.returncode == 1 and "cannot load store" in proc.stderr
