import json
import subprocess
import sys

import pytest

from layerplan.cli import EXIT_MISMATCH, EXIT_USAGE, main
from layerplan.profiler import load_profile, profile_digest, serialize_profile

SMALL = ["--layers", "4", "--hidden", "32", "--ffn", "64", "--vocab", "64", "--prompts", "4"]


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, (json.loads(out.out) if out.out.strip() else None), out.err


def test_bound_command(capsys):
    code, rep, _ = run(capsys, "bound", "--layers", "32", "--k", "1", "--delta", "116", "--sigma", "64", "--prompts", "12")
    assert code == 0
    assert rep["report"]["failure_bound"] == pytest.approx(0.45, abs=0.02)
    code, rep, _ = run(capsys, "bound", "--layers", "32", "--delta", "116", "--sigma", "64", "--target", "0.46")
    assert rep["report"]["min_prompts"] == 12


def test_bound_rejects_bad_values(capsys):
    code, _, err = run(capsys, "bound", "--layers", "32", "--delta", "-1", "--sigma", "64", "--prompts", "3")
    assert code == EXIT_USAGE and "gap" in err


def test_profile_twice_same_digest_and_cache_hit(capsys, tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    _, r1, _ = run(capsys, "profile", *SMALL, "--outlier", "2:ffn:6", "--out", str(a))
    _, r2, _ = run(capsys, "profile", *SMALL, "--outlier", "2:ffn:6", "--out", str(b))
    assert a.read_bytes() == b.read_bytes()
    assert r1["report"]["profile_digest"] == r2["report"]["profile_digest"] == profile_digest(a.read_bytes())
    assert r1["timing"]["cache_hit"] is False and r2["timing"] == {"cache_hit": True, "profiling_ms": 0.0}


def test_scorer_changes_scores_not_schema(capsys, tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    run(capsys, "profile", *SMALL, "--outlier", "1:ffn:5", "--out", str(a))
    run(capsys, "profile", *SMALL, "--outlier", "1:ffn:5", "--scorer", "input_l2", "--out", str(b))
    pa, pb = json.loads(a.read_bytes()), json.loads(b.read_bytes())
    assert sorted(pa) == sorted(pb) and pa["raw_scores"] != pb["raw_scores"]


def test_missing_calib_exit_2(capsys, tmp_path):
    out = tmp_path / "p.json"
    code, rep, err = run(capsys, "profile", *SMALL, "--calib", str(tmp_path / "nope.json"), "--out", str(out))
    assert code == 2 and rep is None and "not found" in err
    assert not out.exists()


def test_calib_file_is_used(capsys, tmp_path):
    calib = tmp_path / "c.json"
    calib.write_text(json.dumps({"prompts": [[1, 2, 3], [4, 5]], "labels": ["a", "b"]}))
    out = tmp_path / "p.json"
    code, _, _ = run(capsys, "profile", *SMALL, "--calib", str(calib), "--out", str(out), "--no-cache")
    assert code == 0 and load_profile(out.read_bytes()).prompt_count == 2


def test_run_with_profile_from(capsys, tmp_path):
    p = tmp_path / "p.json"
    _, r1, _ = run(capsys, "profile", *SMALL, "--out", str(p))
    code, rep, _ = run(capsys, "run", *SMALL, "--profile-from", str(p))
    assert code == 0
    body = rep["report"]
    assert body["profile_digest"] == r1["report"]["profile_digest"]
    assert body["plan"]["mode"] == "B_hot_only" and body["plan"]["active_ratio"] == 1.0
    code, rep, _ = run(capsys, "run", *SMALL, "--profile-from", str(p), "--awq-viable")
    assert rep["report"]["plan"]["mode"] == "C_hot_awq"


def test_run_report_digest_stable(capsys, tmp_path):
    p = tmp_path / "p.json"
    run(capsys, "profile", *SMALL, "--out", str(p))
    _, a, _ = run(capsys, "run", *SMALL, "--profile-from", str(p), "--quantize")
    _, b, _ = run(capsys, "run", *SMALL, "--profile-from", str(p), "--quantize")
    assert a["report"] == b["report"] and a["report_digest"] == b["report_digest"]
    assert a["report"]["metrics"]["bpw"] == 4.5


def test_run_mode_a_goes_through_pager(capsys, tmp_path):
    p = tmp_path / "p.json"
    run(capsys, "profile", *SMALL, "--out", str(p))
    code, rep, _ = run(capsys, "run", *SMALL, "--profile-from", str(p), "--budget", "1", "--tokens", "1,2,3")
    plan = rep["report"]["plan"]
    assert plan["mode"] == "A_paged" and plan["active_layers"] == [0, 1, 2, 3]
    assert rep["report"]["metrics"]["divergence"] == 0.0
    assert rep["report"]["metrics"]["pager"]["hits"] + rep["report"]["metrics"]["pager"]["faults"] > 0


def test_run_profiles_on_the_fly_with_default_tau(capsys):
    code, rep, _ = run(capsys, "run", *SMALL, "--budget", "1", "--quantize")
    assert code == 0
    assert rep["report"]["plan"]["mode"] == "A_paged"
    assert rep["timing"]["cache_hit"] is False


def test_run_refuses_mismatched_profile(capsys, tmp_path):
    p = tmp_path / "p.json"
    run(capsys, "profile", *SMALL, "--out", str(p))
    key = load_profile(p.read_bytes()).architecture_key
    code, rep, err = run(capsys, "run", *SMALL, "--seed", "9", "--profile-from", str(p))
    assert code == EXIT_MISMATCH and rep is None
    assert key in err and "model=" in err


def test_sweep_threshold_rows(capsys):
    code, rep, _ = run(capsys, "sweep", *SMALL, "--taus", "0,0.3,0.7,2.0")
    rows = rep["report"]["rows"]
    counts = [r["w4a16"] for r in rows]
    assert len(rows) == 4 and counts == sorted(counts, reverse=True) and counts[0] == 4 and counts[-1] == 0


def test_sweep_layers_and_bpw(capsys):
    _, rep, _ = run(capsys, "sweep", *SMALL, "--kind", "layers", "--graded")
    assert [r["setting"] for r in rep["report"]["rows"]] == [4, 3, 2, 1]
    _, rep, _ = run(capsys, "sweep", *SMALL, "--kind", "bpw", "--bits", "4,2")
    assert [r["setting"] for r in rep["report"]["rows"]] == [4.5, 2.5]


def test_pagesim_default(capsys):
    code, rep, _ = run(capsys, "page-sim")
    stats = rep["report"]["stats"]
    assert code == 0 and stats["hit_rate"] > 0.99 and rep["report"]["units"] == 16


def test_pagesim_trace_file(capsys, tmp_path):
    trace = tmp_path / "t.json"
    trace.write_text(json.dumps([["L0.attn", "L0.ffn"], ["L1.attn"], ["L0.attn", "L0.ffn"], ["L1.ffn"]]))
    code, rep, _ = run(capsys, "page-sim", "--layers", "2", "--trace", str(trace), "--hot-bytes", "2")
    assert code == 0 and rep["report"]["unit_members"][0] == ["L0.attn", "L0.ffn"]
    code, _, _ = run(capsys, "page-sim", "--trace", str(tmp_path / "missing.json"))
    assert code == EXIT_USAGE


def test_bad_arguments_exit_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["bound", "--layers", "x"])
    assert exc.value.code == 2
    code, _, _ = run(capsys, "profile", *SMALL, "--outlier", "9:ffn:2")
    assert code == EXIT_USAGE


def test_outputs_round_trip_canonically(capsys, tmp_path):
    p = tmp_path / "p.json"
    run(capsys, "profile", *SMALL, "--out", str(p))
    assert serialize_profile(load_profile(p.read_bytes())) == p.read_bytes()


def test_profile_across_processes(tmp_path):
    outs = []
    for i in range(2):
        out = tmp_path / f"p{i}.json"
        env_cache = tmp_path / f"cache{i}"
        subprocess.run(
            [sys.executable, "-m", "layerplan", "profile", *SMALL, "--out", str(out), "--cache-dir", str(env_cache)],
            check=True,
            capture_output=True,
        )
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]
