import json

import numpy as np
import pytest

from builders import planted_cluster
from elastic_moe.cli import main
from elastic_moe.profile import (
    ActivationMatrix,
    ToyExpert,
    collect_activation_matrix,
    load_activation_matrix,
    load_input_vectors,
    save_activation_matrix,
    save_toy_expert,
)
from elastic_moe.solver import SolverConfig, greedy_init, partition_from_doc


def write_json(path, doc):
    path.write_text(json.dumps(doc))
    return path


def read_ndjson(path):
    return [json.loads(line) for line in path.read_text().splitlines() if line]


@pytest.fixture
def synth(tmp_path):
    return write_json(tmp_path / "synth.json", {"rows": 64, "cols": 16, "quantiles": [[0.5, 0.0167], [0.75, 0.0391]], "seed": 3})


@pytest.fixture
def matrix(tmp_path, synth):
    out = tmp_path / "m.mpam"
    assert main(["profile", "--synth", str(synth), "--out", str(out), "--quiet"]) == 0
    return out


def test_profile_synth(matrix, capsys):
    m = load_activation_matrix(matrix)
    assert (m.rows, m.cols) == (64, 16)


def test_profile_prints_quantiles(tmp_path, synth, capsys):
    main(["profile", "--synth", str(synth), "--out", str(tmp_path / "x.mpam")])
    out = capsys.readouterr().out
    assert "q0.5" in out and "64x16" in out


def test_profile_from_toy(tmp_path):
    e = ToyExpert.random(6, 10, seed=2)
    save_toy_expert(e, tmp_path / "e.mpex")
    np.savetxt(tmp_path / "x.csv", np.random.default_rng(0).normal(size=(7, 6)), delimiter=",")
    out = tmp_path / "m.mpam"
    rc = main(["profile", "--from-toy", str(tmp_path / "e.mpex"), "--inputs", str(tmp_path / "x.csv"), "--out", str(out), "--quiet"])
    assert rc == 0
    expected = collect_activation_matrix(e, load_input_vectors(tmp_path / "x.csv"))
    assert np.array_equal(load_activation_matrix(out).data, expected.data)


def test_missing_input_exit_2(tmp_path, capsys):
    rc = main(["profile", "--synth", str(tmp_path / "absent.json"), "--out", str(tmp_path / "m.mpam")])
    assert rc == 2
    assert "absent.json" in capsys.readouterr().err


def test_bad_spec_exit_1(tmp_path):
    spec = write_json(tmp_path / "s.json", {"rows": 4, "cols": 4, "quantiles": [[0.5, 0.2], [0.7, 0.1]]})
    assert main(["profile", "--synth", str(spec), "--out", str(tmp_path / "m.mpam"), "--quiet"]) == 1


def test_partition_defaults(tmp_path, matrix):
    out = tmp_path / "p.ndjson"
    assert main(["partition", "--matrix", str(matrix), "--iterations", "500", "--out", str(out), "--quiet"]) == 0
    (doc,) = read_ndjson(out)
    assert doc["n_subexperts"] == 4
    assert doc["config"]["k_deact"] == 2
    assert doc["config"]["t0"] == 100.0 and doc["config"]["alpha"] == 0.995
    assert SolverConfig().iterations == 100_000


def test_partition_zero_iterations_is_greedy(tmp_path, matrix):
    out = tmp_path / "p.ndjson"
    main(["partition", "--matrix", str(matrix), "--iterations", "0", "--out", str(out), "--quiet"])
    (doc,) = read_ndjson(out)
    assert partition_from_doc(doc) == greedy_init(load_activation_matrix(matrix), 4)


def test_partition_oracle_gap(tmp_path):
    m = np.random.default_rng(1).random((6, 8)).astype(np.float32)
    save_activation_matrix(ActivationMatrix(m), tmp_path / "m.mpam")
    out = tmp_path / "p.ndjson"
    main(["partition", "--matrix", str(tmp_path / "m.mpam"), "--n", "2", "--oracle", "--iterations", "3000", "--out", str(out), "--quiet"])
    (doc,) = read_ndjson(out)
    assert doc["oracle"]["ratio"] >= 1.0 - 1e-12
    assert doc["oracle"]["partitions"] == 35
    assert doc["cost"] == pytest.approx(doc["oracle"]["ratio"] * doc["oracle"]["cost"])


def test_partition_oracle_infeasible_warns(tmp_path, capsys):
    save_activation_matrix(ActivationMatrix(np.ones((2, 40))), tmp_path / "m.mpam")
    out = tmp_path / "p.ndjson"
    rc = main(["partition", "--matrix", str(tmp_path / "m.mpam"), "--oracle", "--iterations", "10", "--out", str(out), "--quiet"])
    assert rc == 0
    assert "oracle skipped" in capsys.readouterr().err
    assert "oracle" not in read_ndjson(out)[0]


def test_partition_parallel_matches_serial(tmp_path, matrix, synth):
    other = tmp_path / "m2.mpam"
    doc = json.loads(synth.read_text())
    doc["seed"] = 4
    main(["profile", "--synth", str(write_json(tmp_path / "s2.json", doc)), "--out", str(other), "--quiet"])
    serial, parallel = tmp_path / "a.ndjson", tmp_path / "b.ndjson"
    args = ["partition", "--matrix", str(matrix), str(other), "--iterations", "300", "--quiet"]
    main(args + ["--out", str(serial)])
    main(args + ["--jobs", "2", "--out", str(parallel)])
    assert serial.read_bytes() == parallel.read_bytes()
    assert [d["expert_id"] for d in read_ndjson(serial)] == [0, 1]


def test_gates_saturated_fidelity(tmp_path, matrix):
    parts, gates = tmp_path / "p.ndjson", tmp_path / "g.ndjson"
    main(["partition", "--matrix", str(matrix), "--iterations", "200", "--out", str(parts), "--quiet"])
    assert main(["gates", "--matrix", str(matrix), "--partition", str(parts), "--out", str(gates), "--quiet"]) == 0
    (doc,) = read_ndjson(gates)
    assert doc["r"] == 4 and doc["k_a"] == 12
    assert doc["fidelity"] == {"1": 1.0, "2": 1.0, "3": 1.0, "4": 1.0}
    assert {"assignment", "cost", "gates", "expert_id"} <= set(doc)


def test_gates_planted_cluster(tmp_path):
    m, p = planted_cluster(0)
    save_activation_matrix(m, tmp_path / "m.mpam")
    doc = {"expert_id": 0, "n_subexperts": 4, "assignment": list(p.assignment), "cost": 0.0, "config": {}}
    (tmp_path / "p.ndjson").write_text(json.dumps(doc) + "\n")
    main(["gates", "--matrix", str(tmp_path / "m.mpam"), "--partition", str(tmp_path / "p.ndjson"),
          "--r", "1", "--out", str(tmp_path / "g.ndjson"), "--quiet"])
    assert read_ndjson(tmp_path / "g.ndjson")[0]["fidelity"]["1"] >= 0.95


def test_gates_dimension_mismatch(tmp_path, matrix, capsys):
    doc = {"expert_id": 0, "n_subexperts": 2, "assignment": [0, 1] * 4, "cost": 0.0, "config": {}}
    (tmp_path / "p.ndjson").write_text(json.dumps(doc) + "\n")
    rc = main(["gates", "--matrix", str(matrix), "--partition", str(tmp_path / "p.ndjson"), "--out", str(tmp_path / "g")])
    assert rc == 1
    err = capsys.readouterr().err
    assert "8" in err and "64x16" in err


WORKLOAD = {
    "duration_s": 2.0,
    "rate_per_s": 200.0,
    "kmin_pmf": {"4": 0.3, "8": 0.3, "16": 0.25, "32": 0.15},
    "prompt_tokens": {"dist": "uniform-int", "low": 32, "high": 512},
    "output_tokens": {"dist": "geometric", "mean": 64},
    "seed": 5,
}


def serve(tmp_path, policy, extra=()):
    w = write_json(tmp_path / "w.json", WORKLOAD)
    out = tmp_path / policy
    rc = main(["simulate-serve", "--workload", str(w), "--policy", policy, "--out", str(out), "--quiet", *extra])
    assert rc == 0
    return out


def test_simulate_serve_outputs(tmp_path):
    out = serve(tmp_path, "prism")
    summary = json.loads((out / "summary.json").read_text())
    assert summary["kind"] == "serve" and summary["config"]["b_max"] == 256
    assert summary["aggregates"]["slo_violations"] == 0
    rows = (out / "requests.csv").read_text().splitlines()
    assert len(rows) == summary["aggregates"]["n_requests"] + 1


def test_simulate_serve_perf_table(tmp_path):
    table = tmp_path / "perf.csv"
    lines = ["batch,k,latency_s"] + [f"{b},{k},{0.02 + b * (0.0002 + k * 0.00005)}" for b in (1, 64, 256) for k in (1, 8, 32)]
    table.write_text("\n".join(lines) + "\n")
    out = serve(tmp_path, "fifo", ["--perf", str(table), "--bmax", "64", "--tmax", "0.2"])
    summary = json.loads((out / "summary.json").read_text())
    assert summary["config"]["b_max"] == 64 and summary["config"]["t_max_s"] == 0.2


def test_report_two_serve(tmp_path, capsys):
    a, b = serve(tmp_path, "prism"), serve(tmp_path, "fifo")
    assert main(["report", str(a), str(b), "--out", str(tmp_path / "rep"), "--quiet"]) == 0
    rows = json.loads((tmp_path / "rep" / "comparison.json").read_text())
    assert [r["policy"] for r in rows] == ["prism", "fifo"]
    header = (tmp_path / "rep" / "comparison.csv").read_text().splitlines()[0]
    for col in ("throughput_tokens_s", "ttft_mean_s", "tpot_mean_s", "e2e_mean_s"):
        assert col in header


def test_report_single_passthrough(tmp_path):
    a = serve(tmp_path, "fullbatch")
    main(["report", str(a), "--out", str(tmp_path / "rep"), "--quiet"])
    (row,) = json.loads((tmp_path / "rep" / "comparison.json").read_text())
    agg = json.loads((a / "summary.json").read_text())["aggregates"]
    assert row["throughput_req_s"] == agg["throughput_req_s"]


OFFLOAD = {
    "n_experts": 64, "subexperts_per_expert": 4, "expert_bytes": 200e6,
    "vram_bytes": 28.5 * 200e6, "pcie_bytes_per_s": 25e9, "compute_s_per_subexpert": 1e-4,
}


def offload(tmp_path, granularity, extra=()):
    cfg = write_json(tmp_path / "off.json", OFFLOAD)
    out = tmp_path / f"{granularity}.json"
    rc = main(["simulate-offload", "--config", str(cfg), "--steps", "128", "--granularity", granularity,
               "--seed", "3", "--out", str(out), "--quiet", *extra])
    assert rc == 0
    return out


def test_offload_report_ratio(tmp_path):
    fine, mono = offload(tmp_path, "fine"), offload(tmp_path, "monolithic")
    main(["report", str(fine), str(mono), "--out", str(tmp_path / "rep"), "--quiet"])
    rows = {r["granularity"]: r for r in json.loads((tmp_path / "rep" / "comparison.json").read_text())}
    assert rows["monolithic"]["latency_ratio"] == 1.0
    assert rows["fine"]["latency_ratio"] < 1.0
    assert 0.0 < rows["fine"]["hit_ratio"] < 1.0
    assert rows["fine"]["capacity_residency"] == 114 / 256


def test_offload_trace_round_trip(tmp_path):
    first = offload(tmp_path, "fine", ["--trace-out", str(tmp_path / "t.csv")])
    again = tmp_path / "again.json"
    main(["simulate-offload", "--config", str(tmp_path / "off.json"), "--granularity", "fine",
          "--trace-in", str(tmp_path / "t.csv"), "--out", str(again), "--quiet"])
    assert json.loads(first.read_text())["total_latency_s"] == json.loads(again.read_text())["total_latency_s"]


def test_report_mixed_kinds_rejected(tmp_path):
    fine = offload(tmp_path, "fine")
    a = serve(tmp_path, "prism")
    assert main(["report", str(fine), str(a), "--quiet"]) == 1
