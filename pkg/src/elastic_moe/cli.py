"""Command-line pipeline: profile -> partition -> gates -> simulate -> report.

Exit codes: 0 success, 1 validation error, 2 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import gating, offload, perfmodel, profile, scheduler, solver
from .errors import ValidationError

DEFAULT_PERF = perfmodel.AnalyticPerf(fixed_s=0.02, per_token_s=0.0002, per_token_per_k_s=0.00005)


def _dump(doc) -> str:
    return json.dumps(doc, sort_keys=True)


def _log(args, msg: str) -> None:
    if not args.quiet:
        print(msg)


def _read_ndjson(path) -> list[dict]:
    docs = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            docs.append(json.loads(line))
    if not docs:
        raise ValidationError(f"{path}: no documents")
    return docs


def _require_out(args) -> Path:
    if not args.out:
        raise ValidationError("--out is required")
    return Path(args.out)


# ---------------------------------------------------------------------------
# profile


def cmd_profile(args) -> int:
    out = _require_out(args)
    if bool(args.synth) == bool(args.from_toy):
        raise ValidationError("give exactly one of --synth or --from-toy")
    if args.synth:
        doc = json.loads(Path(args.synth).read_text())
        if args.seed is not None:
            doc["seed"] = args.seed
        m = profile.generate_synthetic_activations(profile.SynthSpec.from_dict(doc))
    else:
        if not args.inputs:
            raise ValidationError("--from-toy needs --inputs")
        expert = profile.load_toy_expert(args.from_toy)
        m = profile.collect_activation_matrix(expert, profile.load_input_vectors(args.inputs))
    profile.save_activation_matrix(m, out, args.format)
    _log(args, f"wrote {m.rows}x{m.cols} matrix to {out}")
    for p, q in profile.quantile_summary(m).items():
        _log(args, f"  q{p}: {q:.6g}")
    return 0


# ---------------------------------------------------------------------------
# partition


def _partition_one(job):
    expert_id, path, cfg, oracle = job
    m = profile.load_activation_matrix(path, profile.guess_format(path))
    result = solver.solve(m, cfg)
    doc = solver.partition_to_doc(result, expert_id)
    warning = None
    if oracle:
        try:
            best = solver.brute_force_optimal(m, cfg.n_subexperts, cfg.k_deact)
        except ValidationError as exc:
            warning = f"expert {expert_id}: oracle skipped ({exc})"
        else:
            ratio = result.cost / best.cost if best.cost > 0 else (1.0 if result.cost == 0 else float("inf"))
            doc["oracle"] = {
                "cost": best.cost,
                "assignment": list(best.partition.assignment),
                "partitions": best.config["partitions"],
                "ratio": ratio,
            }
    return doc, warning


def cmd_partition(args) -> int:
    out = _require_out(args)
    cfg = solver.SolverConfig(
        n_subexperts=args.n,
        k_deact=args.k,
        t0=args.t0,
        alpha=args.alpha,
        iterations=args.iterations,
        seed=args.seed if args.seed is not None else 0,
    )
    for path in args.matrix:
        if not Path(path).exists():
            raise FileNotFoundError(2, "No such file or directory", path)
    jobs = [(i, path, cfg, args.oracle) for i, path in enumerate(args.matrix)]
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_partition_one, jobs))
    else:
        results = [_partition_one(job) for job in jobs]

    lines = []
    for doc, warning in results:
        if warning:
            print(f"warning: {warning}", file=sys.stderr)
        lines.append(_dump(doc))
        msg = f"expert {doc['expert_id']}: cost {doc['cost']:.6g} (greedy {doc['config']['greedy_cost']:.6g})"
        if "oracle" in doc:
            msg += f", oracle {doc['oracle']['cost']:.6g}, ratio {doc['oracle']['ratio']:.4f}"
        _log(args, msg)
    out.write_text("\n".join(lines) + "\n")
    _log(args, f"N={cfg.n_subexperts} K={cfg.k_deact} T0={cfg.t0} alpha={cfg.alpha} I={cfg.iterations}")
    return 0


# ---------------------------------------------------------------------------
# gates


def cmd_gates(args) -> int:
    out = _require_out(args)
    docs = _read_ndjson(args.partition)
    if len(docs) != len(args.matrix):
        raise ValidationError(f"{len(args.matrix)} matrices but {len(docs)} partition documents")
    lines = []
    for path, doc in zip(args.matrix, docs):
        m = profile.load_activation_matrix(path, profile.guess_format(path))
        p = solver.partition_from_doc(doc)
        if p.n_neurons != m.cols:
            raise ValidationError(
                f"partition covers {p.n_neurons} neurons but matrix {path} is {m.rows}x{m.cols}"
            )
        k_a = args.k_a if args.k_a is not None else gating.default_k_a(m.cols)
        c_co = profile.coactivation(profile.binarize_topk(m, k_a))
        gates = gating.select_gate_neurons(c_co, p, args.r)
        fidelity = {
            str(k): gating.gating_fidelity(m, p, gates, k) for k in range(1, p.n_subexperts + 1)
        }
        merged = {**doc, **gates.to_doc(doc.get("expert_id", 0)), "k_a": k_a, "fidelity": fidelity}
        lines.append(_dump(merged))
        _log(args, f"expert {merged['expert_id']}: r={args.r} k_a={k_a} fidelity " +
             " ".join(f"k={k}:{v:.3f}" for k, v in fidelity.items()))
    out.write_text("\n".join(lines) + "\n")
    return 0


# ---------------------------------------------------------------------------
# simulations


def cmd_simulate_serve(args) -> int:
    out = _require_out(args)
    doc = json.loads(Path(args.workload).read_text())
    if args.seed is not None:
        doc["seed"] = args.seed
    spec = scheduler.WorkloadSpec.from_doc(doc)
    perf = perfmodel.load_cost_model(args.perf) if args.perf else DEFAULT_PERF
    cfg = scheduler.SchedulerConfig(m_max=args.mmax, b_max=args.bmax, t_max_s=args.tmax, policy=args.policy)
    report = scheduler.run_simulation(scheduler.generate_workload(spec), cfg, perf)
    report.config["workload"] = spec.to_doc()
    report.write(out)
    agg = report.aggregates
    _log(args, f"{cfg.policy}: {agg['n_requests']} requests, {agg.get('throughput_tokens_s', 0):.1f} tokens/s, "
               f"mean TTFT {agg.get('ttft_mean_s', 0):.4f}s, violations {agg.get('slo_violations', 0)}")
    return 0


def cmd_simulate_offload(args) -> int:
    out = _require_out(args)
    cfg = offload.OffloadConfig.from_doc(json.loads(Path(args.config).read_text()))
    if args.granularity:
        cfg = cfg.with_granularity(args.granularity)
    if args.trace_in:
        trace = offload.load_trace(args.trace_in, cfg)
    else:
        seed = args.seed if args.seed is not None else 0
        trace = offload.generate_routing_trace(args.steps, args.k_equiv, args.locality, cfg, seed)
    if args.trace_out:
        offload.save_trace(trace, args.trace_out)
    report = offload.run_offload_sim(trace, cfg)
    doc = report.to_doc(cfg)
    out.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    _log(args, f"{cfg.granularity}: total {doc['total_latency_s']:.4f}s over {doc['n_steps']} steps, "
               f"hit ratio {doc['hit_ratio']:.4f}")
    return 0


# ---------------------------------------------------------------------------
# report

SERVE_COLUMNS = (
    "throughput_req_s", "throughput_tokens_s", "ttft_mean_s", "ttft_p99_s",
    "tpot_mean_s", "tpot_p99_s", "e2e_mean_s", "e2e_p99_s", "slo_violations",
)
OFFLOAD_COLUMNS = ("total_latency_s", "io_s", "compute_s", "hit_ratio", "capacity_residency")


def _load_report(path) -> tuple[str, dict]:
    path = Path(path)
    if path.is_dir():
        path = path / "summary.json"
    doc = json.loads(path.read_text())
    if doc.get("kind") not in ("serve", "offload"):
        raise ValidationError(f"{path}: not a simulation report")
    return str(path), doc


def compare_reports(docs: list[tuple[str, dict]]) -> list[dict]:
    kinds = {doc["kind"] for _, doc in docs}
    if len(kinds) != 1:
        raise ValidationError(f"cannot compare mixed report kinds {sorted(kinds)}")
    rows = []
    if kinds == {"serve"}:
        for source, doc in docs:
            agg = doc["aggregates"]
            rows.append({"source": source, "policy": doc["policy"], **{c: agg.get(c) for c in SERVE_COLUMNS}})
    else:
        reference = next((doc for _, doc in docs if doc["granularity"] == "monolithic"), docs[0][1])
        for source, doc in docs:
            row = {"source": source, "granularity": doc["granularity"], **{c: doc.get(c) for c in OFFLOAD_COLUMNS}}
            row["latency_ratio"] = doc["total_latency_s"] / reference["total_latency_s"]
            rows.append(row)
    return rows


def cmd_report(args) -> int:
    rows = compare_reports([_load_report(p) for p in args.reports])
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "comparison.json").write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")
        (out / "comparison.csv").write_text(buf.getvalue())
    _log(args, buf.getvalue().rstrip())
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="seed override for all randomness")
    common.add_argument("--out", help="output file or directory")
    common.add_argument("--quiet", action="store_true")

    parser = argparse.ArgumentParser(prog="elastic-moe", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("profile", parents=[common], help="synthesize or collect an activation matrix")
    p.add_argument("--synth", help="synthetic spec JSON")
    p.add_argument("--from-toy", help="toy expert MPEX file")
    p.add_argument("--inputs", help="CSV of calibration input vectors (with --from-toy)")
    p.add_argument("--format", choices=("binary", "csv"), default="binary")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("partition", parents=[common], help="split experts into balanced sub-experts")
    p.add_argument("--matrix", nargs="+", required=True)
    p.add_argument("--n", type=int, default=4, help="sub-experts per expert")
    p.add_argument("--k", type=int, default=None, help="de-activated count in the objective (default N//2)")
    p.add_argument("--t0", type=float, default=100.0)
    p.add_argument("--alpha", type=float, default=0.995)
    p.add_argument("--iterations", type=int, default=100_000)
    p.add_argument("--oracle", action="store_true", help="also run exhaustive search when feasible")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("gates", parents=[common], help="select proxy gate neurons")
    p.add_argument("--matrix", nargs="+", required=True)
    p.add_argument("--partition", required=True, help="partition map (newline-delimited JSON)")
    p.add_argument("--r", type=int, default=gating.DEFAULT_GATE_NEURONS)
    p.add_argument("--k-a", type=int, default=None, help="active neurons per token (default round(0.75*C))")
    p.set_defaults(func=cmd_gates)

    p = sub.add_parser("simulate-serve", parents=[common], help="run the batch-scheduling simulator")
    p.add_argument("--workload", required=True)
    p.add_argument("--policy", choices=scheduler.POLICIES, default="prism")
    p.add_argument("--perf", help="perf table CSV or analytic model JSON")
    p.add_argument("--bmax", type=int, default=256)
    p.add_argument("--tmax", type=float, default=0.5)
    p.add_argument("--mmax", type=int, default=32)
    p.set_defaults(func=cmd_simulate_serve)

    p = sub.add_parser("simulate-offload", parents=[common], help="run the offloading cache simulator")
    p.add_argument("--config", required=True)
    p.add_argument("--steps", type=int, default=512)
    p.add_argument("--k-equiv", type=float, default=4.2)
    p.add_argument("--locality", type=float, default=0.6)
    p.add_argument("--granularity", choices=offload.GRANULARITIES)
    p.add_argument("--trace-in")
    p.add_argument("--trace-out")
    p.set_defaults(func=cmd_simulate_offload)

    p = sub.add_parser("report", parents=[common], help="compare simulation reports")
    p.add_argument("reports", nargs="+")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        where = exc.filename if exc.filename is not None else ""
        print(f"error: {exc.strerror or exc}: {where}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
