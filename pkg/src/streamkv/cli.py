"""Command line entry points.

Subcommands: prefill, recall, simulate, mem-report, bench. Engine errors
print one line to stderr and exit 1; argparse handles usage errors with
exit 2. Report paths (bench, mem-report with --out) render figures next
to the delimited output.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

from . import accounting
from .agent.backends import HttpPlanner, ScriptedPlanner
from .errors import StreamKVError
from .model import init_weights
from .pipeline import engine_pass, simulate
from .recall import RecallConfig, answer_attention, recall
from .scenario import Scenario, generate_stream, load_scenario, make_question_block
from .store import TieredKVStore, TierPolicy
from .prefill import prefill_clip

CSV_COLUMNS = ["alpha", "chunk_size", "hot_budget_bytes", "step", "decision",
               "selected_frames", "recalled_entries", "hot_bytes",
               "cold_bytes", "cold_reads", "wall_time_s"]


def _scenario_from_args(args) -> Scenario:
    scenario = load_scenario(args.scenario)
    if getattr(args, "seed", None) is not None:
        scenario = replace(scenario,
                           config=replace(scenario.config, seed=args.seed))
    return scenario


def _cold_dir(args, tmp: list) -> Path:
    if getattr(args, "cold_dir", None):
        path = Path(args.cold_dir)
        path.mkdir(parents=True, exist_ok=True)
        return path
    holder = tempfile.TemporaryDirectory(prefix="streamkv-cold-")
    tmp.append(holder)
    return Path(holder.name)


def _backend(args, scenario: Scenario):
    if args.planner == "http":
        return HttpPlanner()
    return ScriptedPlanner(scenario)


def cmd_prefill(args) -> int:
    scenario = _scenario_from_args(args)
    tmp: list = []
    cold = _cold_dir(args, tmp)
    config = scenario.config
    weights = init_weights(config)
    store = TieredKVStore(config, cold_dir=cold)
    policy = TierPolicy(hot_budget_bytes=args.hot_budget)
    for clip in generate_stream(scenario):
        prefill_clip(store, clip, args.chunk_size, weights, config)
        store.maybe_offload(policy)
    usage = store.usage_report()
    print(json.dumps({
        "scenario": scenario.name,
        "chunk_size": args.chunk_size,
        "hot_budget_bytes": args.hot_budget,
        "hot_entries": usage.hot_entries,
        "cold_entries": usage.cold_entries,
        "hot_bytes": usage.hot_bytes,
        "cold_bytes": usage.cold_bytes,
        "hot_clips": list(usage.hot_clip_ids),
        "cold_clips": list(usage.cold_clip_ids),
        "cold_dir": str(cold),
    }, indent=2))
    return 0


def cmd_recall(args) -> int:
    scenario = _scenario_from_args(args)
    tmp: list = []
    cold = _cold_dir(args, tmp)
    config = scenario.config
    weights = init_weights(config)
    store = TieredKVStore(config, cold_dir=cold)
    policy = TierPolicy(hot_budget_bytes=args.hot_budget)
    for clip in generate_stream(scenario):
        prefill_clip(store, clip, args.chunk_size, weights, config)
        store.maybe_offload(policy)
    rc = RecallConfig(alpha=args.alpha, max_frames=args.max_frames)
    question = make_question_block(scenario, weights)
    reads_before = store.cold_reads
    result = recall(store, question, weights, config, rc)
    outputs = answer_attention(result, question, weights, config)
    print(json.dumps({
        "scenario": scenario.name,
        "question": scenario.question.text,
        "alpha": args.alpha,
        "max_frames": args.max_frames,
        "selected_frames": [list(layer.frame_ids) for layer in result.layers],
        "selected_counts": list(result.selected_counts()),
        "recalled_entries": result.recalled_entries(),
        "cold_reads": store.cold_reads - reads_before,
        "answer_output_shape": list(outputs.shape),
    }, indent=2))
    return 0


def cmd_simulate(args) -> int:
    scenario = _scenario_from_args(args)
    tmp: list = []
    cold = _cold_dir(args, tmp)
    backend = _backend(args, scenario)
    rc = RecallConfig(alpha=args.alpha, max_frames=args.max_frames)
    transcript, rows = simulate(scenario, backend, cold,
                                lam=args.lam, k=args.k,
                                baseline=args.baseline,
                                chunk_size=args.chunk_size,
                                hot_budget_bytes=args.hot_budget, rc=rc)
    doc = transcript.to_dict()
    doc["engine"] = [row.to_dict() for row in rows]
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(doc, indent=2))
        print(f"transcript written to {out}")
    for step in transcript.steps:
        marker = step.decision or "-"
        print(f"t={step.t} decision={marker} memory_tokens={step.memory.token_count}")
    print(f"answer={transcript.answer} at t={transcript.decided_at}")
    return 0


def cmd_mem_report(args) -> int:
    inp = accounting.preset(args.preset)
    if args.chunk_size is not None:
        inp = replace(inp, chunk_size=args.chunk_size)
    doc = accounting.report(inp)
    text = json.dumps(doc, indent=2)
    print(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "mem_report.json").write_text(text)
        from .figures import render_accounting
        render_accounting(doc, out)
        print(f"report and figure written to {out}", file=sys.stderr)
    return 0


def cmd_bench(args) -> int:
    scenario = _scenario_from_args(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    backend = ScriptedPlanner(scenario)
    from .agent.loop import run_stream
    transcript = run_stream(scenario, backend, lam=args.lam, k=args.k)
    alphas = [float(a) for a in args.alphas.split(",") if a != ""]
    chunk_sizes = [int(c) for c in args.chunk_sizes.split(",") if c != ""]
    budgets = [int(b) for b in args.hot_budgets.split(",") if b != ""]
    rows: list[dict] = []
    tmp: list = []
    for alpha in alphas:
        for chunk_size in chunk_sizes:
            for budget in budgets:
                with tempfile.TemporaryDirectory(prefix="streamkv-bench-") as cold:
                    rc = RecallConfig(alpha=alpha, max_frames=args.max_frames)
                    metrics, _ = engine_pass(
                        scenario, cold, chunk_size=chunk_size,
                        hot_budget_bytes=budget, rc=rc, transcript=transcript)
                for m in metrics:
                    rows.append({"alpha": alpha, "chunk_size": chunk_size,
                                 "hot_budget_bytes": budget, **m.to_dict()})
    csv_path = out_dir / "metrics.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for row in rows:
            flat = dict(row)
            flat["selected_frames"] = ";".join(str(c) for c in row["selected_frames"])
            flat["wall_time_s"] = f"{row['wall_time_s']:.6f}"
            writer.writerow(flat)
    from .figures import render_selected_vs_alpha, render_tier_usage
    render_selected_vs_alpha(rows, out_dir)
    render_tier_usage(rows, out_dir)
    print(f"{len(rows)} rows written to {csv_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="streamkv",
        description="streaming KV engine: prefill, recall, simulate, "
                    "mem-report, bench")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, scenario=True):
        if scenario:
            p.add_argument("--scenario", required=True, help="scenario JSON file")
            p.add_argument("--seed", type=int, default=None,
                           help="override the scenario's weight seed")
        p.add_argument("--chunk-size", type=int, default=4,
                       help="prefill chunk size in tokens")
        p.add_argument("--hot-budget", type=int, default=4096,
                       help="hot tier budget in bytes")
        p.add_argument("--cold-dir", default=None,
                       help="directory for cold clip files (default: temp)")

    p = sub.add_parser("prefill", help="stream a scenario into the store")
    common(p)
    p.set_defaults(func=cmd_prefill)

    p = sub.add_parser("recall", help="prefill then recall for the question")
    common(p)
    p.add_argument("--alpha", type=float, default=3.0)
    p.add_argument("--max-frames", type=int, default=256)
    p.set_defaults(func=cmd_recall)

    p = sub.add_parser("simulate", help="run the decision loop over a scenario")
    common(p)
    p.add_argument("--alpha", type=float, default=3.0)
    p.add_argument("--max-frames", type=int, default=256)
    p.add_argument("--planner", choices=["scripted", "http"], default="scripted")
    p.add_argument("--baseline", action="store_true",
                   help="respond at the first relevant observation (no plans)")
    p.add_argument("--lambda", dest="lam", type=float, default=1.0,
                   help="utility weight in f = g + lambda * u")
    p.add_argument("--k", type=int, default=3, help="plans per step")
    p.add_argument("--out", default=None, help="transcript JSON path")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("mem-report", help="closed-form memory accounting")
    p.add_argument("--preset", required=True, choices=sorted(accounting.PRESETS))
    p.add_argument("--chunk-size", type=int, default=None)
    p.add_argument("--out", default=None, help="directory for JSON + figure")
    p.set_defaults(func=cmd_mem_report)

    p = sub.add_parser("bench", help="sweep alpha/chunk/budget, write CSV + figures")
    common(p)
    p.add_argument("--alphas", default="0,1,3,6", help="comma-separated alphas")
    p.add_argument("--chunk-sizes", default="4", help="comma-separated chunk sizes")
    p.add_argument("--hot-budgets", default="4096", help="comma-separated budgets")
    p.add_argument("--max-frames", type=int, default=256)
    p.add_argument("--lambda", dest="lam", type=float, default=1.0)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--out", default="bench_out", help="output directory")
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except StreamKVError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
