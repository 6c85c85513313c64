"""Command-line surface.

Subcommands: build, fuse, estimate, tune, calibrate, search, report.

Every output artifact is deterministic given --seed and references a
manifest sidecar (<artifact>.manifest.json) carrying the command, config
snapshot, seed, tool version, paths, and wall-clock duration; timing lives
only in the sidecar so artifacts stay byte-identical across runs.

Exit codes: 0 success, 1 user error, 2 internal error, 3 search completed
but found no architecture under the latency budget.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import sys
import time
from pathlib import Path

from . import __version__
from .fusion import (
    FusedGraph,
    deserialize_fused,
    fuse,
    serialize_fused,
)
from .graph_ir import (
    ArchitectureConfig,
    ConfigurationError,
    Graph,
    ParseError,
    build_bert_graph,
    census,
    deserialize,
    flops,
    intermediate_bytes,
    serialize,
)
from .perf_model import (
    CalibrationError,
    DeviceProfile,
    GAConfig,
    TuningConfig,
    TuningError,
    calibrate,
    estimate_latency,
    ga_tune,
    observations_from_csv,
)
from .profiles import load_profile
from .search import SearchConfig, SearchTrace, run_search

EXIT_OK = 0
EXIT_USER = 1
EXIT_INTERNAL = 2
EXIT_INFEASIBLE = 3


class UserError(ValueError):
    pass


def _write_artifact(path: Path, text: str, manifest: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    sidecar = path.with_name(path.name + ".manifest.json")
    sidecar.write_text(json.dumps(manifest, indent=1) + "\n")


def _manifest(command: str, args: argparse.Namespace, started: float,
              inputs: list[str], outputs: list[str]) -> dict:
    return {
        "command": command,
        "config": {k: v for k, v in vars(args).items() if k != "func"},
        "seed": getattr(args, "seed", None),
        "tool_version": __version__,
        "inputs": inputs,
        "outputs": outputs,
        "duration_s": round(time.time() - started, 6),
    }


def _read_graph(path: str) -> Graph:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UserError(f"cannot read {path}: {exc}") from exc
    return deserialize(text, where=path)


def _read_target(path: str) -> Graph | FusedGraph:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UserError(f"cannot read {path}: {exc}") from exc
    doc = json.loads(text)
    if doc.get("format") == "fusenas-fused-graph":
        return deserialize_fused(text, where=path)
    return deserialize(text, where=path)


def _load_profile_arg(name: str) -> DeviceProfile:
    try:
        return load_profile(name)
    except FileNotFoundError as exc:
        raise UserError(str(exc)) from exc


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_build(args) -> int:
    started = time.time()
    arch = ArchitectureConfig(
        num_blocks=args.blocks,
        hidden_size=args.hidden,
        intermediate_size=args.intermediate or 4 * args.hidden,
        seq_len=args.seq,
        vocab_size=args.vocab,
    )
    graph = build_bert_graph(arch)
    cen = census(graph)
    out = Path(args.out)
    _write_artifact(
        out, serialize(graph),
        _manifest("build", args, started, [], [str(out)]),
    )
    print(
        f"built {out}: {cen.total} layers "
        f"({cen.compute_intensive} compute / {cen.memory_intensive} memory), "
        f"{flops(graph) / 1e9:.2f} GFLOPs, "
        f"{intermediate_bytes(graph) / 1e6:.1f} MB intermediates"
    )
    return EXIT_OK


def cmd_fuse(args) -> int:
    started = time.time()
    graph = _read_graph(args.graph)
    fused, report = fuse(graph)
    out = Path(args.out)
    _write_artifact(
        out, serialize_fused(fused),
        _manifest("fuse", args, started, [args.graph], [str(out)]),
    )
    if args.report:
        rpt = Path(args.report)
        _write_artifact(
            rpt, json.dumps(report.to_dict(), indent=1) + "\n",
            _manifest("fuse", args, started, [args.graph], [str(rpt)]),
        )
    if not report.rows:
        print("0 candidates")
    else:
        print(report.render())
    return EXIT_OK


def cmd_estimate(args) -> int:
    started = time.time()
    target = _read_target(args.graph)
    device = _load_profile_arg(args.profile)
    tuning = None
    if args.tuning:
        tuning = TuningConfig.from_dict(
            json.loads(Path(args.tuning).read_text()), where=args.tuning
        )
    estimate = estimate_latency(target, device, tuning)
    doc = {
        "format": "fusenas-latency",
        "version": 1,
        "profile": device.name,
        "total_ms": estimate.total_s * 1000.0,
        "per_block": [
            {
                "unit": b.unit_id,
                "compute_ms": b.compute_s * 1000.0,
                "memory_ms": b.memory_s * 1000.0,
                "overhead_ms": b.overhead_s * 1000.0,
            }
            for b in estimate.per_block
        ],
    }
    if args.json:
        print(json.dumps(doc, indent=1))
    else:
        print(f"{estimate.total_s * 1000.0:.3f} ms on {device.name} "
              f"({len(estimate.per_block)} executable units)")
    if args.out:
        out = Path(args.out)
        _write_artifact(
            out, json.dumps(doc, indent=1) + "\n",
            _manifest("estimate", args, started, [args.graph], [str(out)]),
        )
    return EXIT_OK


def cmd_tune(args) -> int:
    started = time.time()
    target = _read_target(args.graph)
    device = _load_profile_arg(args.profile)
    config = GAConfig(
        population=args.population,
        generations=args.generations,
        mutation_rate=args.mutation,
        seed=args.seed,
    )
    tuning = ga_tune(target, device, config)
    latency = estimate_latency(target, device, tuning)
    out = Path(args.out)
    _write_artifact(
        out, json.dumps(tuning.to_dict(), indent=1) + "\n",
        _manifest("tune", args, started, [args.graph], [str(out)]),
    )
    print(f"tuned {len(tuning.genes)} units -> {latency.total_s * 1000.0:.3f} ms")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    started = time.time()
    template = _load_profile_arg(args.template)
    observations = observations_from_csv(
        Path(args.observations).read_text(), where=args.observations
    )
    profile, residuals = calibrate(template, observations)
    out = Path(args.out)
    _write_artifact(
        out, json.dumps(profile.to_dict(), indent=2) + "\n",
        _manifest("calibrate", args, started, [args.observations], [str(out)]),
    )
    print(
        f"calibrated {profile.name}: residuals "
        + ", ".join(f"{r:+.2%}" for r in residuals)
    )
    return EXIT_OK


def cmd_search(args) -> int:
    started = time.time()
    recorded = None
    if args.replay:
        recorded = SearchTrace.from_jsonl(Path(args.replay).read_text(), where=args.replay)
        config = SearchConfig.from_dict(recorded.config_snapshot, where=args.replay)
    elif args.config:
        config_doc = json.loads(Path(args.config).read_text())
        config = SearchConfig.from_dict(config_doc, where=args.config)
    else:
        raise UserError("search needs a config file or --replay")
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    result = run_search(config)
    if recorded is not None:
        if result.trace.to_jsonl() != recorded.to_jsonl():
            print("internal error: replay diverged from the recorded trace", file=sys.stderr)
            return EXIT_INTERNAL
        print(f"replay verified: {len(result.trace.episodes)} episodes reproduced")
    source = args.replay or args.config
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    trace_path = out_dir / "trace.jsonl"
    _write_artifact(
        trace_path, result.trace.to_jsonl(),
        _manifest("search", args, started, [source], [str(trace_path)]),
    )
    summary = {
        "format": "fusenas-search-result",
        "version": 1,
        "feasible": result.feasible,
        "episodes": len(result.trace.episodes),
        "phase_winners": {
            str(p): (None if a is None else {
                "num_blocks": a.num_blocks,
                "hidden_size": a.hidden_size,
                "intermediate_size": a.intermediate_size,
            })
            for p, a in result.trace.phase_winners.items()
        },
        "best": None if result.best is None else result.best.to_dict(),
    }
    best_path = out_dir / "best.json"
    _write_artifact(
        best_path, json.dumps(summary, indent=1) + "\n",
        _manifest("search", args, started, [source], [str(best_path)]),
    )
    if not result.feasible:
        print("infeasible: no sampled architecture satisfied the latency budget")
        return EXIT_INFEASIBLE
    best = result.best
    print(
        f"best architecture: L={best.arch.num_blocks} H={best.arch.hidden_size} "
        f"I={best.arch.intermediate_size} "
        f"(latency {best.latency_s * 1000.0:.2f} ms, reward {best.reward:.4f})"
    )
    return EXIT_OK


def cmd_report(args) -> int:
    started = time.time()
    trace = SearchTrace.from_jsonl(Path(args.trace).read_text(), where=args.trace)
    if not trace.episodes:
        print("no episodes")
        return EXIT_OK
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    lines = ["episode\tphase\treward\tlatency_ms\taccuracy"]
    for i, ep in enumerate(trace.episodes):
        acc = "" if ep.accuracy is None else f"{ep.accuracy:.5f}"
        lines.append(
            f"{i}\t{ep.phase}\t{ep.reward:.6f}\t{ep.latency_s * 1000.0:.3f}\t{acc}"
        )
    curve_path = out_dir / "reward_curve.tsv"
    _write_artifact(
        curve_path, "\n".join(lines) + "\n",
        _manifest("report", args, started, [args.trace], [str(curve_path)]),
    )

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(8, 4))
    rewards = [ep.reward for ep in trace.episodes]
    ax.plot(rewards, lw=0.8, label="episode reward")
    best_so_far = []
    cur = -math.inf
    for ep in trace.episodes:
        if not ep.terminated_early:
            cur = max(cur, ep.reward)
        best_so_far.append(cur if math.isfinite(cur) else None)
    ax.plot(best_so_far, lw=1.6, label="best so far")
    for phase in (2,):
        firsts = [i for i, ep in enumerate(trace.episodes) if ep.phase == phase]
        if firsts:
            ax.axvline(firsts[0], color="gray", ls="--", lw=0.8)
    ax.set_xlabel("episode")
    ax.set_ylabel("reward")
    ax.legend()
    fig.tight_layout()
    plot_path = out_dir / "reward_curve.png"
    fig.savefig(plot_path, dpi=120)
    plt.close(fig)

    by_phase: dict[int, list] = {}
    for ep in trace.episodes:
        by_phase.setdefault(ep.phase, []).append(ep)
    for phase, eps in sorted(by_phase.items()):
        usable = [e for e in eps if not e.terminated_early]
        if not usable:
            print(f"phase {phase}: {len(eps)} episodes, none feasible")
            continue
        best = max(usable, key=lambda e: e.reward)
        print(
            f"phase {phase}: {len(eps)} episodes, best reward {best.reward:.4f} "
            f"at L={best.arch.num_blocks} H={best.arch.hidden_size} "
            f"I={best.arch.intermediate_size}"
        )
    print(f"wrote {curve_path} and {plot_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fusenas",
        description="Transformer graph fusion, latency modeling, and architecture search",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build", help="build a transformer inference graph")
    p.add_argument("--blocks", "-L", type=int, required=True)
    p.add_argument("--hidden", "-H", type=int, required=True)
    p.add_argument("--intermediate", "-I", type=int, default=None,
                   help="feed-forward width (default 4*hidden)")
    p.add_argument("--seq", type=int, default=128)
    p.add_argument("--vocab", type=int, default=30522)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("fuse", help="run layer fusion over a graph")
    p.add_argument("graph")
    p.add_argument("--out", required=True)
    p.add_argument("--report", default=None, help="also write the fusion report JSON")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("estimate", help="estimate latency of a graph or fused graph")
    p.add_argument("graph")
    p.add_argument("--profile", required=True, help="profile name or path")
    p.add_argument("--tuning", default=None)
    p.add_argument("--json", action="store_true", help="print the full JSON estimate")
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("tune", help="GA-tune schedule parameters")
    p.add_argument("graph")
    p.add_argument("--profile", required=True)
    p.add_argument("--population", type=int, default=16)
    p.add_argument("--generations", type=int, default=20)
    p.add_argument("--mutation", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("calibrate", help="fit a device profile to measured latencies")
    p.add_argument("--template", required=True, help="profile holding the fixed penalties")
    p.add_argument("--observations", required=True, help="CSV: flops,intermediate_bytes,block_count,measured_ms")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("search", help="run the two-phase architecture search")
    p.add_argument("config", nargs="?", default=None)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--replay", default=None,
                   help="re-run from a recorded trace and verify it reproduces")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("report", help="summarize a search trace")
    p.add_argument("trace")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UserError, ParseError, ConfigurationError, CalibrationError,
            TuningError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except Exception as exc:  # pragma: no cover - internal faults
        print(f"internal error: {exc!r}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
