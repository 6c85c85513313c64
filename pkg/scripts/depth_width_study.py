"""Reproduce the depth-vs-width tradeoff picture at desk scale.

For a grid of (depth, hidden) pairs, prints the surrogate accuracy next to
the tuned fused-latency estimate under the bundled CPU profile, and marks
the same-compute anchor pairs where the deep-and-narrow member wins on
accuracy. Run from the repository root:

    python scripts/depth_width_study.py [--task MRPC]
"""

from __future__ import annotations

import argparse

from fusenas.fusion import fuse
from fusenas.graph_ir import ArchitectureConfig, build_bert_graph, flops
from fusenas.perf_model import estimate_latency, exhaustive_tune
from fusenas.profiles import load_profile
from fusenas.search import ANCHOR_PAIRS, surrogate_accuracy

GRID = [
    (12, 768), (7, 1024),
    (12, 512), (6, 768),
    (10, 512), (5, 768),
    (24, 256), (6, 512),
]


def main() -> None:
    parser = argparse.ArgumentParser()
    parser.add_argument("--task", default="MRPC", choices=["MRPC", "STS-B", "RTE"])
    parser.add_argument("--seq", type=int, default=128)
    args = parser.parse_args()

    device = load_profile("cpu")
    print(f"task {args.task}, sequence length {args.seq}, profile {device.name}\n")
    print("depth  hidden  GFLOPs  accuracy  tuned latency")
    rows = {}
    for depth, hidden in GRID:
        arch = ArchitectureConfig(depth, hidden, 4 * hidden, seq_len=args.seq)
        graph = build_bert_graph(arch)
        fused, _ = fuse(graph)
        tuned = exhaustive_tune(fused, device)
        latency = estimate_latency(fused, device, tuned).total_s
        acc = surrogate_accuracy(arch, args.task)
        rows[(depth, hidden)] = (acc, latency)
        print(
            f"{depth:>5}  {hidden:>6}  {flops(graph) / 1e9:6.2f}  {acc:8.4f}"
            f"  {latency * 1000:9.2f} ms"
        )

    print("\nsame-compute pairs (deep-narrow vs shallow-wide):")
    for deep, shallow in ANCHOR_PAIRS:
        a, b = rows[deep][0], rows[shallow][0]
        mark = "deep wins" if a > b else "shallow wins"
        print(f"  L{deep[0]}/H{deep[1]} {a:.4f}  vs  L{shallow[0]}/H{shallow[1]} {b:.4f}  -> {mark}")


if __name__ == "__main__":
    main()
