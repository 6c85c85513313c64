"""End-to-end walkthrough of the pipeline on one architecture.

Builds a graph, fuses it, compares latency estimates before/after fusion and
before/after GA tuning on both bundled device profiles, then runs the demo
architecture search. Artifacts land in ./demo_out. Run from the repository
root:

    python scripts/run_demo.py
"""

from __future__ import annotations

from pathlib import Path

from fusenas.cli import main

OUT = Path("demo_out")


def sh(*argv: str) -> None:
    print(f"\n$ fusenas {' '.join(argv)}")
    rc = main(list(argv))
    if rc not in (0, 3):
        raise SystemExit(rc)


def run() -> None:
    OUT.mkdir(exist_ok=True)
    graph = OUT / "bert_base.json"
    fused = OUT / "bert_base.fused.json"
    sh("build", "-L", "12", "-H", "768", "--seq", "128", "--out", str(graph))
    sh("fuse", str(graph), "--out", str(fused), "--report", str(OUT / "fusion_report.json"))
    for profile in ("cpu", "gpu"):
        sh("estimate", str(graph), "--profile", profile)
        sh("estimate", str(fused), "--profile", profile)
    tuning = OUT / "tuning.json"
    sh("tune", str(fused), "--profile", "cpu", "--population", "12",
       "--generations", "8", "--seed", "0", "--out", str(tuning))
    sh("estimate", str(fused), "--profile", "cpu", "--tuning", str(tuning))
    sh("search", "configs/demo_search.json", "--out-dir", str(OUT / "search"))
    sh("report", str(OUT / "search" / "trace.jsonl"), "--out-dir", str(OUT / "report"))


if __name__ == "__main__":
    run()
