"""Derive the bundled CPU/GPU device profiles.

Fits peak FLOPs, bandwidth, and per-unit overhead per device so that the
roofline estimator reproduces the published latencies of three reference
models both with and without layer fusion (six targets, three parameters),
then verifies the orderings the profiles must preserve: fused speedup
ratios and the unfused-GPU-slower / fused-GPU-faster crossover. Fused
latencies use the tuned schedule (the per-unit exhaustive optimum, which is
what the GA converges to). Run from the repository root:

    python scripts/derive_profiles.py [--write]
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path

import numpy as np
from scipy.optimize import least_squares

from fusenas.fusion import fuse
from fusenas.graph_ir import ArchitectureConfig, build_bert_graph
from fusenas.perf_model import (
    DeviceProfile,
    estimate_latency,
    exhaustive_tune,
    _build_models,
)

# (architecture, fused ms CPU, GPU, unfused ms CPU, GPU)
REFERENCE_MODELS = [
    (ArchitectureConfig(12, 768, 3072), 196.0, 147.0, 276.0, 412.0),
    (ArchitectureConfig(6, 768, 3072), 105.0, 86.0, 157.0, 237.0),
    (ArchitectureConfig(21, 256, 1024), 49.0, 45.0, 89.0, 152.0),
]

CPU_PENALTIES = dict(noncontiguous_penalty=1.5, intermediate_penalty=1.2)
GPU_PENALTIES = dict(noncontiguous_penalty=2.0, intermediate_penalty=2.5)


def version_table(target, penalties):
    """Per-unit, per-version (flops, weighted bytes) with the tile-1 cache
    discount applied to noncontiguous traffic (always attainable)."""
    rows = []
    for m in _build_models(target):
        per_version = []
        for v in m.versions:
            flagged = set(v.noncontiguous_refs)
            contiguous = noncontiguous = intermediate = 0.0
            classes = dict(m.read_class)
            for acc in m.nest.reads:
                if acc.ref in flagged:
                    noncontiguous += acc.bytes
                elif classes.get(acc.ref) == "intermediate":
                    intermediate += acc.bytes
                else:
                    contiguous += acc.bytes
            if m.output_intermediate:
                intermediate += m.nest.output_bytes
            else:
                contiguous += m.nest.output_bytes
            weighted = (
                contiguous
                + penalties["noncontiguous_penalty"] * noncontiguous * (1 - 0.3)
                + penalties["intermediate_penalty"] * intermediate
            )
            per_version.append((m.nest.useful_flops + v.redundant_flops, weighted))
        rows.append(per_version)
    flops = np.array([[v[0] for v in r] for r in rows])
    bytes_ = np.array([[v[1] for v in r] for r in rows])
    return flops, bytes_


def fast_latency(flops, bytes_, peak, bw, oh):
    per_version = np.maximum(flops / peak, bytes_ / bw)
    return per_version.min(axis=1).sum() + flops.shape[0] * oh


def fit_device(tables, targets_ms, penalties, name, x0, weights=None):
    weights = weights or [1.0] * len(targets_ms)

    def profile(x):
        log_p, log_bw, log_oh = x
        return DeviceProfile(
            name,
            peak_flops_per_s=float(np.exp(log_p)),
            mem_bandwidth_bytes_per_s=float(np.exp(log_bw)),
            per_block_overhead_s=float(np.exp(log_oh)),
            cache_bytes=1 << 20,
            cache_discount=0.3,
            **penalties,
        )

    def residuals(x, w=True):
        p, bw, oh = np.exp(x)
        preds = [fast_latency(f, b, p, bw, oh) * 1000 for f, b in tables]
        scale = weights if w else [1.0] * len(targets_ms)
        return [s * (pred / t - 1.0) for s, pred, t in zip(scale, preds, targets_ms)]

    fit = least_squares(residuals, x0, method="lm")
    return profile(fit.x), residuals(fit.x, w=False)


def main() -> None:
    parser = argparse.ArgumentParser()
    parser.add_argument("--write", action="store_true", help="write profiles into the package")
    args = parser.parse_args()

    graphs = []
    for arch, *_ in REFERENCE_MODELS:
        g = build_bert_graph(arch)
        fused, _ = fuse(g)
        graphs.append((g, fused))

    for name, penalties, fused_col, unfused_col, x0 in (
        ("cpu", CPU_PENALTIES, 1, 3, np.log([1.5e11, 2.0e10, 5e-5])),
        ("gpu", GPU_PENALTIES, 2, 4, np.log([2.0e11, 1.5e10, 1e-4])),
    ):
        tables = []
        targets = []
        for row, (g, fused) in zip(REFERENCE_MODELS, graphs):
            tables.append(version_table(fused, penalties))
            targets.append(row[fused_col])
        for row, (g, fused) in zip(REFERENCE_MODELS, graphs):
            tables.append(version_table(g, penalties))
            targets.append(row[unfused_col])
        # The fused rows carry the orderings the bundled profiles must keep.
        dev, res = fit_device(
            tables, targets, penalties, name, x0, weights=[3, 3, 3, 1, 1, 1]
        )
        print(f"{name}: {json.dumps(dev.to_dict(), indent=2)}")
        print("residuals:", [f"{r:+.2%}" for r in res])
        if name == "cpu":
            cpu = dev
        else:
            gpu = dev

    print("\nverification with the real estimator (tuned fused):")
    print("model      unfC    fusC    unfG    fusG    targets")
    for (arch, fc, fg, uc, ug), (g, fused) in zip(REFERENCE_MODELS, graphs):
        lat = {}
        for tag, target, dev in (("uc", g, cpu), ("ug", g, gpu)):
            lat[tag] = estimate_latency(target, dev).total_s * 1000
        for tag, dev in (("fc", cpu), ("fg", gpu)):
            tuned = exhaustive_tune(fused, dev)
            lat[tag] = estimate_latency(fused, dev, tuned).total_s * 1000
        name = f"L{arch.num_blocks}/H{arch.hidden_size}"
        cross = lat["ug"] > lat["uc"] and lat["fg"] < lat["fc"]
        print(
            f"{name:<10} {lat['uc']:6.1f}  {lat['fc']:6.1f}  {lat['ug']:6.1f}  {lat['fg']:6.1f}"
            f"  ({uc}/{fc}/{ug}/{fg})  speedups {lat['uc']/lat['fc']:.2f}x/"
            f"{lat['ug']/lat['fg']:.2f}x  crossover {'OK' if cross else 'FAIL'}"
        )

    if args.write:
        pkg = Path(__file__).resolve().parents[1] / "src" / "fusenas" / "profiles"
        (pkg / "cpu.json").write_text(json.dumps(cpu.to_dict(), indent=2) + "\n")
        (pkg / "gpu.json").write_text(json.dumps(gpu.to_dict(), indent=2) + "\n")
        print(f"\nwrote {pkg}/cpu.json and gpu.json")


if __name__ == "__main__":
    main()
