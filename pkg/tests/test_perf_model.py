import json

import numpy as np
import pytest

from fusenas.fusion import Expr, FusedBlock, fuse
from fusenas.graph_ir import (
    ArchitectureConfig,
    CostReport,
    Graph,
    Node,
    OpKind,
    ParseError,
    TensorSpec,
    build_bert_graph,
)
from fusenas.perf_model import (
    ByteBreakdown,
    CalibrationError,
    DeviceProfile,
    GAConfig,
    TuningConfig,
    TuningError,
    calibrate,
    default_tuning,
    enumerate_versions,
    estimate_latency,
    exhaustive_tune,
    ga_tune,
    lower,
    observations_from_csv,
    observations_to_csv,
    predict_from_report,
    tile_options,
    tuning_space_size,
    version_cost,
)
from fusenas.profiles import load_profile


def figure_block(m=4, n=8):
    """Mul-1 on an MxN matrix, Mul-2 on a 1xN row, then Add."""
    expr = Expr.op(
        OpKind.ADD,
        Expr.op(OpKind.MUL, Expr.leaf("in0"), Expr.leaf("in1")),
        Expr.op(OpKind.MUL, Expr.leaf("in2"), Expr.leaf("in3")),
    )
    shapes = {"in0": (m, n), "in1": (m, n), "in2": (1, n), "in3": (1, n)}
    block = FusedBlock("fused.fig", expr, tuple(shapes), (m, n), None)
    return block, shapes


def figure_nest(m=4, n=8):
    block, shapes = figure_block(m, n)
    return lower(block, shapes.__getitem__)


def version_totals(nest, device):
    out = {}
    for v in enumerate_versions(nest):
        nc = sum(r.bytes for r in nest.reads if r.ref in v.noncontiguous_refs)
        rest = sum(r.bytes for r in nest.reads) - nc + nest.output_bytes
        c, mem = version_cost(v, device, ByteBreakdown(rest, nc, 0), nest.useful_flops)
        out[v.id] = max(c, mem)
    return out


class TestLower:
    def test_figure_example_nest(self):
        nest = figure_nest()
        assert nest.loops == (("i0", 4), ("i1", 8))
        assert len(nest.markers) == 1
        marker = nest.markers[0]
        assert marker.ops_per_point == 1.0
        assert marker.missing_axes == (0,)
        assert marker.free_axes == (1,)

    def test_elementwise_only_block_has_no_markers(self):
        expr = Expr.op(OpKind.MUL, Expr.leaf("a"), Expr.leaf("b"))
        shapes = {"a": (4, 8), "b": (4, 8)}
        nest = lower(FusedBlock("fused.ew", expr, ("a", "b"), (4, 8), None), shapes.__getitem__)
        assert nest.markers == ()

    def test_degenerate_single_row_marker_costs_nothing(self):
        nest = figure_nest(m=1)
        assert nest.markers  # marker still present
        versions = enumerate_versions(nest)
        assert all(v.redundant_flops == 0 for v in versions)

    def test_single_node_lowering(self):
        node = Node("m", OpKind.MATMUL, ("x", "w"), (3, 5))
        shapes = {"x": (3, 4), "w": (4, 5)}
        nest = lower(node, shapes.__getitem__)
        assert nest.useful_flops == 2 * 3 * 4 * 5
        assert nest.loops == (("i0", 3), ("i1", 5))


class TestVersions:
    def test_recompute_cost_hand_count(self):
        versions = enumerate_versions(figure_nest(m=4, n=8))
        recompute = next(v for v in versions if v.id == "recompute")
        assert recompute.redundant_flops == (4 - 1) * 8 * 1
        assert recompute.noncontiguous_refs == ()

    def test_permuted_flags_two_matrices(self):
        versions = enumerate_versions(figure_nest())
        permuted = next(v for v in versions if v.id == "permuted")
        assert permuted.redundant_flops == 0
        assert sorted(permuted.noncontiguous_refs) == ["in0", "in1"]

    def test_degenerate_versions_identical_cost_fields(self):
        versions = enumerate_versions(figure_nest(m=1))
        fields = {
            (v.redundant_flops, v.noncontiguous_refs) for v in versions
        }
        assert len(fields) == 1

    def test_markerless_nest_versions_have_zero_redundancy(self):
        expr = Expr.op(OpKind.EXP, Expr.leaf("a"))
        nest = lower(
            FusedBlock("fused.e", expr, ("a",), (4, 4), None), {"a": (4, 4)}.__getitem__
        )
        assert all(v.redundant_flops == 0 for v in enumerate_versions(nest))
        assert len(enumerate_versions(nest)) >= 2


class TestVersionCost:
    def test_pure_copy_block_costs_no_compute(self):
        expr = Expr.op(OpKind.RESHAPE, Expr.leaf("a"), shape=(16,))
        nest = lower(
            FusedBlock("fused.c", expr, ("a",), (16,), None), {"a": (4, 4)}.__getitem__
        )
        dev = DeviceProfile("d", 1e9, 1e9)
        v = enumerate_versions(nest)[0]
        compute_s, _ = version_cost(v, dev, ByteBreakdown(128, 0, 0), nest.useful_flops)
        assert compute_s == 0.0

    def test_noncontiguous_penalty_linearity(self):
        base = DeviceProfile("d", 1e9, 1e9, noncontiguous_penalty=2.0)
        double = DeviceProfile("d", 1e9, 1e9, noncontiguous_penalty=4.0)
        v = enumerate_versions(figure_nest())[1]
        data = ByteBreakdown(contiguous=100.0, noncontiguous=50.0, intermediate=0.0)
        _, m1 = version_cost(v, base, data, 0)
        _, m2 = version_cost(v, double, data, 0)
        assert m2 - m1 == pytest.approx(2.0 * 50.0 / 1e9)

    def test_duality_under_bundled_profiles(self):
        nest = figure_nest()
        bw_scarce = load_profile("bw_scarce")
        compute_scarce = load_profile("compute_scarce")
        costs_bw = version_totals(nest, bw_scarce)
        costs_fl = version_totals(nest, compute_scarce)
        assert costs_bw["recompute"] < costs_bw["permuted"]
        assert costs_fl["permuted"] < costs_fl["recompute"]


class TestEstimateLatency:
    def test_trivial_roofline_combination(self):
        dev = DeviceProfile("d", peak_flops_per_s=1.0, mem_bandwidth_bytes_per_s=1.0,
                            per_block_overhead_s=0.5, intermediate_penalty=1.0,
                            cache_discount=0.0)
        # one unit: compute 2s (2 flops), memory 3s (3 bytes)... use a direct
        # breakdown check instead of synthesizing exact byte counts
        est = estimate_latency(
            Graph(
                nodes=(Node("e", OpKind.EXP, ("x",), (1, 2)),),
                inputs=(TensorSpec("x", (1, 2)),),
                weights=(),
                outputs=("e",),
            ),
            dev,
        )
        unit = est.per_block[0]
        assert est.total_s == pytest.approx(max(unit.compute_s, unit.memory_s) + 0.5)

    def test_roofline_identity_on_breakdowns(self):
        g = build_bert_graph(ArchitectureConfig(1, 256, 1024, seq_len=8, vocab_size=64))
        dev = load_profile("cpu")
        est = estimate_latency(g, dev)
        total = sum(max(b.compute_s, b.memory_s) + b.overhead_s for b in est.per_block)
        assert est.total_s == pytest.approx(total)

    def test_fused_strictly_faster_than_unfused(self):
        g = build_bert_graph(ArchitectureConfig(2, 256, 1024, seq_len=16, vocab_size=64))
        fused, _ = fuse(g)
        dev = load_profile("cpu")
        assert estimate_latency(fused, dev).total_s < estimate_latency(g, dev).total_s

    def test_table_crossover_under_bundled_profiles(self):
        cpu, gpu = load_profile("cpu"), load_profile("gpu")
        g = build_bert_graph(ArchitectureConfig(6, 768, 3072, seq_len=128))
        fused, _ = fuse(g)
        unf_c = estimate_latency(g, cpu).total_s
        unf_g = estimate_latency(g, gpu).total_s
        fus_c = estimate_latency(fused, cpu, exhaustive_tune(fused, cpu)).total_s
        fus_g = estimate_latency(fused, gpu, exhaustive_tune(fused, gpu)).total_s
        assert unf_g > unf_c
        assert fus_g < fus_c

    def test_missing_block_in_tuning(self):
        g = build_bert_graph(ArchitectureConfig(1, 256, 1024, seq_len=4, vocab_size=16))
        dev = load_profile("cpu")
        with pytest.raises(TuningError, match="cover"):
            estimate_latency(g, dev, TuningConfig(genes=()))

    def test_deterministic(self):
        g = build_bert_graph(ArchitectureConfig(1, 256, 1024, seq_len=8, vocab_size=64))
        dev = load_profile("cpu")
        assert estimate_latency(g, dev).total_s == estimate_latency(g, dev).total_s


def single_block_graph():
    """A graph whose fused form is one block with 2 versions."""
    g = Graph(
        nodes=(
            Node("mm", OpKind.MATMUL, ("x", "w"), (4, 8)),
            Node("row", OpKind.ADD, ("mm", "bias"), (4, 8)),
        ),
        inputs=(TensorSpec("x", (4, 4)),),
        weights=(TensorSpec("w", (4, 8)), TensorSpec("bias", (1, 8))),
        outputs=("row",),
    )
    fused, _ = fuse(g)
    assert len(fused.blocks) == 1 and not fused.nodes
    return fused


class TestGATune:
    def test_small_space_matches_exhaustive_all_seeds(self):
        fused = single_block_graph()
        dev = load_profile("cpu")
        space = tuning_space_size(fused, dev)
        assert space <= 64
        best = estimate_latency(fused, dev, exhaustive_tune(fused, dev)).total_s
        for seed in range(10):
            tuned = ga_tune(fused, dev, GAConfig(population=8, generations=5, seed=seed))
            assert estimate_latency(fused, dev, tuned).total_s == pytest.approx(best)

    def test_space_of_size_one(self):
        # a single elementwise node: both versions identical, tile=1 only
        g = Graph(
            nodes=(Node("e", OpKind.EXP, ("x",), (1, 1)),),
            inputs=(TensorSpec("x", (1, 1)),),
            weights=(),
            outputs=("e",),
        )
        dev = load_profile("cpu")
        tuned = ga_tune(g, dev, GAConfig(population=2, generations=0, seed=0))
        assert len(tuned.genes) == 1

    def test_deterministic_given_seed(self):
        fused = single_block_graph()
        dev = load_profile("cpu")
        cfg = GAConfig(population=6, generations=8, seed=123)
        assert ga_tune(fused, dev, cfg) == ga_tune(fused, dev, cfg)

    def test_never_worse_than_default(self):
        g = build_bert_graph(ArchitectureConfig(1, 256, 1024, seq_len=8, vocab_size=64))
        fused, _ = fuse(g)
        dev = load_profile("cpu")
        default = estimate_latency(fused, dev, default_tuning(fused)).total_s
        for seed in (0, 1, 2):
            tuned = ga_tune(fused, dev, GAConfig(population=4, generations=3, seed=seed))
            assert estimate_latency(fused, dev, tuned).total_s <= default + 1e-15

    def test_population_lower_bound(self):
        with pytest.raises(ValueError):
            GAConfig(population=1)

    def test_best_monotone_in_generations(self):
        # elitism: with a shared seed, the evolution path is a prefix, so
        # more generations can only improve the returned tuning
        g = build_bert_graph(ArchitectureConfig(1, 256, 1024, seq_len=8, vocab_size=64))
        fused, _ = fuse(g)
        dev = load_profile("cpu")
        results = [
            estimate_latency(
                fused, dev,
                ga_tune(fused, dev, GAConfig(population=6, generations=gens, seed=3)),
            ).total_s
            for gens in (1, 3, 6, 10)
        ]
        assert all(a >= b - 1e-15 for a, b in zip(results, results[1:]))

    def test_empty_graph_has_no_tuning_space(self):
        g = Graph(nodes=(), inputs=(TensorSpec("x", (2, 2)),), weights=(), outputs=())
        with pytest.raises(TuningError):
            ga_tune(g, load_profile("cpu"), GAConfig(population=2, generations=1))

    def test_larger_space_within_five_percent(self):
        g = build_bert_graph(ArchitectureConfig(1, 256, 1024, seq_len=8, vocab_size=64))
        fused, _ = fuse(g)
        dev = load_profile("cpu")
        best = estimate_latency(fused, dev, exhaustive_tune(fused, dev)).total_s
        hits = 0
        for seed in range(10):
            tuned = ga_tune(fused, dev, GAConfig(population=16, generations=12, seed=seed))
            if estimate_latency(fused, dev, tuned).total_s <= best * 1.05:
                hits += 1
        assert hits >= 9


class TestCalibrate:
    def make_observations(self, profile):
        rows = []
        for f, ib, bc in (
            (22_000_000_000, 300_000_000, 400),
            (11_000_000_000, 160_000_000, 220),
            (4_600_000_000, 80_000_000, 120),
        ):
            rep = CostReport(f, ib, 0, 0)
            rows.append((rep, bc, predict_from_report(profile, rep, bc)))
        return rows

    def test_round_trip_recovery_within_one_percent(self):
        true = DeviceProfile("true", 1.3e11, 2.1e10, per_block_overhead_s=3e-5)
        template = DeviceProfile("tmpl", 1e11, 1e10, per_block_overhead_s=1e-5,
                                 intermediate_penalty=true.intermediate_penalty)
        fitted, residuals = calibrate(template, self.make_observations(true))
        assert fitted.peak_flops_per_s == pytest.approx(true.peak_flops_per_s, rel=0.01)
        assert fitted.mem_bandwidth_bytes_per_s == pytest.approx(
            true.mem_bandwidth_bytes_per_s, rel=0.01
        )
        assert fitted.per_block_overhead_s == pytest.approx(
            true.per_block_overhead_s, rel=0.01
        )
        assert max(abs(r) for r in residuals) < 1e-3

    def test_duplicate_observations_do_not_reweight(self):
        true = DeviceProfile("true", 1.3e11, 2.1e10, per_block_overhead_s=3e-5)
        template = DeviceProfile("tmpl", 1e11, 1e10)
        obs = self.make_observations(true)
        a, _ = calibrate(template, obs)
        b, _ = calibrate(template, obs + [obs[0], obs[1]])
        assert a == b

    def test_too_few_observations(self):
        true = DeviceProfile("true", 1e11, 1e10)
        with pytest.raises(CalibrationError):
            calibrate(true, self.make_observations(true)[:2])

    def test_degenerate_system(self):
        rep = CostReport(1_000_000, 1_000, 0, 0)
        rows = [(rep, 10, 0.5)] * 3
        # identical rows collapse to one observation
        with pytest.raises(CalibrationError):
            calibrate(DeviceProfile("t", 1e11, 1e10), rows)

    def test_observation_csv_round_trip(self):
        true = DeviceProfile("true", 1.3e11, 2.1e10)
        rows = self.make_observations(true)
        text = observations_to_csv(rows)
        parsed = observations_from_csv(text)
        assert [(r.flops, r.intermediate_bytes, b) for r, b, _ in parsed] == [
            (r.flops, r.intermediate_bytes, b) for r, b, _ in rows
        ]
        for (_, _, s1), (_, _, s2) in zip(parsed, rows):
            assert s1 == pytest.approx(s2)

    def test_csv_errors_carry_location(self):
        with pytest.raises(ParseError, match=":1"):
            observations_from_csv("1,2,3\n")


class TestProfiles:
    def test_bundled_profiles_parse(self):
        for name in ("cpu", "gpu", "bw_scarce", "compute_scarce"):
            profile = load_profile(name)
            assert profile.noncontiguous_penalty >= 1
            assert profile.intermediate_penalty >= 1

    def test_profile_version_refused(self, tmp_path):
        doc = load_profile("cpu").to_dict()
        doc["version"] = 42
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps(doc))
        with pytest.raises(ParseError, match="version"):
            load_profile(str(bad))

    def test_env_override_directory(self, tmp_path, monkeypatch):
        doc = load_profile("cpu").to_dict()
        doc["name"] = "patched"
        (tmp_path / "cpu.json").write_text(json.dumps(doc))
        monkeypatch.setenv("FUSENAS_PROFILE_DIR", str(tmp_path))
        assert load_profile("cpu").name == "patched"

    def test_invalid_penalties_rejected(self):
        with pytest.raises(ValueError):
            DeviceProfile("d", 1e9, 1e9, noncontiguous_penalty=0.5)

    def test_tile_options_powers_of_two_plus_cap(self):
        nest = figure_nest(m=4, n=12)
        opts = tile_options(nest)
        assert opts == (1, 2, 4, 8, 12)
