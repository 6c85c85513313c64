"""Code-generation cost model: loop nests, schedule versions, GA autotuning.

Latency here is modeled, not measured. Each executable unit (fused block or
surviving node) lowers to a loop nest over its output axes. Subexpressions
that do not depend on every loop axis get a redundancy marker; these are the
fuse-in-place loops where the compiler must choose between

  version A (recompute): original loop order, marked subexpressions
      re-evaluated on every outer iteration, all accesses contiguous;
  version B (permuted):  the marker's free axes rotated outward so the
      subexpression is computed once per point, at the price of column-major
      access to every full-rank operand.

Neither version dominates; a device profile decides. Per-unit latency is the
roofline combination max(compute_s, memory_s) plus a fixed dispatch
overhead, where

  compute_s = (useful + redundant) FLOPs / peak_flops
  memory_s  = (contiguous + nc_penalty*noncontiguous
               + intermediate_penalty*intermediate bytes) / bandwidth.

Inter-unit tensors are the "intermediate" class: the traffic layer fusion
removes, and the reason an unfused deep model can run slower on a GPU with a
thin cache hierarchy than on a CPU.

Tiling and unrolling act only through cache residency: when a tile's working
set (tile^2 * unroll elements) fits the profile's cache, noncontiguous bytes
are discounted by the profile's cache_discount. Redundancy analysis is
conservative: nests containing rank-changing views or transposes are costed
without markers.

The GA tuner works on per-unit gene tables (version, tile, unroll), with
elitism, tournament selection, uniform crossover, and per-chromosome RNG
streams split from the seed so that evaluating a generation concurrently
cannot change the result. The default configuration is seeded into the
population, so the tuner never returns something worse than the default.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import least_squares

from .fusion import Expr, FusedBlock, FusedGraph, trivial_fused
from .graph_ir import (
    ELEMENT_BYTES,
    CostReport,
    Graph,
    Node,
    OpKind,
    ParseError,
    Shape,
    node_flops,
)

PROFILE_FORMAT = "fusenas-device-profile"
TUNING_FORMAT = "fusenas-tuning"
FORMAT_VERSION = 1

UNROLL_FACTORS = (1, 2, 4, 8)


class LoweringError(ValueError):
    """A block contains an access pattern the nest model cannot express."""


class TuningError(ValueError):
    """Tuning configuration does not cover the graph or is out of range."""


class CalibrationError(ValueError):
    """The observation system is degenerate."""


# ---------------------------------------------------------------------------
# Device profiles
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DeviceProfile:
    name: str
    peak_flops_per_s: float
    mem_bandwidth_bytes_per_s: float
    noncontiguous_penalty: float = 1.5
    intermediate_penalty: float = 1.2
    per_block_overhead_s: float = 1e-5
    cache_bytes: int = 1 << 20
    cache_discount: float = 0.3

    def __post_init__(self) -> None:
        if self.peak_flops_per_s <= 0 or self.mem_bandwidth_bytes_per_s <= 0:
            raise ValueError("throughput parameters must be positive")
        if self.noncontiguous_penalty < 1 or self.intermediate_penalty < 1:
            raise ValueError("penalties must be >= 1")
        if self.per_block_overhead_s < 0 or self.cache_bytes <= 0:
            raise ValueError("overhead/cache must be nonnegative/positive")
        if not (0 <= self.cache_discount < 1):
            raise ValueError("cache_discount must be in [0, 1)")

    def to_dict(self) -> dict:
        return {
            "format": PROFILE_FORMAT,
            "version": FORMAT_VERSION,
            "name": self.name,
            "peak_flops_per_s": self.peak_flops_per_s,
            "mem_bandwidth_bytes_per_s": self.mem_bandwidth_bytes_per_s,
            "noncontiguous_penalty": self.noncontiguous_penalty,
            "intermediate_penalty": self.intermediate_penalty,
            "per_block_overhead_s": self.per_block_overhead_s,
            "cache_bytes": self.cache_bytes,
            "cache_discount": self.cache_discount,
        }

    @staticmethod
    def from_dict(doc: dict, where: str = "<profile>") -> "DeviceProfile":
        if doc.get("format") != PROFILE_FORMAT:
            raise ParseError(f"{where}: not a {PROFILE_FORMAT} document")
        if doc.get("version") != FORMAT_VERSION:
            raise ParseError(f"{where}: unsupported version {doc.get('version')!r}")
        fields = {k: doc[k] for k in (
            "name", "peak_flops_per_s", "mem_bandwidth_bytes_per_s",
            "noncontiguous_penalty", "intermediate_penalty",
            "per_block_overhead_s", "cache_bytes", "cache_discount",
        )}
        return DeviceProfile(**fields)


# ---------------------------------------------------------------------------
# Loop nests and redundancy markers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TensorAccess:
    ref: str
    bytes: int
    matrix_like: bool      # >= 2 axes with extent > 1
    last_axis: int | None  # loop axis the fastest storage dimension maps to


@dataclass(frozen=True)
class RedundancyMarker:
    ops_per_point: float
    free_axes: tuple[int, ...]
    missing_axes: tuple[int, ...]


@dataclass(frozen=True)
class LoopNest:
    unit_id: str
    loops: tuple[tuple[str, int], ...]
    reads: tuple[TensorAccess, ...]
    output_bytes: int
    useful_flops: int
    markers: tuple[RedundancyMarker, ...]

    def extent(self, axis: int) -> int:
        return self.loops[axis][1]


@dataclass(frozen=True)
class ScheduleVersion:
    id: str
    loop_order: tuple[int, ...]
    recompute: bool
    redundant_flops: float
    noncontiguous_refs: tuple[str, ...]


@dataclass(frozen=True)
class ByteBreakdown:
    contiguous: float
    noncontiguous: float
    intermediate: float


def _aligned_free_axes(shape: Shape, rank: int) -> frozenset[int] | None:
    if len(shape) > rank:
        return None
    pad = rank - len(shape)
    return frozenset(i + pad for i, d in enumerate(shape) if d > 1)


def _expr_shape_cached(expr: Expr, shape_of, cache: dict) -> Shape:
    from .fusion import _expr_shape

    key = id(expr)
    if key not in cache:
        cache[key] = _expr_shape(expr, shape_of)
    return cache[key]


def _subtree_flops(expr: Expr, shape_of, cache) -> int:
    if expr.kind is None:
        return 0
    shapes = [_expr_shape_cached(c, shape_of, cache) for c in expr.children]
    own = node_flops(
        Node("_", expr.kind, (), _expr_shape_cached(expr, shape_of, cache), expr.attrs),
        shapes,
    )
    return own + sum(_subtree_flops(c, shape_of, cache) for c in expr.children)


def lower(block: FusedBlock | Node, shape_of) -> LoopNest:
    """Lower an executable unit to a loop nest over its output axes."""
    if isinstance(block, FusedBlock):
        unit_id, expr, out_shape = block.id, block.expr, block.shape
    else:
        expr = Expr(
            kind=block.kind,
            children=tuple(Expr.leaf(r) for r in block.inputs),
            attrs=block.attrs,
        )
        unit_id, out_shape = block.id, block.shape

    rank = len(out_shape)
    loops = tuple((f"i{k}", out_shape[k]) for k in range(rank))
    cache: dict = {}

    reads = []
    seen = set()
    analyzable = True

    def walk_reads(e: Expr) -> None:
        nonlocal analyzable
        if e.kind is None:
            if e.ref in seen:
                return
            seen.add(e.ref)
            shape = shape_of(e.ref)
            free = _aligned_free_axes(shape, rank)
            if free is None:
                analyzable = False
                matrix_like, last = False, None
            else:
                eff = sorted(free)
                matrix_like = len(eff) >= 2
                last = eff[-1] if eff else None
            reads.append(
                TensorAccess(
                    ref=e.ref,
                    bytes=math.prod(shape) * ELEMENT_BYTES,
                    matrix_like=matrix_like,
                    last_axis=last,
                )
            )
            return
        if e.kind is OpKind.TRANSPOSE and e.attr("perm") != tuple(range(rank)):
            analyzable = False
        for c in e.children:
            walk_reads(c)

    walk_reads(expr)

    markers: list[RedundancyMarker] = []

    def axis_split(e: Expr) -> tuple[frozenset[int], frozenset[int]] | None:
        """(free, missing) loop axes of a subtree, trailing-aligned."""
        shape = _expr_shape_cached(e, shape_of, cache)
        if len(shape) > rank:
            return None
        pad = rank - len(shape)
        missing = frozenset(range(pad)) | frozenset(
            i + pad for i, d in enumerate(shape) if d == 1
        )
        return frozenset(range(rank)) - missing, missing

    def find_markers(e: Expr) -> None:
        # Mark the highest subtree that skips loop axes; subtrees with no
        # free axis at all are loop-invariant and hoisted unconditionally.
        if e.kind is None:
            return
        split = axis_split(e)
        if split is None:
            return
        free, missing = split
        if missing and free:
            ops_total = _subtree_flops(e, shape_of, cache)
            if ops_total > 0:
                points = math.prod(out_shape[a] for a in sorted(free))
                markers.append(
                    RedundancyMarker(
                        ops_per_point=ops_total / points,
                        free_axes=tuple(sorted(free)),
                        missing_axes=tuple(sorted(missing)),
                    )
                )
            return  # the marked subtree is hoisted/recomputed whole
        if not free:
            return  # scalar subtree: loop-invariant code motion, no cost
        for c in e.children:
            find_markers(c)

    if analyzable:
        try:
            for c in expr.children or ():
                find_markers(c)
        except Exception as exc:
            raise LoweringError(f"{unit_id}: cannot analyze expression: {exc}") from exc

    return LoopNest(
        unit_id=unit_id,
        loops=loops,
        reads=tuple(reads),
        output_bytes=math.prod(out_shape) * ELEMENT_BYTES,
        useful_flops=_subtree_flops(expr, shape_of, cache),
        markers=tuple(markers),
    )


def enumerate_versions(nest: LoopNest) -> list[ScheduleVersion]:
    """Recompute and permuted schedules for the nest.

    Without markers both schedules keep the natural loop order and cost the
    same; with markers version B rotates the dominant marker's free axes
    outward, zeroing redundant work but flagging full-rank reads whose
    storage order no longer matches the innermost loop.
    """
    rank = len(nest.loops)
    natural = tuple(range(rank))

    def marker_redundancy(m: RedundancyMarker) -> float:
        missing = math.prod(nest.extent(a) for a in m.missing_axes)
        present = math.prod(nest.extent(a) for a in m.free_axes)
        return (missing - 1) * present * m.ops_per_point

    redundant_a = sum(marker_redundancy(m) for m in nest.markers)
    version_a = ScheduleVersion(
        id="recompute",
        loop_order=natural,
        recompute=True,
        redundant_flops=redundant_a,
        noncontiguous_refs=(),
    )

    if not nest.markers:
        version_b = replace(version_a, id="permuted", recompute=False)
        return [version_a, version_b]

    dominant = max(nest.markers, key=marker_redundancy)
    hoisted = tuple(dominant.free_axes) + tuple(
        a for a in natural if a not in dominant.free_axes
    )
    innermost = hoisted[-1]
    flagged = tuple(
        r.ref
        for r in nest.reads
        if r.matrix_like and r.last_axis is not None and r.last_axis != innermost
        and nest.extent(innermost) > 1
    )
    version_b = ScheduleVersion(
        id="permuted",
        loop_order=hoisted,
        recompute=False,
        redundant_flops=0.0,
        noncontiguous_refs=flagged,
    )
    return [version_a, version_b]


# ---------------------------------------------------------------------------
# Costing
# ---------------------------------------------------------------------------

def version_cost(
    version: ScheduleVersion,
    device: DeviceProfile,
    data_bytes: ByteBreakdown,
    useful_flops: float,
) -> tuple[float, float]:
    """Roofline components for one scheduled unit."""
    compute_s = (useful_flops + version.redundant_flops) / device.peak_flops_per_s
    weighted = (
        data_bytes.contiguous
        + device.noncontiguous_penalty * data_bytes.noncontiguous
        + device.intermediate_penalty * data_bytes.intermediate
    )
    memory_s = weighted / device.mem_bandwidth_bytes_per_s
    return compute_s, memory_s


@dataclass(frozen=True)
class UnitBreakdown:
    unit_id: str
    compute_s: float
    memory_s: float
    overhead_s: float

    @property
    def total_s(self) -> float:
        return max(self.compute_s, self.memory_s) + self.overhead_s


@dataclass(frozen=True)
class LatencyEstimate:
    total_s: float
    per_block: tuple[UnitBreakdown, ...]


@dataclass(frozen=True)
class UnitGene:
    version_id: str
    tile: int
    unroll: int


@dataclass(frozen=True)
class TuningConfig:
    genes: tuple[tuple[str, UnitGene], ...]  # unit id -> gene

    def gene_map(self) -> dict[str, UnitGene]:
        return dict(self.genes)

    def to_dict(self) -> dict:
        return {
            "format": TUNING_FORMAT,
            "version": FORMAT_VERSION,
            "blocks": {
                uid: {"version": g.version_id, "tile": g.tile, "unroll": g.unroll}
                for uid, g in self.genes
            },
        }

    @staticmethod
    def from_dict(doc: dict, where: str = "<tuning>") -> "TuningConfig":
        if doc.get("format") != TUNING_FORMAT:
            raise ParseError(f"{where}: not a {TUNING_FORMAT} document")
        if doc.get("version") != FORMAT_VERSION:
            raise ParseError(f"{where}: unsupported version {doc.get('version')!r}")
        return TuningConfig(
            genes=tuple(
                sorted(
                    (uid, UnitGene(g["version"], int(g["tile"]), int(g["unroll"])))
                    for uid, g in doc["blocks"].items()
                )
            )
        )


def tile_options(nest: LoopNest) -> tuple[int, ...]:
    """Powers of two up to the widest loop, plus the full extent (the cap)."""
    extent = max((e for _, e in nest.loops), default=1)
    opts = []
    t = 1
    while t <= extent:
        opts.append(t)
        t *= 2
    if extent not in opts:
        opts.append(extent)
    return tuple(opts)


def _units(target: Graph | FusedGraph) -> tuple[FusedGraph, list[FusedBlock | Node]]:
    fused = target if isinstance(target, FusedGraph) else trivial_fused(target)
    units = [
        u
        for u in fused.schedule()
        if isinstance(u, FusedBlock) or u.kind not in (OpKind.CONSTANT, OpKind.INPUT)
    ]
    return fused, units


def _unit_id(unit: FusedBlock | Node) -> str:
    return unit.id


def _shape_env(fused: FusedGraph):
    graph = fused.graph
    nodes = graph.node_map()
    inputs = graph.input_map()
    weights = graph.weight_map()

    def shape_of(ref: str) -> Shape:
        if ref in nodes:
            return nodes[ref].shape
        if ref in inputs:
            return inputs[ref].shape
        if ref in weights:
            return weights[ref].shape
        raise KeyError(ref)

    return shape_of


@dataclass(frozen=True)
class _UnitModel:
    """Precomputed cost ingredients for one executable unit."""

    unit_id: str
    nest: LoopNest
    versions: tuple[ScheduleVersion, ...]
    tiles: tuple[int, ...]
    read_class: tuple[tuple[str, str], ...]  # ref -> "cold" | "intermediate"
    output_intermediate: bool

    def bytes_for(
        self, version: ScheduleVersion, tile: int, unroll: int, device: DeviceProfile
    ) -> ByteBreakdown:
        flagged = set(version.noncontiguous_refs)
        contiguous = noncontiguous = intermediate = 0.0
        classes = dict(self.read_class)
        for acc in self.nest.reads:
            if acc.ref in flagged:
                noncontiguous += acc.bytes
            elif classes.get(acc.ref) == "intermediate":
                intermediate += acc.bytes
            else:
                contiguous += acc.bytes
        if self.output_intermediate:
            intermediate += self.nest.output_bytes
        else:
            contiguous += self.nest.output_bytes
        footprint = tile * tile * unroll * ELEMENT_BYTES
        if footprint <= device.cache_bytes:
            noncontiguous *= 1.0 - device.cache_discount
        return ByteBreakdown(contiguous, noncontiguous, intermediate)


def _build_models(target: Graph | FusedGraph) -> list[_UnitModel]:
    fused, units = _units(target)
    shape_of = _shape_env(fused)
    produced_by_unit = set()
    for u in units:
        produced_by_unit.add(
            u.id[len("fused."):] if isinstance(u, FusedBlock) else u.id
        )
    outputs = set(fused.graph.outputs)
    models = []
    for u in units:
        nest = lower(u, shape_of)
        versions = tuple(enumerate_versions(nest))
        out_name = u.id[len("fused."):] if isinstance(u, FusedBlock) else u.id
        read_class = tuple(
            (acc.ref, "intermediate" if acc.ref in produced_by_unit else "cold")
            for acc in nest.reads
        )
        models.append(
            _UnitModel(
                unit_id=u.id,
                nest=nest,
                versions=versions,
                tiles=tile_options(nest),
                read_class=read_class,
                output_intermediate=out_name not in outputs,
            )
        )
    return models


def default_tuning(target: Graph | FusedGraph) -> TuningConfig:
    """First version, tile capped at the extent, no unrolling."""
    models = _build_models(target)
    return TuningConfig(
        genes=tuple(
            sorted(
                (m.unit_id, UnitGene(m.versions[0].id, m.tiles[-1], 1))
                for m in models
            )
        )
    )


def _unit_latency(
    model: _UnitModel, gene: UnitGene, device: DeviceProfile
) -> UnitBreakdown:
    version = next((v for v in model.versions if v.id == gene.version_id), None)
    if version is None:
        raise TuningError(
            f"unit {model.unit_id!r} has no version {gene.version_id!r}"
        )
    if gene.tile not in model.tiles:
        raise TuningError(f"unit {model.unit_id!r}: tile {gene.tile} not allowed")
    if gene.unroll not in UNROLL_FACTORS:
        raise TuningError(f"unit {model.unit_id!r}: unroll {gene.unroll} not allowed")
    data = model.bytes_for(version, gene.tile, gene.unroll, device)
    compute_s, memory_s = version_cost(version, device, data, model.nest.useful_flops)
    return UnitBreakdown(
        unit_id=model.unit_id,
        compute_s=compute_s,
        memory_s=memory_s,
        overhead_s=device.per_block_overhead_s,
    )


def estimate_latency(
    target: Graph | FusedGraph,
    device: DeviceProfile,
    tuning: TuningConfig | None = None,
) -> LatencyEstimate:
    """Roofline latency of the whole graph under a tuning configuration."""
    models = _build_models(target)
    if tuning is None:
        genes = {m.unit_id: UnitGene(m.versions[0].id, m.tiles[-1], 1) for m in models}
    else:
        genes = tuning.gene_map()
    breakdowns = []
    for m in models:
        if m.unit_id not in genes:
            raise TuningError(f"tuning does not cover unit {m.unit_id!r}")
        breakdowns.append(_unit_latency(m, genes[m.unit_id], device))
    return LatencyEstimate(
        total_s=sum(b.total_s for b in breakdowns),
        per_block=tuple(breakdowns),
    )


# ---------------------------------------------------------------------------
# Genetic-algorithm autotuning
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GAConfig:
    population: int = 16
    generations: int = 20
    mutation_rate: float = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.population < 2:
            raise ValueError("population must be >= 2")
        if self.generations < 0 or not (0 <= self.mutation_rate <= 1):
            raise ValueError("bad GA configuration")


def _gene_table(
    models: list[_UnitModel], device: DeviceProfile
) -> tuple[list[list[UnitGene]], np.ndarray]:
    """Options and latency contribution per unit and gene index."""
    options: list[list[UnitGene]] = []
    costs: list[list[float]] = []
    for m in models:
        opts = [
            UnitGene(v.id, t, u)
            for v in m.versions
            for t in m.tiles
            for u in UNROLL_FACTORS
        ]
        if not opts:
            raise TuningError(f"unit {m.unit_id!r} has an empty tuning space")
        options.append(opts)
        costs.append([_unit_latency(m, g, device).total_s for g in opts])
    width = max(len(o) for o in options)
    table = np.full((len(models), width), np.inf)
    for i, c in enumerate(costs):
        table[i, : len(c)] = c
    return options, table


def ga_tune(
    target: Graph | FusedGraph,
    device: DeviceProfile,
    config: GAConfig = GAConfig(),
) -> TuningConfig:
    """Search (version, tile, unroll) per unit, maximizing -latency.

    Deterministic for a fixed seed. The default configuration is chromosome 0
    of the initial population and elitism preserves the best chromosome, so
    the result is never worse than the default.
    """
    models = _build_models(target)
    if not models:
        raise TuningError("graph has no executable units to tune")
    if config.generations == 0:
        return default_tuning(target)
    options, table = _gene_table(models, device)
    n_units = len(models)
    sizes = np.array([len(o) for o in options])

    default_idx = np.zeros(n_units, dtype=np.int64)
    for i, m in enumerate(models):
        default_gene = UnitGene(m.versions[0].id, m.tiles[-1], 1)
        default_idx[i] = options[i].index(default_gene)

    ss = np.random.SeedSequence([config.seed, 0x6A5])
    master = np.random.default_rng(ss)
    pop = np.empty((config.population, n_units), dtype=np.int64)
    pop[0] = default_idx
    for i in range(1, config.population):
        pop[i] = master.integers(0, sizes, size=n_units)

    def fitness(population: np.ndarray) -> np.ndarray:
        return -table[np.arange(n_units)[None, :], population].sum(axis=1)

    fit = fitness(pop)
    best = pop[np.argmax(fit)].copy()
    best_fit = float(np.max(fit))

    for gen in range(config.generations):
        streams = [np.random.default_rng(s) for s in ss.spawn(config.population)]
        children = np.empty_like(pop)
        children[0] = best  # elitism
        for c in range(1, config.population):
            rng = streams[c]
            i, j = rng.integers(0, config.population, size=2)
            a = pop[i] if fit[i] >= fit[j] else pop[j]
            i, j = rng.integers(0, config.population, size=2)
            bsel = pop[i] if fit[i] >= fit[j] else pop[j]
            mask = rng.random(n_units) < 0.5
            child = np.where(mask, a, bsel)
            mut = rng.random(n_units) < config.mutation_rate
            child[mut] = rng.integers(0, sizes, size=n_units)[mut]
            children[c] = child
        pop = children
        fit = fitness(pop)
        gen_best = int(np.argmax(fit))
        if fit[gen_best] > best_fit:
            best_fit = float(fit[gen_best])
            best = pop[gen_best].copy()

    return TuningConfig(
        genes=tuple(
            sorted(
                (models[i].unit_id, options[i][int(best[i])])
                for i in range(n_units)
            )
        )
    )


def exhaustive_tune(
    target: Graph | FusedGraph, device: DeviceProfile
) -> TuningConfig:
    """Per-unit exhaustive optimum; the oracle GA results are checked against."""
    models = _build_models(target)
    options, table = _gene_table(models, device)
    picks = []
    for i, m in enumerate(models):
        best = int(np.argmin(table[i, : len(options[i])]))
        picks.append((m.unit_id, options[i][best]))
    return TuningConfig(genes=tuple(sorted(picks)))


def tuning_space_size(target: Graph | FusedGraph, device: DeviceProfile) -> int:
    models = _build_models(target)
    options, _ = _gene_table(models, device)
    return math.prod(len(o) for o in options)


# ---------------------------------------------------------------------------
# Calibration
# ---------------------------------------------------------------------------

def predict_from_report(profile: DeviceProfile, report: CostReport, block_count: int) -> float:
    """Aggregate latency surrogate used for calibration, in seconds."""
    return (
        report.flops / profile.peak_flops_per_s
        + report.intermediate_bytes
        * profile.intermediate_penalty
        / profile.mem_bandwidth_bytes_per_s
        + block_count * profile.per_block_overhead_s
    )


def calibrate(
    template: DeviceProfile,
    observations: list[tuple[CostReport, int, float]],
) -> tuple[DeviceProfile, list[float]]:
    """Fit peak FLOPs, bandwidth, and overhead to (report, blocks, seconds) rows.

    Penalties and cache parameters stay fixed at the template's values.
    Identical observations are deduplicated so duplicates cannot reweight the
    fit. Returns the fitted profile and per-observation relative residuals.
    """
    unique: list[tuple[CostReport, int, float]] = []
    seen = set()
    for rep, blocks, lat in observations:
        key = (rep.flops, rep.intermediate_bytes, blocks, lat)
        if key not in seen:
            seen.add(key)
            unique.append((rep, blocks, lat))
    if len(unique) < 3:
        raise CalibrationError("need at least 3 distinct observations")
    if any(lat <= 0 for _, _, lat in unique):
        raise CalibrationError("measured latencies must be positive")

    flops_col = np.array([rep.flops for rep, _, _ in unique], dtype=float)
    bytes_col = np.array(
        [rep.intermediate_bytes * template.intermediate_penalty for rep, _, _ in unique],
        dtype=float,
    )
    blocks_col = np.array([blocks for _, blocks, _ in unique], dtype=float)
    lat_col = np.array([lat for _, _, lat in unique], dtype=float)

    basis = np.stack([flops_col, bytes_col, blocks_col], axis=1)
    if np.linalg.matrix_rank(basis) < 3:
        raise CalibrationError("observations are rank-deficient; vary the models")

    def residuals(x: np.ndarray) -> np.ndarray:
        inv_p, inv_bw, oh = x
        pred = flops_col * inv_p + bytes_col * inv_bw + blocks_col * oh
        return pred / lat_col - 1.0

    x0 = np.array(
        [
            1.0 / template.peak_flops_per_s,
            1.0 / template.mem_bandwidth_bytes_per_s,
            template.per_block_overhead_s,
        ]
    )
    fit = least_squares(residuals, x0, bounds=(1e-18, np.inf), method="trf")
    inv_p, inv_bw, oh = fit.x
    profile = replace(
        template,
        peak_flops_per_s=1.0 / inv_p,
        mem_bandwidth_bytes_per_s=1.0 / inv_bw,
        per_block_overhead_s=float(oh),
    )
    return profile, list(residuals(fit.x))


# ---------------------------------------------------------------------------
# Observation rows as delimited text
# ---------------------------------------------------------------------------

OBSERVATION_HEADER = ["flops", "intermediate_bytes", "block_count", "measured_ms"]


def observations_from_csv(text: str, where: str = "<observations>") -> list[tuple[CostReport, int, float]]:
    reader = csv.reader(io.StringIO(text))
    rows = [r for r in reader if r and not r[0].lstrip().startswith("#")]
    if not rows:
        raise ParseError(f"{where}: empty observation table")
    if [c.strip() for c in rows[0]] == OBSERVATION_HEADER:
        rows = rows[1:]
    out = []
    for i, row in enumerate(rows, 1):
        if len(row) != 4:
            raise ParseError(f"{where}:{i}: expected 4 columns, got {len(row)}")
        try:
            fl, ib, bc, ms = int(row[0]), int(row[1]), int(row[2]), float(row[3])
        except ValueError as exc:
            raise ParseError(f"{where}:{i}: {exc}") from exc
        out.append((CostReport(fl, ib, 0, 0), bc, ms / 1000.0))
    return out


def observations_to_csv(rows: list[tuple[CostReport, int, float]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(OBSERVATION_HEADER)
    for rep, blocks, seconds in rows:
        writer.writerow([rep.flops, rep.intermediate_bytes, blocks, seconds * 1000.0])
    return buf.getvalue()
