"""Computational-graph IR for transformer inference graphs.

The IR is a flat, topologically ordered list of primitive nodes over dense
tensors. Design rules:

- Data movement is explicit: broadcasting a smaller tensor against a larger
  one is a Broadcast node, rank changes are Reshape nodes, reductions always
  drop the reduced axis (an explicit Reshape restores it).
- Weights live in a named side table; nodes reference them by name. Weights
  whose values are part of the graph semantics (ones vectors, epsilon,
  normalization constants, position ids) carry inline data; learned tensors
  carry shape only and are filled from a seed at execution time.
- Binary elementwise ops also accept trailing-dimension-broadcastable
  operand shapes directly, so hand-built graphs do not have to materialize
  Broadcast nodes the way the BERT builder does.

Every operator kind is classified compute-intensive (inputs re-read many
times, i.e. MatMul) or memory-intensive (each input element read once).
The BERT builder produces exactly 94 nodes per transformer block
(9 compute-intensive) and 44 nodes of embedding head + classifier tail
(1 compute-intensive); see `build_bert_graph` for the full decomposition.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Mapping, Sequence

GRAPH_FORMAT = "fusenas-graph"
GRAPH_VERSION = 1

# Footprint accounting is fixed to 4-byte floats regardless of the dtype the
# reference interpreter runs in.
ELEMENT_BYTES = 4


class ConfigurationError(ValueError):
    """An architecture or file configuration violates a stated constraint."""


class ShapeError(ValueError):
    """Shape inference failed; message names the offending node."""


class ParseError(ValueError):
    """A serialized document is malformed; message carries the location."""


# ---------------------------------------------------------------------------
# Architecture configuration
# ---------------------------------------------------------------------------

HEAD_WIDTH = 64          # per-head feature width; hidden size is a multiple
MIN_HIDDEN = 256         # below this, accuracy degrades; lower search bound


@dataclass(frozen=True)
class ArchitectureConfig:
    """Searchable transformer hyperparameters.

    num_heads is pinned to hidden_size / 64, so the per-head width stays
    constant across the search space.
    """

    num_blocks: int
    hidden_size: int
    intermediate_size: int
    seq_len: int = 128
    vocab_size: int = 30522
    num_labels: int = 2

    def __post_init__(self) -> None:
        if self.num_blocks < 1:
            raise ConfigurationError("num_blocks must be >= 1")
        if self.seq_len < 1:
            raise ConfigurationError("seq_len must be >= 1")
        if self.hidden_size % HEAD_WIDTH != 0:
            raise ConfigurationError(
                f"hidden size must be a multiple of {HEAD_WIDTH}, got {self.hidden_size}"
            )
        if self.hidden_size < MIN_HIDDEN:
            raise ConfigurationError(
                f"hidden size must be >= {MIN_HIDDEN}, got {self.hidden_size}"
            )
        if self.intermediate_size < 1:
            raise ConfigurationError("intermediate_size must be >= 1")
        if self.vocab_size < 2:
            raise ConfigurationError("vocab_size must be >= 2")
        if self.num_labels < 2:
            raise ConfigurationError("num_labels must be >= 2")

    @property
    def num_heads(self) -> int:
        return self.hidden_size // HEAD_WIDTH

    @property
    def head_dim(self) -> int:
        return HEAD_WIDTH


# ---------------------------------------------------------------------------
# Operator kinds
# ---------------------------------------------------------------------------

class OpKind(str, Enum):
    MATMUL = "MatMul"
    ADD = "Add"
    SUB = "Sub"
    MUL = "Mul"
    RECIPROCAL = "Reciprocal"
    POWER = "Power"
    CONCAT = "Concat"
    GATHER = "Gather"
    SLICE = "Slice"
    TRANSPOSE = "Transpose"
    RESHAPE = "Reshape"
    REDUCE_SUM = "ReduceSum"
    REDUCE_MAX = "ReduceMax"
    EXP = "Exp"
    SQRT = "Sqrt"
    ERF = "Erf"
    BROADCAST = "Broadcast"
    CONSTANT = "Constant"
    INPUT = "Input"


class Intensity(str, Enum):
    COMPUTE = "ComputeIntensive"
    MEMORY = "MemoryIntensive"


def intensity(kind: OpKind) -> Intensity:
    """Intensity class is a pure function of the kind."""
    return Intensity.COMPUTE if kind is OpKind.MATMUL else Intensity.MEMORY


ELEMENTWISE_UNARY = frozenset(
    {OpKind.RECIPROCAL, OpKind.POWER, OpKind.EXP, OpKind.SQRT, OpKind.ERF}
)
ELEMENTWISE_BINARY = frozenset({OpKind.ADD, OpKind.SUB, OpKind.MUL})
ELEMENTWISE = ELEMENTWISE_UNARY | ELEMENTWISE_BINARY
# Pure layout/view kinds: zero FLOPs and zero operator count in fusion algebra.
VIEW_KINDS = frozenset({OpKind.BROADCAST, OpKind.RESHAPE})
REDUCTIONS = frozenset({OpKind.REDUCE_SUM, OpKind.REDUCE_MAX})
DATA_MOVEMENT = frozenset(
    {OpKind.CONCAT, OpKind.GATHER, OpKind.SLICE, OpKind.TRANSPOSE}
) | VIEW_KINDS


# ---------------------------------------------------------------------------
# Nodes and graphs
# ---------------------------------------------------------------------------

Shape = tuple[int, ...]


@dataclass(frozen=True)
class Node:
    id: str
    kind: OpKind
    inputs: tuple[str, ...]
    shape: Shape
    attrs: tuple[tuple[str, object], ...] = ()

    def attr(self, name: str, default=None):
        for key, value in self.attrs:
            if key == name:
                return value
        return default


@dataclass(frozen=True)
class TensorSpec:
    """A named graph input or weight. Weights may carry inline values."""

    name: str
    shape: Shape
    data: tuple | None = None  # nested tuples of floats, row-major


@dataclass(frozen=True)
class Graph:
    nodes: tuple[Node, ...]
    inputs: tuple[TensorSpec, ...]
    weights: tuple[TensorSpec, ...]
    outputs: tuple[str, ...]

    def node_map(self) -> dict[str, Node]:
        return {n.id: n for n in self.nodes}

    def input_map(self) -> dict[str, TensorSpec]:
        return {t.name: t for t in self.inputs}

    def weight_map(self) -> dict[str, TensorSpec]:
        return {t.name: t for t in self.weights}

    def topo_index(self) -> dict[str, int]:
        return {n.id: i for i, n in enumerate(self.nodes)}


@dataclass(frozen=True)
class LayerCensus:
    compute_intensive: int
    memory_intensive: int

    @property
    def total(self) -> int:
        return self.compute_intensive + self.memory_intensive


@dataclass(frozen=True)
class CostReport:
    flops: int
    intermediate_bytes: int
    op_count: int
    layer_count: int


# ---------------------------------------------------------------------------
# Shape utilities
# ---------------------------------------------------------------------------

def broadcast_shapes(a: Shape, b: Shape) -> Shape:
    """Trailing-dimension broadcast of two shapes; raises on mismatch."""
    rank = max(len(a), len(b))
    pa = (1,) * (rank - len(a)) + a
    pb = (1,) * (rank - len(b)) + b
    out = []
    for da, db in zip(pa, pb):
        if da == db or da == 1 or db == 1:
            out.append(max(da, db))
        else:
            raise ShapeError(f"shapes {a} and {b} are not broadcastable")
    return tuple(out)


def matmul_shape(a: Shape, b: Shape) -> Shape:
    """(..., m, k) x (..., k, n) -> (..., m, n); a 2-D rhs applies per batch."""
    if len(a) < 2 or len(b) < 2:
        raise ShapeError(f"matmul operands must be rank >= 2, got {a} x {b}")
    if a[-1] != b[-2]:
        raise ShapeError(f"matmul inner dims disagree: {a} x {b}")
    batch = broadcast_shapes(a[:-2], b[:-2])
    return batch + (a[-2], b[-1])


def _positive_shape(shape: Iterable[int]) -> Shape:
    s = tuple(int(d) for d in shape)
    if any(d < 1 for d in s):
        raise ShapeError(f"dimensions must be positive, got {s}")
    return s


def infer_shape(kind: OpKind, input_shapes: Sequence[Shape], attrs: Mapping[str, object]) -> Shape:
    """Deterministic shape inference for one node."""
    if kind is OpKind.MATMUL:
        return matmul_shape(input_shapes[0], input_shapes[1])
    if kind in ELEMENTWISE_BINARY:
        return broadcast_shapes(input_shapes[0], input_shapes[1])
    if kind in ELEMENTWISE_UNARY:
        return input_shapes[0]
    if kind in (OpKind.BROADCAST, OpKind.RESHAPE):
        target = _positive_shape(attrs["shape"])
        if kind is OpKind.RESHAPE:
            if math.prod(target) != math.prod(input_shapes[0]):
                raise ShapeError(
                    f"reshape size mismatch: {input_shapes[0]} -> {target}"
                )
        else:
            broadcast_shapes(input_shapes[0], target)  # validity check
        return target
    if kind is OpKind.TRANSPOSE:
        perm = tuple(attrs["perm"])
        src = input_shapes[0]
        if sorted(perm) != list(range(len(src))):
            raise ShapeError(f"bad transpose permutation {perm} for {src}")
        return tuple(src[p] for p in perm)
    if kind in REDUCTIONS:
        axis = int(attrs["axis"])
        src = input_shapes[0]
        axis = axis % len(src)
        return src[:axis] + src[axis + 1:]
    if kind is OpKind.CONCAT:
        axis = int(attrs["axis"])
        base = list(input_shapes[0])
        axis = axis % len(base)
        for s in input_shapes[1:]:
            if len(s) != len(base) or any(
                i != axis and d != base[i] for i, d in enumerate(s)
            ):
                raise ShapeError(f"concat shapes disagree off-axis: {input_shapes}")
            base[axis] += s[axis]
        return tuple(base)
    if kind is OpKind.GATHER:
        axis = int(attrs.get("axis", 0))
        table, idx = input_shapes[0], input_shapes[1]
        axis = axis % len(table)
        return table[:axis] + idx + table[axis + 1:]
    if kind is OpKind.SLICE:
        axis = int(attrs["axis"])
        start = int(attrs["start"])
        stop = int(attrs["stop"])
        src = list(input_shapes[0])
        axis = axis % len(src)
        if not (0 <= start < stop <= src[axis]):
            raise ShapeError(f"slice [{start}:{stop}] out of range for {src}")
        src[axis] = stop - start
        return tuple(src)
    if kind in (OpKind.CONSTANT, OpKind.INPUT):
        return _positive_shape(attrs["shape"])
    raise ShapeError(f"unknown kind {kind}")


# ---------------------------------------------------------------------------
# Census, FLOPs, footprint
# ---------------------------------------------------------------------------

def census(graph: Graph) -> LayerCensus:
    """Count nodes by intensity class; Constant/Input nodes excluded."""
    compute = memory = 0
    for node in graph.nodes:
        if node.kind in (OpKind.CONSTANT, OpKind.INPUT):
            continue
        if intensity(node.kind) is Intensity.COMPUTE:
            compute += 1
        else:
            memory += 1
    return LayerCensus(compute, memory)


def node_flops(node: Node, input_shapes: Sequence[Shape]) -> int:
    """FLOPs of a single node.

    MatMul (m,k)x(k,n) costs 2*m*k*n per batch element; elementwise ops cost
    one per output element; reductions cost one per input element; data
    movement is free.
    """
    if node.kind is OpKind.MATMUL:
        a, b = input_shapes
        batch = math.prod(broadcast_shapes(a[:-2], b[:-2])) if (len(a) > 2 or len(b) > 2) else 1
        return 2 * batch * a[-2] * a[-1] * b[-1]
    if node.kind in ELEMENTWISE:
        return math.prod(node.shape)
    if node.kind in REDUCTIONS:
        return math.prod(input_shapes[0])
    return 0


def _shape_of_ref(graph: Graph, ref: str, nodes: Mapping[str, Node]) -> Shape:
    if ref in nodes:
        return nodes[ref].shape
    for spec in graph.inputs:
        if spec.name == ref:
            return spec.shape
    for spec in graph.weights:
        if spec.name == ref:
            return spec.shape
    raise ShapeError(f"unknown tensor reference {ref!r}")


def flops(graph: Graph) -> int:
    return sum(per_node_flops(graph).values())


def per_node_flops(graph: Graph) -> dict[str, int]:
    """FLOPs per node id; the unit the homogeneity properties are checked on."""
    nodes = graph.node_map()
    out = {}
    for node in graph.nodes:
        shapes = [_shape_of_ref(graph, r, nodes) for r in node.inputs]
        out[node.id] = node_flops(node, shapes)
    return out


def intermediate_bytes(graph: Graph) -> int:
    """Bytes of all non-output, non-constant node results, at 4 bytes/element."""
    outputs = set(graph.outputs)
    total = 0
    for node in graph.nodes:
        if node.kind in (OpKind.CONSTANT, OpKind.INPUT):
            continue
        if node.id in outputs:
            continue
        total += math.prod(node.shape) * ELEMENT_BYTES
    return total


def cost_report(graph: Graph) -> CostReport:
    cen = census(graph)
    return CostReport(
        flops=flops(graph),
        intermediate_bytes=intermediate_bytes(graph),
        op_count=operator_count(graph),
        layer_count=cen.total,
    )


def operator_count(graph: Graph) -> int:
    """Algebra-operator count: one per node, except views which contribute 0."""
    return sum(
        1
        for n in graph.nodes
        if n.kind not in VIEW_KINDS and n.kind not in (OpKind.CONSTANT, OpKind.INPUT)
    )


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

def validate(graph: Graph) -> list[str]:
    """Structural validation. Returns a list of violations (empty = ok)."""
    violations: list[str] = []
    seen: dict[str, Shape] = {}
    for spec in graph.inputs:
        seen[spec.name] = spec.shape
    for spec in graph.weights:
        if spec.name in seen:
            violations.append(f"duplicate name {spec.name!r}")
        seen[spec.name] = spec.shape
        if spec.data is not None and _flat_len(spec.data) != math.prod(spec.shape):
            violations.append(f"weight {spec.name!r} data does not match shape {spec.shape}")
    for node in graph.nodes:
        if node.id in seen:
            violations.append(f"duplicate id {node.id!r}")
        in_shapes = []
        missing = False
        for ref in node.inputs:
            if ref not in seen:
                violations.append(f"node {node.id!r} references unknown id {ref!r}")
                missing = True
            else:
                in_shapes.append(seen[ref])
        if not missing:
            try:
                inferred = infer_shape(node.kind, in_shapes, dict(node.attrs))
                if inferred != node.shape:
                    violations.append(
                        f"node {node.id!r} shape {node.shape} != inferred {inferred}"
                    )
            except ShapeError as exc:
                violations.append(f"node {node.id!r}: {exc}")
        seen[node.id] = node.shape
    for out in graph.outputs:
        if out not in seen:
            violations.append(f"output {out!r} does not exist")
    return violations


def _flat_len(data) -> int:
    if isinstance(data, (list, tuple)):
        return sum(_flat_len(d) for d in data)
    return 1


# ---------------------------------------------------------------------------
# BERT graph builder
# ---------------------------------------------------------------------------
#
# Per-block decomposition (94 nodes: 9 MatMul + 85 memory-intensive).
# The layout mirrors an exported inference graph with explicit broadcasts:
#
#   q/k/v projection       3 x (MatMul, Broadcast bias, Add)            3C  6M
#   head split             3 x (Reshape, Transpose)                         6M
#   scores                 MatMul, Reciprocal(sqrt_dk), Broadcast, Mul,
#                          Broadcast mask, Add                          1C  5M
#   softmax                ReduceMax, Reshape, Broadcast, Sub, Exp,
#                          MatMul(ones column), Reciprocal, Broadcast,
#                          Mul                                          1C  8M
#   context                MatMul, Transpose, Reshape                   1C  2M
#   output projection      MatMul, Broadcast, Add, residual Add         1C  3M
#   layer norm             21 nodes (sums reshaped back, explicit
#                          broadcasts for mean/var/eps/gamma/beta)          21M
#   feed-forward in        MatMul, Broadcast, Add                       1C  2M
#   gelu (erf form)        Broadcast, Mul, Erf, Broadcast, Add, Mul,
#                          Broadcast, Mul                                   8M
#   feed-forward out       MatMul, Broadcast, Add                       1C  2M
#   residual + layer norm  Add + 21 nodes                                   22M
#
# The softmax denominator is lowered to a ones-column MatMul: on matrix
# engines the row-sum of the (A,S,S) score tensor is executed as a matrix
# product, which is also what makes one softmax per block show up on the
# compute-intensive side of the census.
#
# Head (30 nodes): three embedding Gathers, two Adds, a 21-node layer norm,
# and the additive attention-mask precompute (4 nodes).
# Tail (14 nodes): [CLS] Slice, classifier MatMul (+bias), and a
# reduction-based softmax over the labels (no ones-MatMul: a 1 x num_labels
# row gains nothing from the matrix engine).

MASK_FILL = -10000.0
LN_EPS = 1e-12
PER_BLOCK_NODES = 94
PER_BLOCK_COMPUTE = 9
HEAD_TAIL_NODES = 44
HEAD_TAIL_COMPUTE = 1


class _Builder:
    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.weights: list[TensorSpec] = []
        self.shapes: dict[str, Shape] = {}

    def weight(self, name: str, shape: Shape, data=None) -> str:
        self.weights.append(TensorSpec(name, shape, data))
        self.shapes[name] = shape
        return name

    def emit(self, nid: str, kind: OpKind, inputs: Sequence[str], **attrs) -> str:
        in_shapes = [self.shapes[r] for r in inputs]
        shape = infer_shape(kind, in_shapes, attrs)
        self.nodes.append(
            Node(nid, kind, tuple(inputs), shape, tuple(sorted(attrs.items())))
        )
        self.shapes[nid] = shape
        return nid


def _scalar(value: float) -> tuple:
    return ((float(value),),)


def _layer_norm(b: _Builder, prefix: str, x: str, width: int, rows: int,
                gamma: str, beta: str, inv_width: str, eps: str) -> str:
    """21-node layer normalization over the trailing axis."""
    s = b.emit(f"{prefix}.sum", OpKind.REDUCE_SUM, [x], axis=-1)
    s2 = b.emit(f"{prefix}.sum_col", OpKind.RESHAPE, [s], shape=(rows, 1))
    iw = b.emit(f"{prefix}.inv_width_col", OpKind.BROADCAST, [inv_width], shape=(rows, 1))
    mean = b.emit(f"{prefix}.mean", OpKind.MUL, [s2, iw])
    mean_bc = b.emit(f"{prefix}.mean_full", OpKind.BROADCAST, [mean], shape=(rows, width))
    center = b.emit(f"{prefix}.center", OpKind.SUB, [x, mean_bc])
    sq = b.emit(f"{prefix}.square", OpKind.POWER, [center], exponent=2.0)
    vs = b.emit(f"{prefix}.var_sum", OpKind.REDUCE_SUM, [sq], axis=-1)
    vs2 = b.emit(f"{prefix}.var_sum_col", OpKind.RESHAPE, [vs], shape=(rows, 1))
    iw2 = b.emit(f"{prefix}.inv_width_col2", OpKind.BROADCAST, [inv_width], shape=(rows, 1))
    var = b.emit(f"{prefix}.var", OpKind.MUL, [vs2, iw2])
    eps_bc = b.emit(f"{prefix}.eps_col", OpKind.BROADCAST, [eps], shape=(rows, 1))
    var_eps = b.emit(f"{prefix}.var_eps", OpKind.ADD, [var, eps_bc])
    std = b.emit(f"{prefix}.std", OpKind.SQRT, [var_eps])
    inv_std = b.emit(f"{prefix}.inv_std", OpKind.RECIPROCAL, [std])
    inv_bc = b.emit(f"{prefix}.inv_std_full", OpKind.BROADCAST, [inv_std], shape=(rows, width))
    norm = b.emit(f"{prefix}.norm", OpKind.MUL, [center, inv_bc])
    g_bc = b.emit(f"{prefix}.gamma_full", OpKind.BROADCAST, [gamma], shape=(rows, width))
    scaled = b.emit(f"{prefix}.scaled", OpKind.MUL, [norm, g_bc])
    b_bc = b.emit(f"{prefix}.beta_full", OpKind.BROADCAST, [beta], shape=(rows, width))
    return b.emit(f"{prefix}.out", OpKind.ADD, [scaled, b_bc])


def build_bert_graph(arch: ArchitectureConfig) -> Graph:
    """Build the inference graph for a BERT-style encoder.

    Node counts per section are fixed by the decomposition documented above
    and are independent of hidden size, head count, and sequence length.
    """
    b = _Builder()
    S, H, I = arch.seq_len, arch.hidden_size, arch.intermediate_size
    A, dk, V, NL = arch.num_heads, arch.head_dim, arch.vocab_size, arch.num_labels

    token_ids = TensorSpec("token_ids", (S,))
    segment_ids = TensorSpec("segment_ids", (S,))
    attention_mask = TensorSpec("attention_mask", (1, S))
    for spec in (token_ids, segment_ids, attention_mask):
        b.shapes[spec.name] = spec.shape

    # Shared semantic constants
    one = b.weight("shared.one", (1, 1), _scalar(1.0))
    half = b.weight("shared.half", (1, 1), _scalar(0.5))
    inv_sqrt2 = b.weight("shared.inv_sqrt2", (1, 1), _scalar(1.0 / math.sqrt(2.0)))
    sqrt_dk = b.weight("shared.sqrt_head_dim", (1, 1), _scalar(math.sqrt(dk)))
    inv_h = b.weight("shared.inv_hidden", (1, 1), _scalar(1.0 / H))
    inv_i = b.weight("shared.inv_intermediate", (1, 1), _scalar(1.0 / I))
    eps = b.weight("shared.ln_eps", (1, 1), _scalar(LN_EPS))
    mask_fill = b.weight("shared.mask_fill", (1, 1), _scalar(MASK_FILL))
    ones_col = b.weight("shared.ones_col", (S, 1), tuple((1.0,) for _ in range(S)))

    # --- Embedding head (30 nodes) ---
    word_table = b.weight("embed.word_table", (V, H))
    pos_table = b.weight("embed.position_table", (S, H))
    type_table = b.weight("embed.type_table", (2, H))
    pos_ids = b.weight("embed.position_ids", (S,), tuple(float(i) for i in range(S)))
    emb_gamma = b.weight("embed.ln_gamma", (H,))
    emb_beta = b.weight("embed.ln_beta", (H,))

    tok = b.emit("embed.tokens", OpKind.GATHER, [word_table, "token_ids"], axis=0)
    pos = b.emit("embed.positions", OpKind.GATHER, [pos_table, pos_ids], axis=0)
    typ = b.emit("embed.types", OpKind.GATHER, [type_table, "segment_ids"], axis=0)
    e1 = b.emit("embed.sum_wp", OpKind.ADD, [tok, pos])
    e2 = b.emit("embed.sum_all", OpKind.ADD, [e1, typ])
    hidden = _layer_norm(b, "embed.ln", e2, H, S, emb_gamma, emb_beta, inv_h, eps)
    m1 = b.emit("embed.mask_ones", OpKind.BROADCAST, [one], shape=(1, S))
    m2 = b.emit("embed.mask_inverted", OpKind.SUB, [m1, "attention_mask"])
    m3 = b.emit("embed.mask_fill_row", OpKind.BROADCAST, [mask_fill], shape=(1, S))
    ext_mask = b.emit("embed.ext_mask", OpKind.MUL, [m2, m3])

    # --- Transformer blocks (94 nodes each) ---
    for i in range(arch.num_blocks):
        p = f"block{i}"
        x = hidden

        def proj(tag: str) -> str:
            w = b.weight(f"{p}.{tag}_w", (H, H))
            bias = b.weight(f"{p}.{tag}_b", (H,))
            mm = b.emit(f"{p}.{tag}_mm", OpKind.MATMUL, [x, w])
            bias_bc = b.emit(f"{p}.{tag}_bias_full", OpKind.BROADCAST, [bias], shape=(S, H))
            return b.emit(f"{p}.{tag}", OpKind.ADD, [mm, bias_bc])

        q = proj("q")
        k = proj("k")
        v = proj("v")
        qs = b.emit(f"{p}.q_split", OpKind.RESHAPE, [q], shape=(S, A, dk))
        qh = b.emit(f"{p}.q_heads", OpKind.TRANSPOSE, [qs], perm=(1, 0, 2))
        ks = b.emit(f"{p}.k_split", OpKind.RESHAPE, [k], shape=(S, A, dk))
        kh = b.emit(f"{p}.k_heads", OpKind.TRANSPOSE, [ks], perm=(1, 2, 0))
        vs = b.emit(f"{p}.v_split", OpKind.RESHAPE, [v], shape=(S, A, dk))
        vh = b.emit(f"{p}.v_heads", OpKind.TRANSPOSE, [vs], perm=(1, 0, 2))

        raw = b.emit(f"{p}.scores_mm", OpKind.MATMUL, [qh, kh])
        inv_s = b.emit(f"{p}.scale", OpKind.RECIPROCAL, [sqrt_dk])
        inv_s_bc = b.emit(f"{p}.scale_full", OpKind.BROADCAST, [inv_s], shape=(A, S, S))
        scaled = b.emit(f"{p}.scores_scaled", OpKind.MUL, [raw, inv_s_bc])
        mask_bc = b.emit(f"{p}.mask_full", OpKind.BROADCAST, [ext_mask], shape=(A, S, S))
        masked = b.emit(f"{p}.scores_masked", OpKind.ADD, [scaled, mask_bc])

        mx = b.emit(f"{p}.soft_max", OpKind.REDUCE_MAX, [masked], axis=-1)
        mx2 = b.emit(f"{p}.soft_max_col", OpKind.RESHAPE, [mx], shape=(A, S, 1))
        mx_bc = b.emit(f"{p}.soft_max_full", OpKind.BROADCAST, [mx2], shape=(A, S, S))
        shifted = b.emit(f"{p}.soft_shift", OpKind.SUB, [masked, mx_bc])
        expd = b.emit(f"{p}.soft_exp", OpKind.EXP, [shifted])
        denom = b.emit(f"{p}.soft_sum_mm", OpKind.MATMUL, [expd, ones_col])
        recip = b.emit(f"{p}.soft_recip", OpKind.RECIPROCAL, [denom])
        recip_bc = b.emit(f"{p}.soft_recip_full", OpKind.BROADCAST, [recip], shape=(A, S, S))
        probs = b.emit(f"{p}.soft_probs", OpKind.MUL, [expd, recip_bc])

        ctx = b.emit(f"{p}.context_mm", OpKind.MATMUL, [probs, vh])
        ctx_t = b.emit(f"{p}.context_perm", OpKind.TRANSPOSE, [ctx], perm=(1, 0, 2))
        merged = b.emit(f"{p}.context_merge", OpKind.RESHAPE, [ctx_t], shape=(S, H))

        ow = b.weight(f"{p}.o_w", (H, H))
        ob = b.weight(f"{p}.o_b", (H,))
        omm = b.emit(f"{p}.o_mm", OpKind.MATMUL, [merged, ow])
        ob_bc = b.emit(f"{p}.o_bias_full", OpKind.BROADCAST, [ob], shape=(S, H))
        oadd = b.emit(f"{p}.o_biased", OpKind.ADD, [omm, ob_bc])
        res1 = b.emit(f"{p}.attn_residual", OpKind.ADD, [oadd, x])

        g1 = b.weight(f"{p}.ln1_gamma", (H,))
        b1 = b.weight(f"{p}.ln1_beta", (H,))
        ln1 = _layer_norm(b, f"{p}.ln1", res1, H, S, g1, b1, inv_h, eps)

        f1w = b.weight(f"{p}.ffn1_w", (H, I))
        f1b = b.weight(f"{p}.ffn1_b", (I,))
        f1mm = b.emit(f"{p}.ffn1_mm", OpKind.MATMUL, [ln1, f1w])
        f1bc = b.emit(f"{p}.ffn1_bias_full", OpKind.BROADCAST, [f1b], shape=(S, I))
        u = b.emit(f"{p}.ffn1", OpKind.ADD, [f1mm, f1bc])

        c_bc = b.emit(f"{p}.gelu_c", OpKind.BROADCAST, [inv_sqrt2], shape=(S, I))
        arg = b.emit(f"{p}.gelu_arg", OpKind.MUL, [u, c_bc])
        erf = b.emit(f"{p}.gelu_erf", OpKind.ERF, [arg])
        one_bc = b.emit(f"{p}.gelu_one", OpKind.BROADCAST, [one], shape=(S, I))
        shift = b.emit(f"{p}.gelu_shift", OpKind.ADD, [erf, one_bc])
        prod = b.emit(f"{p}.gelu_mul", OpKind.MUL, [u, shift])
        half_bc = b.emit(f"{p}.gelu_half", OpKind.BROADCAST, [half], shape=(S, I))
        act = b.emit(f"{p}.gelu", OpKind.MUL, [prod, half_bc])

        f2w = b.weight(f"{p}.ffn2_w", (I, H))
        f2b = b.weight(f"{p}.ffn2_b", (H,))
        f2mm = b.emit(f"{p}.ffn2_mm", OpKind.MATMUL, [act, f2w])
        f2bc = b.emit(f"{p}.ffn2_bias_full", OpKind.BROADCAST, [f2b], shape=(S, H))
        f2 = b.emit(f"{p}.ffn2", OpKind.ADD, [f2mm, f2bc])
        res2 = b.emit(f"{p}.ffn_residual", OpKind.ADD, [f2, ln1])

        g2 = b.weight(f"{p}.ln2_gamma", (H,))
        b2 = b.weight(f"{p}.ln2_beta", (H,))
        hidden = _layer_norm(b, f"{p}.ln2", res2, H, S, g2, b2, inv_h, eps)

    # --- Classifier tail (14 nodes) ---
    cls = b.emit("tail.cls", OpKind.SLICE, [hidden], axis=0, start=0, stop=1)
    cw = b.weight("tail.cls_w", (H, NL))
    cb = b.weight("tail.cls_b", (NL,))
    logits_mm = b.emit("tail.logits_mm", OpKind.MATMUL, [cls, cw])
    cb_bc = b.emit("tail.cls_bias_full", OpKind.BROADCAST, [cb], shape=(1, NL))
    logits = b.emit("tail.logits", OpKind.ADD, [logits_mm, cb_bc])
    tmx = b.emit("tail.soft_max", OpKind.REDUCE_MAX, [logits], axis=-1)
    tmx2 = b.emit("tail.soft_max_col", OpKind.RESHAPE, [tmx], shape=(1, 1))
    tmx_bc = b.emit("tail.soft_max_full", OpKind.BROADCAST, [tmx2], shape=(1, NL))
    tshift = b.emit("tail.soft_shift", OpKind.SUB, [logits, tmx_bc])
    texp = b.emit("tail.soft_exp", OpKind.EXP, [tshift])
    tsum = b.emit("tail.soft_sum", OpKind.REDUCE_SUM, [texp], axis=-1)
    tsum2 = b.emit("tail.soft_sum_col", OpKind.RESHAPE, [tsum], shape=(1, 1))
    trec = b.emit("tail.soft_recip", OpKind.RECIPROCAL, [tsum2])
    trec_bc = b.emit("tail.soft_recip_full", OpKind.BROADCAST, [trec], shape=(1, NL))
    out = b.emit("tail.probs", OpKind.MUL, [texp, trec_bc])

    return Graph(
        nodes=tuple(b.nodes),
        inputs=(token_ids, segment_ids, attention_mask),
        weights=tuple(b.weights),
        outputs=(out,),
    )


# ---------------------------------------------------------------------------
# Serialization: a versioned JSON document
# ---------------------------------------------------------------------------

def graph_to_dict(graph: Graph) -> dict:
    return {
        "format": GRAPH_FORMAT,
        "version": GRAPH_VERSION,
        "inputs": [_spec_to_dict(t) for t in graph.inputs],
        "weights": [_spec_to_dict(t) for t in graph.weights],
        "nodes": [
            {
                "id": n.id,
                "kind": n.kind.value,
                "inputs": list(n.inputs),
                "attrs": {k: _attr_to_json(v) for k, v in n.attrs},
                "shape": list(n.shape),
            }
            for n in graph.nodes
        ],
        "outputs": list(graph.outputs),
    }


def serialize(graph: Graph) -> str:
    return json.dumps(graph_to_dict(graph), indent=1)


def _spec_to_dict(spec: TensorSpec) -> dict:
    d: dict = {"name": spec.name, "shape": list(spec.shape)}
    if spec.data is not None:
        d["data"] = _data_to_json(spec.data)
    return d


def _data_to_json(data):
    if isinstance(data, tuple):
        return [_data_to_json(d) for d in data]
    return data


def _attr_to_json(value):
    if isinstance(value, tuple):
        return list(value)
    return value


def _attr_from_json(value):
    if isinstance(value, list):
        return tuple(value)
    return value


def _data_from_json(data):
    if isinstance(data, list):
        return tuple(_data_from_json(d) for d in data)
    return float(data)


def graph_from_dict(doc: dict, where: str = "<graph>") -> Graph:
    if not isinstance(doc, dict):
        raise ParseError(f"{where}: expected an object at the top level")
    if doc.get("format") != GRAPH_FORMAT:
        raise ParseError(f"{where}: not a {GRAPH_FORMAT} document")
    if doc.get("version") != GRAPH_VERSION:
        raise ParseError(
            f"{where}: unsupported version {doc.get('version')!r}, expected {GRAPH_VERSION}"
        )
    try:
        inputs = tuple(_spec_from_dict(t) for t in doc["inputs"])
        weights = tuple(_spec_from_dict(t) for t in doc["weights"])
        nodes = []
        for i, n in enumerate(doc["nodes"]):
            try:
                kind = OpKind(n["kind"])
            except ValueError as exc:
                raise ParseError(f"{where}: nodes[{i}]: {exc}") from exc
            nodes.append(
                Node(
                    id=n["id"],
                    kind=kind,
                    inputs=tuple(n["inputs"]),
                    shape=tuple(int(d) for d in n["shape"]),
                    attrs=tuple(sorted((k, _attr_from_json(v)) for k, v in n.get("attrs", {}).items())),
                )
            )
        outputs = tuple(doc["outputs"])
    except (KeyError, TypeError) as exc:
        raise ParseError(f"{where}: malformed document: {exc!r}") from exc
    return Graph(tuple(nodes), inputs, weights, outputs)


def _spec_from_dict(d: dict) -> TensorSpec:
    data = d.get("data")
    return TensorSpec(
        name=d["name"],
        shape=tuple(int(x) for x in d["shape"]),
        data=None if data is None else _data_from_json(data),
    )


def deserialize(text: str, where: str = "<graph>") -> Graph:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{where}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    return graph_from_dict(doc, where)
