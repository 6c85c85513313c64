"""Reference interpreter over small dense tensors.

This is the ground-truth oracle: fused graphs must produce the same outputs
as the graphs they came from, and the FLOPs / intermediate-byte counters
observed here must agree with the static predictions for unfused graphs.

Kernels are straightforward numpy expressions evaluated node by node (or
expression-tree by expression-tree for fused blocks); nothing is batched or
scheduled. Weights without inline values are drawn from U(0.5, 1.5) with a
named seed, which keeps Reciprocal/Power well conditioned. Runs are pure and
deterministic given inputs and seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf as _erf

from .fusion import Expr, FusedBlock, FusedGraph
from .graph_ir import (
    ELEMENT_BYTES,
    CostReport,
    Graph,
    Node,
    OpKind,
    VIEW_KINDS,
    node_flops,
)


class ExecutionError(ValueError):
    """Shape or signature mismatch; message names the tensor."""


class NumericError(ArithmeticError):
    """A non-finite intermediate appeared; message names the node."""


@dataclass(frozen=True)
class TensorValue:
    """Dense row-major tensor handed to or produced by the interpreter."""

    shape: tuple[int, ...]
    data: np.ndarray

    def __post_init__(self) -> None:
        if self.data.size != math.prod(self.shape):
            raise ExecutionError(
                f"data length {self.data.size} does not match shape {self.shape}"
            )
        if not np.all(np.isfinite(self.data)):
            raise ExecutionError("tensor values must be finite on entry")

    @staticmethod
    def of(array) -> "TensorValue":
        arr = np.asarray(array, dtype=np.float64)
        return TensorValue(tuple(arr.shape), arr)


@dataclass(frozen=True)
class EquivalenceReport:
    trials: int
    max_abs_err: float
    max_rel_err: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance


# ---------------------------------------------------------------------------
# Kernels
# ---------------------------------------------------------------------------

def _apply(kind: OpKind, args: list[np.ndarray], attrs: dict) -> np.ndarray:
    # Overflow and divide-by-zero are allowed to produce inf here; the
    # per-node finite check turns them into NumericError with the node name.
    if kind is OpKind.MATMUL:
        return np.matmul(args[0], args[1])
    if kind is OpKind.ADD:
        return args[0] + args[1]
    if kind is OpKind.SUB:
        return args[0] - args[1]
    if kind is OpKind.MUL:
        return args[0] * args[1]
    if kind is OpKind.RECIPROCAL:
        return 1.0 / args[0]
    if kind is OpKind.POWER:
        return np.power(args[0], attrs["exponent"])
    if kind is OpKind.EXP:
        return np.exp(args[0])
    if kind is OpKind.SQRT:
        return np.sqrt(args[0])
    if kind is OpKind.ERF:
        return _erf(args[0])
    if kind is OpKind.BROADCAST:
        return np.broadcast_to(args[0], tuple(attrs["shape"]))
    if kind is OpKind.RESHAPE:
        return args[0].reshape(tuple(attrs["shape"]))
    if kind is OpKind.TRANSPOSE:
        return np.transpose(args[0], tuple(attrs["perm"]))
    if kind is OpKind.REDUCE_SUM:
        return args[0].sum(axis=int(attrs["axis"]))
    if kind is OpKind.REDUCE_MAX:
        return args[0].max(axis=int(attrs["axis"]))
    if kind is OpKind.CONCAT:
        return np.concatenate(args, axis=int(attrs["axis"]))
    if kind is OpKind.GATHER:
        idx = np.rint(args[1]).astype(np.int64)
        table = args[0]
        axis = int(attrs.get("axis", 0))
        if idx.min() < 0 or idx.max() >= table.shape[axis]:
            raise ExecutionError(f"gather index out of range [0, {table.shape[axis]})")
        return np.take(table, idx, axis=axis)
    if kind is OpKind.SLICE:
        axis = int(attrs["axis"])
        sl = [slice(None)] * args[0].ndim
        sl[axis] = slice(int(attrs["start"]), int(attrs["stop"]))
        return args[0][tuple(sl)]
    if kind is OpKind.CONSTANT:
        return np.asarray(attrs["value"])
    raise ExecutionError(f"kind {kind} is not executable")


# ---------------------------------------------------------------------------
# Environment setup
# ---------------------------------------------------------------------------

def _materialize_weights(graph: Graph, seed: int, dtype) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    env = {}
    for spec in graph.weights:
        if spec.data is not None:
            env[spec.name] = np.asarray(spec.data, dtype=dtype).reshape(spec.shape)
        else:
            env[spec.name] = rng.uniform(0.5, 1.5, size=spec.shape).astype(dtype)
    return env


def _check_inputs(graph: Graph, named_inputs: dict, dtype) -> dict[str, np.ndarray]:
    env = {}
    for spec in graph.inputs:
        if spec.name not in named_inputs:
            raise ExecutionError(f"missing input {spec.name!r}")
        value = named_inputs[spec.name]
        if isinstance(value, TensorValue):
            value = value.data
        arr = np.asarray(value, dtype=dtype)
        if tuple(arr.shape) != spec.shape:
            raise ExecutionError(
                f"input {spec.name!r} has shape {tuple(arr.shape)}, expected {spec.shape}"
            )
        env[spec.name] = arr
    return env


@dataclass
class _Meter:
    flops: int = 0
    intermediate_bytes: int = 0
    op_count: int = 0
    layer_count: int = 0


def _eval_expr(expr: Expr, env: dict, meter: _Meter | None, where: str) -> np.ndarray:
    if expr.kind is None:
        if expr.ref not in env:
            raise ExecutionError(f"{where}: unknown tensor {expr.ref!r}")
        return env[expr.ref]
    args = [_eval_expr(c, env, meter, where) for c in expr.children]
    attrs = dict(expr.attrs)
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        out = _apply(expr.kind, args, attrs)
    if meter is not None:
        shapes = [a.shape for a in args]
        meter.flops += node_flops(Node("_", expr.kind, (), tuple(out.shape), expr.attrs), shapes)
        if expr.kind not in VIEW_KINDS:
            meter.op_count += 1
    return out


def run(
    target: Graph | FusedGraph,
    named_inputs: dict,
    seed: int = 0,
    dtype: str = "float64",
    _meter: _Meter | None = None,
) -> dict[str, np.ndarray]:
    """Execute a graph or fused graph; returns named outputs.

    Deterministic given inputs and seed. Missing weights are drawn from the
    seed; a non-finite intermediate raises NumericError naming the node.
    """
    np_dtype = np.dtype(dtype)
    if np_dtype not in (np.dtype("float32"), np.dtype("float64")):
        raise ExecutionError(f"dtype must be float32 or float64, got {dtype}")
    graph = target.graph if isinstance(target, FusedGraph) else target
    env = _materialize_weights(graph, seed, np_dtype)
    env.update(_check_inputs(graph, named_inputs, np_dtype))

    outputs = set(graph.outputs)

    def finish(name: str, value: np.ndarray) -> None:
        if not np.all(np.isfinite(value)):
            raise NumericError(f"non-finite intermediate at {name!r}")
        env[name] = value
        if _meter is not None and name not in outputs:
            _meter.intermediate_bytes += math.prod(value.shape) * ELEMENT_BYTES

    if isinstance(target, FusedGraph):
        block_result: dict[str, str] = {}  # block id -> produced tensor name
        for unit in target.schedule():
            if isinstance(unit, FusedBlock):
                out_name = unit.id[len("fused."):]
                value = _eval_expr(unit.expr, env, _meter, unit.id)
                if _meter is not None:
                    _meter.layer_count += 1
                if tuple(value.shape) != unit.shape:
                    raise ExecutionError(
                        f"block {unit.id!r} produced shape {value.shape}, expected {unit.shape}"
                    )
                finish(out_name, value)
                block_result[unit.id] = out_name
            else:
                _run_node(unit, env, _meter, finish)
    else:
        for node in graph.nodes:
            _run_node(node, env, _meter, finish)

    return {name: env[name] for name in graph.outputs}


def _run_node(node: Node, env: dict, meter: _Meter | None, finish) -> None:
    missing = [r for r in node.inputs if r not in env]
    if missing:
        raise ExecutionError(f"node {node.id!r} reads unknown tensor {missing[0]!r}")
    args = [env[r] for r in node.inputs]
    try:
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            out = _apply(node.kind, args, dict(node.attrs))
    except ExecutionError:
        raise
    except Exception as exc:  # numpy-level shape problems
        raise ExecutionError(f"node {node.id!r}: {exc}") from exc
    if meter is not None:
        meter.flops += node_flops(node, [a.shape for a in args])
        if node.kind not in VIEW_KINDS and node.kind not in (OpKind.CONSTANT, OpKind.INPUT):
            meter.op_count += 1
        meter.layer_count += 1
    finish(node.id, out)


# ---------------------------------------------------------------------------
# Measurement and equivalence
# ---------------------------------------------------------------------------

def measure(target: Graph | FusedGraph, named_inputs: dict, seed: int = 0) -> CostReport:
    """Dynamic cost accounting observed during one execution."""
    meter = _Meter()
    run(target, named_inputs, seed=seed, _meter=meter)
    return CostReport(
        flops=meter.flops,
        intermediate_bytes=meter.intermediate_bytes,
        op_count=meter.op_count,
        layer_count=meter.layer_count,
    )


def random_inputs(graph: Graph, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Positive-domain random inputs, U(0.5, 1.5)."""
    return {
        spec.name: rng.uniform(0.5, 1.5, size=spec.shape) for spec in graph.inputs
    }


def equivalence_check(
    g1: Graph | FusedGraph,
    g2: Graph | FusedGraph,
    trials: int = 100,
    tolerance: float = 1e-5,
    seed: int = 0,
) -> EquivalenceReport:
    """Run both targets on shared random positive inputs and compare outputs."""
    graph1 = g1.graph if isinstance(g1, FusedGraph) else g1
    graph2 = g2.graph if isinstance(g2, FusedGraph) else g2
    sig1 = ([(t.name, t.shape) for t in graph1.inputs], tuple(graph1.outputs))
    sig2 = ([(t.name, t.shape) for t in graph2.inputs], tuple(graph2.outputs))
    if sig1 != sig2:
        raise ExecutionError(f"signature mismatch: {sig1} vs {sig2}")

    max_abs = 0.0
    max_rel = 0.0
    ss = np.random.SeedSequence([seed, 0xC0FFEE])
    for child in ss.spawn(trials):
        rng = np.random.default_rng(child)
        inputs = random_inputs(graph1, rng)
        out1 = run(g1, inputs, seed=seed)
        out2 = run(g2, inputs, seed=seed)
        for name in graph1.outputs:
            a, b = out1[name], out2[name]
            if a.shape != b.shape:
                raise ExecutionError(f"output {name!r} shape changed: {a.shape} vs {b.shape}")
            abs_err = np.abs(a - b)
            # Relative error with a small absolute floor: rounding noise on
            # outputs that are legitimately ~0 must not register as error.
            denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-9)
            max_abs = max(max_abs, float(abs_err.max(initial=0.0)))
            max_rel = max(max_rel, float((abs_err / denom).max(initial=0.0)))
    return EquivalenceReport(
        trials=trials, max_abs_err=max_abs, max_rel_err=max_rel, tolerance=tolerance
    )
