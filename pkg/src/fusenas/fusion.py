"""Polynomial-law layer fusion.

Candidates are found with a closed set of seven templates: four driven by
computation laws (basic producer-consumer fusion, commutativity,
distributivity, associativity) and three driven by data access patterns
(aggregation into a Concat, transportation through a Gather, splitting
through a Slice). No general rewrite engine: the templates are matched
structurally and the specific laws claim their nodes before the generic
chain matcher runs.

Accounting follows the layer-count / operator-count convention:

- LC of a candidate is the number of graph nodes it absorbs.
- OC is the operator count of the candidate's expression *tree* (shared
  subexpressions expand per use, which is why the distributive case reads
  4 layers / 5 operators before fusion). Broadcast/Reshape are views and
  count zero; every other kind counts one per application.

Selection in `fuse` is greedy: candidates sorted by intermediate bytes
eliminated (descending), ties broken by larger compute-enlargement ratio and
then by earliest member, accepted only when disjoint from already accepted
candidates. The resulting FusedGraph is a partition: every original node is
either inside exactly one block, rewritten in place (commutative case), or
untouched.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum

from .graph_ir import (
    ELEMENT_BYTES,
    ELEMENTWISE,
    ELEMENTWISE_BINARY,
    REDUCTIONS,
    VIEW_KINDS,
    Graph,
    Node,
    OpKind,
    ParseError,
    Shape,
    node_flops,
)

REPORT_FORMAT = "fusenas-fusion-report"
FUSED_FORMAT = "fusenas-fused-graph"
FUSED_VERSION = 1


class FusionLaw(str, Enum):
    BASIC = "BasicFusion"
    COMMUTATIVE = "Commutative"
    DISTRIBUTIVE = "Distributive"
    ASSOCIATIVE = "Associative"
    DATA_AGGREGATION = "DataAggregation"
    DATA_TRANSPORTATION = "DataTransportation"
    DATA_SPLITTING = "DataSplitting"


class RewriteNotApplicable(ValueError):
    """Expression does not match the requested law's template."""


class FusionConflict(ValueError):
    """Candidate overlaps nodes that are already fused."""


# ---------------------------------------------------------------------------
# Expression trees (the body of a fused block)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Expr:
    """One operator application; leaves are external tensor references."""

    kind: OpKind | None  # None marks a leaf
    children: tuple["Expr", ...] = ()
    ref: str | None = None  # leaf tensor name
    attrs: tuple[tuple[str, object], ...] = ()

    @staticmethod
    def leaf(ref: str) -> "Expr":
        return Expr(kind=None, ref=ref)

    @staticmethod
    def op(kind: OpKind, *children: "Expr", **attrs) -> "Expr":
        return Expr(kind=kind, children=tuple(children), attrs=tuple(sorted(attrs.items())))

    def attr(self, name: str, default=None):
        for k, v in self.attrs:
            if k == name:
                return v
        return default

    def leaves(self) -> list[str]:
        if self.kind is None:
            return [self.ref]
        out: list[str] = []
        for c in self.children:
            out.extend(c.leaves())
        return out


def expr_op_count(expr: Expr) -> int:
    """Operator applications in the tree; views are free."""
    if expr.kind is None:
        return 0
    own = 0 if expr.kind in VIEW_KINDS else 1
    return own + sum(expr_op_count(c) for c in expr.children)


def expr_flops(expr: Expr, shape_of, out_shape: Shape) -> int:
    """Arithmetic work of evaluating the tree once (no sharing)."""
    if expr.kind is None:
        return 0
    shapes = [_expr_shape(c, shape_of) for c in expr.children]
    own = node_flops(Node("_", expr.kind, (), _expr_shape(expr, shape_of), expr.attrs), shapes)
    return own + sum(expr_flops(c, shape_of, out_shape) for c in expr.children)


def _expr_shape(expr: Expr, shape_of) -> Shape:
    from .graph_ir import infer_shape

    if expr.kind is None:
        return shape_of(expr.ref)
    shapes = [_expr_shape(c, shape_of) for c in expr.children]
    return infer_shape(expr.kind, shapes, dict(expr.attrs))


# ---------------------------------------------------------------------------
# Candidates and fused graphs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CostMetrics:
    compute_enlargement: float
    memory_reduction: int


@dataclass(frozen=True)
class FusionCandidate:
    node_ids: tuple[str, ...]  # topological order
    law: FusionLaw
    expr: Expr                  # post-fusion algebra of the block output
    before_lc: int
    before_oc: int
    after_lc: int
    after_oc: int
    metrics: CostMetrics
    output_id: str              # original node whose result the block yields
    rewrites: tuple[tuple[str, Expr], ...] = ()  # commutative in-place forms


@dataclass(frozen=True)
class FusedBlock:
    id: str
    expr: Expr
    inputs: tuple[str, ...]     # external tensor refs the expression reads
    shape: Shape
    law: FusionLaw


@dataclass(frozen=True)
class FusedGraph:
    """Blocks plus surviving nodes, topologically ordered together."""

    graph: Graph                               # original (for inputs/weights/outputs)
    blocks: tuple[FusedBlock, ...]
    nodes: tuple[Node, ...]                    # untouched or rewritten-in-place
    provenance: tuple[tuple[str, str], ...]    # original node id -> block id / node id

    def schedule(self) -> list[object]:
        """Blocks and nodes interleaved in executable (topological) order."""
        index = self.graph.topo_index()

        def key(unit) -> int:
            if isinstance(unit, FusedBlock):
                return max(index[m] for m, b in self.provenance if b == unit.id)
            return index.get(unit.id, 0)

        return sorted([*self.blocks, *self.nodes], key=key)

    def provenance_map(self) -> dict[str, str]:
        return dict(self.provenance)

    def output_of(self) -> dict[str, str]:
        """Original node id -> tensor name available after fusion."""
        out = {}
        for orig, target in self.provenance:
            out[orig] = target
        return out


@dataclass(frozen=True)
class FusionReportRow:
    law: FusionLaw
    members: tuple[str, ...]
    before_lc: int
    before_oc: int
    after_lc: int
    after_oc: int
    memory_reduction: int


@dataclass(frozen=True)
class FusionReport:
    rows: tuple[FusionReportRow, ...]
    original_lc: int
    fused_lc: int
    original_oc: int
    fused_oc: int

    def to_dict(self) -> dict:
        return {
            "format": REPORT_FORMAT,
            "version": FUSED_VERSION,
            "rows": [
                {
                    "law": r.law.value,
                    "members": list(r.members),
                    "before": [r.before_lc, r.before_oc],
                    "after": [r.after_lc, r.after_oc],
                    "memory_reduction": r.memory_reduction,
                }
                for r in self.rows
            ],
            "totals": {
                "original_lc": self.original_lc,
                "fused_lc": self.fused_lc,
                "original_oc": self.original_oc,
                "fused_oc": self.fused_oc,
            },
        }

    def render(self) -> str:
        lines = ["case  law                  before LC/OC  after LC/OC"]
        for i, r in enumerate(self.rows, 1):
            lines.append(
                f"{i:<5} {r.law.value:<20} {r.before_lc}/{r.before_oc:<12} {r.after_lc}/{r.after_oc}"
            )
        lines.append(
            f"totals: LC {self.original_lc} -> {self.fused_lc}, "
            f"OC {self.original_oc} -> {self.fused_oc}"
        )
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# Matching machinery
# ---------------------------------------------------------------------------

class _Ctx:
    def __init__(self, graph: Graph):
        self.graph = graph
        self.nodes = graph.node_map()
        self.index = graph.topo_index()
        self.outputs = set(graph.outputs)
        self.consumers: dict[str, list[str]] = {}
        for n in graph.nodes:
            for ref in n.inputs:
                self.consumers.setdefault(ref, []).append(n.id)
        self.weight_names = {w.name for w in graph.weights}
        self.input_names = {t.name for t in graph.inputs}

    def is_node(self, ref: str) -> bool:
        return ref in self.nodes

    def is_leaf(self, ref: str) -> bool:
        return ref in self.weight_names or ref in self.input_names

    def single_consumer(self, nid: str) -> str | None:
        cons = self.consumers.get(nid, [])
        if len(cons) == 1 and nid not in self.outputs:
            return cons[0]
        return None

    def shape_of(self, ref: str) -> Shape:
        if ref in self.nodes:
            return self.nodes[ref].shape
        for spec in self.graph.inputs:
            if spec.name == ref:
                return spec.shape
        for spec in self.graph.weights:
            if spec.name == ref:
                return spec.shape
        raise KeyError(ref)


def _node_expr(node: Node, resolve) -> Expr:
    return Expr(
        kind=node.kind,
        children=tuple(resolve(r) for r in node.inputs),
        attrs=node.attrs,
    )


def _subgraph_expr(ctx: _Ctx, members: set[str], root: str) -> Expr:
    """Tree expansion of `root` over `members`; everything else is a leaf."""

    def resolve(ref: str) -> Expr:
        if ref in members:
            return _subgraph_expr(ctx, members, ref)
        return Expr.leaf(ref)

    return _node_expr(ctx.nodes[root], resolve)


def _member_memory_reduction(ctx: _Ctx, members: list[str], output_id: str) -> int:
    """Bytes of member results that stop being materialized."""
    total = 0
    for m in members:
        if m == output_id or m in ctx.outputs:
            continue
        total += math.prod(ctx.nodes[m].shape) * ELEMENT_BYTES
    return total


def _member_flops(ctx: _Ctx, members: list[str]) -> int:
    total = 0
    for m in members:
        node = ctx.nodes[m]
        shapes = [ctx.shape_of(r) for r in node.inputs]
        total += node_flops(node, shapes)
    return total


def _candidate(
    ctx: _Ctx,
    law: FusionLaw,
    members: list[str],
    output_id: str,
    expr: Expr,
    after_lc: int = 1,
    rewrites: tuple[tuple[str, Expr], ...] = (),
) -> FusionCandidate:
    members = sorted(members, key=ctx.index.__getitem__)
    before_expr = _subgraph_expr(ctx, set(members), output_id)
    before_oc = expr_op_count(before_expr)
    after_oc = expr_op_count(expr)
    before_flops = _member_flops(ctx, members)
    after_flops = expr_flops(expr, ctx.shape_of, ctx.nodes[output_id].shape)
    enlargement = after_flops / before_flops if before_flops else 1.0
    # An in-place reorder keeps every layer materialized.
    reduction = (
        0
        if law is FusionLaw.COMMUTATIVE
        else _member_memory_reduction(ctx, members, output_id)
    )
    return FusionCandidate(
        node_ids=tuple(members),
        law=law,
        expr=expr,
        before_lc=len(members),
        before_oc=before_oc,
        after_lc=after_lc,
        after_oc=after_oc,
        metrics=CostMetrics(
            compute_enlargement=enlargement,
            memory_reduction=reduction,
        ),
        output_id=output_id,
        rewrites=rewrites,
    )


def _external_operand(ctx: _Ctx, node: Node, members: set[str]) -> str | None:
    """The operand of a binary op that is not the in-chain value, if any."""
    outside = [r for r in node.inputs if r not in members]
    if len(outside) == 1:
        return outside[0]
    return None


# --- Template: commutative reorder (law 2) ---------------------------------

def _match_commutative(ctx: _Ctx, claimed: set[str]) -> list[FusionCandidate]:
    found = []
    for node in ctx.graph.nodes:
        if node.kind is not OpKind.ADD or node.id in claimed:
            continue
        nxt_id = ctx.single_consumer(node.id)
        if nxt_id is None:
            continue
        nxt = ctx.nodes[nxt_id]
        if nxt.kind is not OpKind.SUB or nxt.inputs[0] != node.id or nxt_id in claimed:
            continue
        star, d = node.inputs
        if star == d:
            continue
        e = nxt.inputs[1]
        # (star + D) - E  ->  (star - E) + D : two rewritten layers, no merge
        swapped_sub = Expr.op(OpKind.SUB, Expr.leaf(star), Expr.leaf(e))
        swapped_add = Expr.op(OpKind.ADD, Expr.leaf(node.id), Expr.leaf(d))
        expr = Expr.op(OpKind.ADD, swapped_sub, Expr.leaf(d))
        cand = _candidate(
            ctx,
            FusionLaw.COMMUTATIVE,
            [node.id, nxt_id],
            nxt_id,
            expr,
            after_lc=2,
            rewrites=((node.id, swapped_sub), (nxt_id, swapped_add)),
        )
        found.append(cand)
    return found


# --- Template: distributive factoring (law 3) -------------------------------

def _match_distributive(ctx: _Ctx, claimed: set[str]) -> list[FusionCandidate]:
    found = []
    for node in ctx.graph.nodes:
        if node.kind is not OpKind.ADD or node.id in claimed:
            continue
        a, b = node.inputs
        if a == b or not (ctx.is_node(a) and ctx.is_node(b)):
            continue
        na, nb = ctx.nodes[a], ctx.nodes[b]
        if na.kind is not OpKind.MUL or nb.kind is not OpKind.MUL:
            continue
        if ctx.single_consumer(a) != node.id or ctx.single_consumer(b) != node.id:
            continue
        shared = set(na.inputs) & set(nb.inputs)
        if len(shared) != 1:
            continue
        s = shared.pop()
        if not ctx.is_node(s):
            continue
        s_node = ctx.nodes[s]
        if s_node.kind not in ELEMENTWISE or s_node.id in claimed:
            continue
        if set(ctx.consumers.get(s, [])) != {a, b}:
            continue
        g = next(r for r in na.inputs if r != s)
        h = next(r for r in nb.inputs if r != s)
        members = [s, a, b, node.id]
        if any(m in claimed for m in members):
            continue
        # (s) * G + (s) * H  ->  (s) * (G + H)
        s_expr = _subgraph_expr(ctx, {s}, s)
        expr = Expr.op(
            OpKind.MUL, s_expr, Expr.op(OpKind.ADD, Expr.leaf(g), Expr.leaf(h))
        )
        found.append(_candidate(ctx, FusionLaw.DISTRIBUTIVE, members, node.id, expr))
    return found


# --- Template: associative regrouping (law 4) -------------------------------

def _match_associative(ctx: _Ctx, claimed: set[str]) -> list[FusionCandidate]:
    found = []
    for node in ctx.graph.nodes:
        if node.kind is not OpKind.MUL or node.id in claimed:
            continue
        a, b = node.inputs
        if not (ctx.is_node(a) and ctx.is_node(b)):
            continue
        r1, r2 = ctx.nodes[a], ctx.nodes[b]
        if r1.kind is not OpKind.RECIPROCAL or r2.kind is not OpKind.RECIPROCAL:
            continue
        if ctx.single_consumer(a) != node.id or ctx.single_consumer(b) != node.id:
            continue
        s = r1.inputs[0]
        m = r2.inputs[0]
        if not ctx.is_node(m) or not ctx.is_node(s):
            continue
        m_node = ctx.nodes[m]
        if m_node.kind is not OpKind.MUL or s not in m_node.inputs:
            continue
        if ctx.single_consumer(m) != b:
            continue
        s_node = ctx.nodes[s]
        if s_node.kind not in ELEMENTWISE:
            continue
        if set(ctx.consumers.get(s, [])) != {a, m}:
            continue
        j = next((r for r in m_node.inputs if r != s), None)
        if j is None:
            continue
        members = [s, a, m, b, node.id]
        if any(x in claimed for x in members):
            continue
        # s^-1 * (s * J)^-1  ->  s^-2 * J^-1 (the algebra-preserving regrouping)
        s_expr = _subgraph_expr(ctx, {s}, s)
        expr = Expr.op(
            OpKind.MUL,
            Expr.op(OpKind.POWER, s_expr, exponent=-2.0),
            Expr.op(OpKind.RECIPROCAL, Expr.leaf(j)),
        )
        found.append(_candidate(ctx, FusionLaw.ASSOCIATIVE, members, node.id, expr))
    return found


# --- Template: aggregation into Concat (law 5) -------------------------------

def _match_aggregation(ctx: _Ctx, claimed: set[str]) -> list[FusionCandidate]:
    found = []
    for node in ctx.graph.nodes:
        if node.kind is not OpKind.CONCAT or node.id in claimed:
            continue
        members = [node.id]
        ok = True
        for ref in node.inputs:
            branch = []
            cur = ref
            while (
                ctx.is_node(cur)
                and ctx.nodes[cur].kind in ELEMENTWISE
                and ctx.single_consumer(cur) is not None
                and cur not in claimed
            ):
                branch.append(cur)
                ins = [r for r in ctx.nodes[cur].inputs if ctx.is_node(r)]
                nxt = None
                for r in ins:
                    if ctx.single_consumer(r) == cur and ctx.nodes[r].kind in ELEMENTWISE:
                        nxt = r
                        break
                if nxt is None:
                    break
                cur = nxt
            if not branch:
                ok = False
                break
            members.extend(branch)
        if not ok or len(members) < 3 or any(m in claimed for m in members):
            continue
        expr = _subgraph_expr(ctx, set(members), node.id)
        found.append(
            _candidate(ctx, FusionLaw.DATA_AGGREGATION, members, node.id, expr)
        )
    return found


# --- Template: transport through Gather (law 6) ------------------------------

def _match_transportation(ctx: _Ctx, claimed: set[str]) -> list[FusionCandidate]:
    found = []
    for node in ctx.graph.nodes:
        if node.kind is not OpKind.GATHER or node.id in claimed:
            continue
        src = node.inputs[0]
        if not ctx.is_node(src) or ctx.nodes[src].kind not in ELEMENTWISE:
            continue
        if ctx.single_consumer(src) != node.id or src in claimed:
            continue
        dst = ctx.single_consumer(node.id)
        if dst is None or ctx.nodes[dst].kind not in ELEMENTWISE or dst in claimed:
            continue
        members = [src, node.id, dst]
        expr = _subgraph_expr(ctx, set(members), dst)
        found.append(
            _candidate(ctx, FusionLaw.DATA_TRANSPORTATION, members, dst, expr)
        )
    return found


# --- Template: split through Slice (law 7) -----------------------------------

def _match_splitting(ctx: _Ctx, claimed: set[str]) -> list[FusionCandidate]:
    found = []
    for node in ctx.graph.nodes:
        if node.kind is not OpKind.SLICE or node.id in claimed:
            continue
        members = [node.id]
        cur = node.id
        while True:
            nxt = ctx.single_consumer(cur)
            if nxt is None or nxt in claimed or ctx.nodes[nxt].kind not in ELEMENTWISE:
                break
            members.append(nxt)
            cur = nxt
        if len(members) < 2:
            continue
        expr = _subgraph_expr(ctx, set(members), cur)
        found.append(_candidate(ctx, FusionLaw.DATA_SPLITTING, members, cur, expr))
    return found


# --- Template: basic producer-consumer chains (law 1, generic fallback) -----

# Chains may pass through elementwise math, reductions, and layout ops;
# MatMul/Gather/Concat/Slice start chains but never continue one (the
# specific data-access laws own the interesting shapes around them).
_CHAIN_FOLLOWERS = ELEMENTWISE | VIEW_KINDS | REDUCTIONS | {OpKind.TRANSPOSE}
_HEAVY_ROOTS = frozenset(
    {OpKind.MATMUL, OpKind.GATHER, OpKind.CONCAT, OpKind.SLICE}
)


def _absorb_side_producer(ctx: _Ctx, ref: str, claimed: set[str]) -> list[str] | None:
    """Side chain rooted only at weights/inputs that feeds a single member.

    Returns the extra member ids (deepest first), or None when the operand
    must stay an external block input.
    """
    chain: list[str] = []
    frontier = [ref]
    while frontier:
        cur = frontier.pop()
        if ctx.is_leaf(cur):
            continue
        if not ctx.is_node(cur):
            return None
        node = ctx.nodes[cur]
        if cur in claimed or ctx.single_consumer(cur) is None:
            return None
        if node.kind not in (ELEMENTWISE | VIEW_KINDS):
            return None
        chain.append(cur)
        frontier.extend(node.inputs)
    return chain


def _chain_starts(ctx: _Ctx, claimed: set[str]) -> list[Node]:
    """Nodes no unclaimed chain link feeds into."""
    fed: set[str] = set()
    for node in ctx.graph.nodes:
        if node.id in claimed:
            continue
        if node.kind in _CHAIN_FOLLOWERS or node.kind in _HEAVY_ROOTS:
            nxt = ctx.single_consumer(node.id)
            if nxt is not None and nxt not in claimed:
                if ctx.nodes[nxt].kind in _CHAIN_FOLLOWERS:
                    fed.add(nxt)
    return [
        n
        for n in ctx.graph.nodes
        if n.id not in claimed
        and n.id not in fed
        and (n.kind in _CHAIN_FOLLOWERS or n.kind in _HEAVY_ROOTS)
        and n.kind not in (OpKind.CONSTANT, OpKind.INPUT)
    ]


def _match_basic(ctx: _Ctx, claimed: set[str]) -> list[FusionCandidate]:
    found = []
    for node in _chain_starts(ctx, claimed):
        members = [node.id]
        cur = node.id
        while True:
            nxt_id = ctx.single_consumer(cur)
            if nxt_id is None or nxt_id in claimed:
                break
            nxt = ctx.nodes[nxt_id]
            if nxt.kind not in _CHAIN_FOLLOWERS:
                break
            extra: list[str] = []
            if nxt.kind in ELEMENTWISE_BINARY:
                other = _external_operand(ctx, nxt, {cur})
                if other is None:
                    break
                if not ctx.is_leaf(other):
                    absorbed = _absorb_side_producer(ctx, other, claimed)
                    if absorbed is not None:
                        extra = absorbed
            members.append(nxt_id)
            members.extend(extra)
            cur = nxt_id
        if len(members) < 2:
            continue
        expr = _subgraph_expr(ctx, set(members), cur)
        found.append(_candidate(ctx, FusionLaw.BASIC, members, cur, expr))
    return found


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------

def enumerate_candidates(graph: Graph) -> list[FusionCandidate]:
    """All template matches, deterministic, ordered by earliest member."""
    ctx = _Ctx(graph)
    claimed: set[str] = set()
    candidates: list[FusionCandidate] = []
    for matcher in (
        _match_commutative,
        _match_distributive,
        _match_associative,
        _match_aggregation,
        _match_transportation,
        _match_splitting,
    ):
        for cand in matcher(ctx, claimed):
            candidates.append(cand)
            claimed.update(cand.node_ids)
    candidates.extend(_match_basic(ctx, claimed))
    candidates.sort(key=lambda c: min(ctx.index[m] for m in c.node_ids))
    return candidates


def algebraic_rewrite(expr: Expr, law: FusionLaw) -> Expr:
    """Rewrite a law-template expression tree; raises when it do not match."""
    if law is FusionLaw.COMMUTATIVE:
        # sub(add(star, D), E) -> add(sub(star, E), D)
        if expr.kind is OpKind.SUB and expr.children[0].kind is OpKind.ADD:
            add = expr.children[0]
            return Expr.op(
                OpKind.ADD,
                Expr.op(OpKind.SUB, add.children[0], expr.children[1]),
                add.children[1],
            )
        raise RewriteNotApplicable("expected sub(add(.,.), .)")
    if law is FusionLaw.DISTRIBUTIVE:
        # add(mul(s, G), mul(s, H)) -> mul(s, add(G, H))
        if (
            expr.kind is OpKind.ADD
            and expr.children[0].kind is OpKind.MUL
            and expr.children[1].kind is OpKind.MUL
        ):
            left, right = expr.children
            for i in (0, 1):
                for j in (0, 1):
                    if left.children[i] == right.children[j]:
                        s = left.children[i]
                        g = left.children[1 - i]
                        h = right.children[1 - j]
                        return Expr.op(OpKind.MUL, s, Expr.op(OpKind.ADD, g, h))
        raise RewriteNotApplicable("expected add(mul(s,.), mul(s,.))")
    if law is FusionLaw.ASSOCIATIVE:
        # mul(recip(s), recip(mul(s, J))) -> mul(pow(s,-2), recip(J))
        if (
            expr.kind is OpKind.MUL
            and expr.children[0].kind is OpKind.RECIPROCAL
            and expr.children[1].kind is OpKind.RECIPROCAL
            and expr.children[1].children[0].kind is OpKind.MUL
        ):
            s = expr.children[0].children[0]
            inner = expr.children[1].children[0]
            for i in (0, 1):
                if inner.children[i] == s:
                    j = inner.children[1 - i]
                    return Expr.op(
                        OpKind.MUL,
                        Expr.op(OpKind.POWER, s, exponent=-2.0),
                        Expr.op(OpKind.RECIPROCAL, j),
                    )
        raise RewriteNotApplicable("expected mul(recip(s), recip(mul(s,.)))")
    raise RewriteNotApplicable(f"law {law.value} has no expression rewrite")


def apply_candidate(fused: FusedGraph, candidate: FusionCandidate) -> FusedGraph:
    """Replace the candidate's members with one block (or in-place rewrites)."""
    live = {n.id for n in fused.nodes}
    for m in candidate.node_ids:
        if m not in live:
            raise FusionConflict(f"node {m!r} is already fused")
    members = set(candidate.node_ids)
    keep = [n for n in fused.nodes if n.id not in members]
    prov = dict(fused.provenance)

    if candidate.law is FusionLaw.COMMUTATIVE:
        # In-place reorder: both layers survive with swapped operations.
        current = {n.id: n for n in fused.nodes}
        first_id, second_id = candidate.node_ids
        first, second = current[first_id], current[second_id]
        if first.kind is not OpKind.ADD or second.kind is not OpKind.SUB:
            raise FusionConflict(f"nodes {candidate.node_ids} were already rewritten")
        star, d = first.inputs
        e = second.inputs[1]
        new_first = Node(first_id, OpKind.SUB, (star, e), first.shape)
        new_second = Node(second_id, OpKind.ADD, (first_id, d), second.shape)
        keep.extend([new_first, new_second])
        index = fused.graph.topo_index()
        keep.sort(key=lambda n: index[n.id])
        prov[first_id] = first_id
        prov[second_id] = second_id
        return FusedGraph(fused.graph, fused.blocks, tuple(keep), tuple(sorted(prov.items())))

    block_id = f"fused.{candidate.output_id}"
    external = []
    seen = set()
    for ref in candidate.expr.leaves():
        if ref not in members and ref not in seen:
            external.append(ref)
            seen.add(ref)
    out_shape = fused.graph.node_map()[candidate.output_id].shape
    block = FusedBlock(
        id=block_id,
        expr=candidate.expr,
        inputs=tuple(external),
        shape=out_shape,
        law=candidate.law,
    )
    for m in candidate.node_ids:
        prov[m] = block_id
    return FusedGraph(
        fused.graph,
        fused.blocks + (block,),
        tuple(keep),
        tuple(sorted(prov.items())),
    )


def trivial_fused(graph: Graph) -> FusedGraph:
    return FusedGraph(
        graph,
        blocks=(),
        nodes=graph.nodes,
        provenance=tuple((n.id, n.id) for n in graph.nodes),
    )


def fuse(graph: Graph) -> tuple[FusedGraph, FusionReport]:
    """Greedy disjoint selection over all candidates.

    Order: memory_reduction desc, then compute_enlargement desc, then
    earliest member. Rows in the report stay in graph (topological) order.
    """
    ctx = _Ctx(graph)
    candidates = enumerate_candidates(graph)
    order = sorted(
        candidates,
        key=lambda c: (
            -c.metrics.memory_reduction,
            -c.metrics.compute_enlargement,
            min(ctx.index[m] for m in c.node_ids),
        ),
    )
    fused = trivial_fused(graph)
    accepted: list[FusionCandidate] = []
    taken: set[str] = set()
    for cand in order:
        if taken & set(cand.node_ids):
            continue
        fused = apply_candidate(fused, cand)
        accepted.append(cand)
        taken.update(cand.node_ids)

    accepted.sort(key=lambda c: min(ctx.index[m] for m in c.node_ids))
    rows = tuple(
        FusionReportRow(
            law=c.law,
            members=c.node_ids,
            before_lc=c.before_lc,
            before_oc=c.before_oc,
            after_lc=c.after_lc,
            after_oc=c.after_oc,
            memory_reduction=c.metrics.memory_reduction,
        )
        for c in accepted
    )
    unfused_ids = {n.id for n in fused.nodes} - {
        m for c in accepted for m in c.node_ids
    }
    unfused_lc = unfused_oc = 0
    for n in graph.nodes:
        if n.id in unfused_ids and n.kind not in (OpKind.CONSTANT, OpKind.INPUT):
            unfused_lc += 1
            if n.kind not in VIEW_KINDS:
                unfused_oc += 1
    report = FusionReport(
        rows=rows,
        original_lc=unfused_lc + sum(r.before_lc for r in rows),
        fused_lc=unfused_lc + sum(r.after_lc for r in rows),
        original_oc=unfused_oc + sum(r.before_oc for r in rows),
        fused_oc=unfused_oc + sum(r.after_oc for r in rows),
    )
    return fused, report


def fused_layer_count(fused: FusedGraph) -> int:
    """Executable units: blocks plus surviving non-constant nodes."""
    survivors = sum(
        1 for n in fused.nodes if n.kind not in (OpKind.CONSTANT, OpKind.INPUT)
    )
    return survivors + len(fused.blocks)


def fused_intermediate_bytes(fused: FusedGraph) -> int:
    """Bytes materialized between executable units (4 bytes/element)."""
    outputs = set(fused.graph.outputs)
    total = 0
    for unit in fused.schedule():
        if isinstance(unit, FusedBlock):
            out_id = unit.id[len("fused."):]
            if out_id not in outputs:
                total += math.prod(unit.shape) * ELEMENT_BYTES
        else:
            if unit.kind in (OpKind.CONSTANT, OpKind.INPUT):
                continue
            if unit.id not in outputs:
                total += math.prod(unit.shape) * ELEMENT_BYTES
    return total


# ---------------------------------------------------------------------------
# Fused-graph serialization
# ---------------------------------------------------------------------------

def _expr_to_dict(expr: Expr) -> dict:
    if expr.kind is None:
        return {"ref": expr.ref}
    return {
        "kind": expr.kind.value,
        "children": [_expr_to_dict(c) for c in expr.children],
        "attrs": {k: list(v) if isinstance(v, tuple) else v for k, v in expr.attrs},
    }


def _expr_from_dict(d: dict) -> Expr:
    if "ref" in d:
        return Expr.leaf(d["ref"])
    return Expr(
        kind=OpKind(d["kind"]),
        children=tuple(_expr_from_dict(c) for c in d["children"]),
        attrs=tuple(
            sorted((k, tuple(v) if isinstance(v, list) else v) for k, v in d.get("attrs", {}).items())
        ),
    )


def fused_to_dict(fused: FusedGraph) -> dict:
    from .graph_ir import graph_to_dict

    originals = fused.graph.node_map()
    return {
        "format": FUSED_FORMAT,
        "version": FUSED_VERSION,
        "graph": graph_to_dict(fused.graph),
        "blocks": [
            {
                "id": blk.id,
                "expr": _expr_to_dict(blk.expr),
                "inputs": list(blk.inputs),
                "shape": list(blk.shape),
                "law": blk.law.value,
            }
            for blk in fused.blocks
        ],
        "nodes": [n.id for n in fused.nodes],
        "node_overrides": [
            {
                "id": n.id,
                "kind": n.kind.value,
                "inputs": list(n.inputs),
                "shape": list(n.shape),
                "attrs": {k: list(v) if isinstance(v, tuple) else v for k, v in n.attrs},
            }
            for n in fused.nodes
            if n != originals.get(n.id)
        ],
        "provenance": {k: v for k, v in fused.provenance},
    }


def serialize_fused(fused: FusedGraph) -> str:
    return json.dumps(fused_to_dict(fused), indent=1)


def fused_from_dict(doc: dict, where: str = "<fused>") -> FusedGraph:
    from .graph_ir import graph_from_dict

    if doc.get("format") != FUSED_FORMAT:
        raise ParseError(f"{where}: not a {FUSED_FORMAT} document")
    if doc.get("version") != FUSED_VERSION:
        raise ParseError(f"{where}: unsupported version {doc.get('version')!r}")
    graph = graph_from_dict(doc["graph"], where)
    node_map = graph.node_map()
    overrides = {}
    for n in doc.get("node_overrides", []):
        overrides[n["id"]] = Node(
            id=n["id"],
            kind=OpKind(n["kind"]),
            inputs=tuple(n["inputs"]),
            shape=tuple(int(d) for d in n["shape"]),
            attrs=tuple(sorted((k, _amend(v)) for k, v in n.get("attrs", {}).items())),
        )
    blocks = tuple(
        FusedBlock(
            id=blk["id"],
            expr=_expr_from_dict(blk["expr"]),
            inputs=tuple(blk["inputs"]),
            shape=tuple(int(d) for d in blk["shape"]),
            law=FusionLaw(blk["law"]),
        )
        for blk in doc["blocks"]
    )
    nodes = tuple(overrides.get(nid, node_map[nid]) for nid in doc["nodes"])
    provenance = tuple(sorted(doc["provenance"].items()))
    return FusedGraph(graph, blocks, nodes, provenance)


def _amend(value):
    return tuple(value) if isinstance(value, list) else value


def deserialize_fused(text: str, where: str = "<fused>") -> FusedGraph:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{where}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    return fused_from_dict(doc, where)
