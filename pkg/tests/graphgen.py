"""Random graph generator for fusion property tests.

Stitches randomized instances of the seven fusion-law templates (plus plain
elementwise/matmul segments) onto a running 4x4 backbone. Weight values are
chosen so every intermediate stays safely positive: reciprocals never see
zero and subtractions cannot cancel to machine noise.
"""

from __future__ import annotations

import numpy as np

from fusenas.graph_ir import Graph, Node, OpKind, TensorSpec, infer_shape

N = 4


class _Gen:
    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.nodes: list[Node] = []
        self.weights: list[TensorSpec] = []
        self.shapes: dict[str, tuple[int, ...]] = {}
        self.counter = 0

    def fresh(self, tag: str) -> str:
        self.counter += 1
        return f"{tag}{self.counter}"

    def weight(self, low: float, high: float, shape=(N, N)) -> str:
        name = self.fresh("w")
        data = self.rng.uniform(low, high, size=shape)
        self.weights.append(
            TensorSpec(name, shape, tuple(map(tuple, data.reshape(shape[0], -1))))
        )
        self.shapes[name] = shape
        return name

    def emit(self, kind: OpKind, inputs: list[str], **attrs) -> str:
        nid = self.fresh("n")
        shape = infer_shape(kind, [self.shapes[r] for r in inputs], attrs)
        self.nodes.append(
            Node(nid, kind, tuple(inputs), shape, tuple(sorted(attrs.items())))
        )
        self.shapes[nid] = shape
        return nid


def _seg_basic(g: _Gen, cur: str) -> str:
    mm = g.emit(OpKind.MATMUL, [cur, g.weight(0.5, 1.5)])
    rc = g.emit(OpKind.RECIPROCAL, [mm])
    return g.emit(OpKind.ADD, [rc, g.weight(0.5, 1.5)])


def _seg_commutative(g: _Gen, cur: str) -> str:
    # + D - E with D drawn large enough that the difference stays positive.
    add = g.emit(OpKind.ADD, [cur, g.weight(2.5, 3.5)])
    return g.emit(OpKind.SUB, [add, g.weight(0.5, 1.5)])


def _seg_distributive(g: _Gen, cur: str) -> str:
    s = g.emit(OpKind.ADD, [cur, g.weight(0.5, 1.5)])
    a = g.emit(OpKind.MUL, [s, g.weight(0.5, 1.5)])
    b = g.emit(OpKind.MUL, [s, g.weight(0.5, 1.5)])
    return g.emit(OpKind.ADD, [a, b])


def _seg_associative(g: _Gen, cur: str) -> str:
    s = g.emit(OpKind.ADD, [cur, g.weight(0.5, 1.5)])
    r1 = g.emit(OpKind.RECIPROCAL, [s])
    m = g.emit(OpKind.MUL, [s, g.weight(0.5, 1.5)])
    r2 = g.emit(OpKind.RECIPROCAL, [m])
    return g.emit(OpKind.MUL, [r1, r2])


def _seg_aggregation(g: _Gen, cur: str) -> str:
    a = g.emit(OpKind.ADD, [cur, g.weight(0.5, 1.5)])
    r1 = g.emit(OpKind.RECIPROCAL, [a])
    m = g.emit(OpKind.MUL, [cur, g.weight(0.5, 1.5)])
    r2 = g.emit(OpKind.RECIPROCAL, [m])
    cat = g.emit(OpKind.CONCAT, [r1, r2], axis=0)
    # Fold the 2N x N aggregate back to N x N so segments keep composing.
    return g.emit(OpKind.SLICE, [cat], axis=0, start=0, stop=N)


def _seg_transportation(g: _Gen, cur: str) -> str:
    m = g.emit(OpKind.MUL, [cur, g.weight(0.5, 1.5)])
    name = g.fresh("idx")
    perm = tuple(float(i) for i in g.rng.permutation(N))
    g.weights.append(TensorSpec(name, (N,), perm))
    g.shapes[name] = (N,)
    gt = g.emit(OpKind.GATHER, [m, name], axis=0)
    return g.emit(OpKind.ADD, [gt, g.weight(0.5, 1.5)])


def _seg_splitting(g: _Gen, cur: str) -> str:
    sl = g.emit(OpKind.SLICE, [cur], axis=0, start=0, stop=2)
    m = g.emit(OpKind.MUL, [sl, g.weight(0.5, 1.5, shape=(2, N))])
    sub = g.emit(OpKind.SUB, [m, g.weight(0.1, 0.2, shape=(2, N))])
    # Restore the full height by stacking the split against itself.
    return g.emit(OpKind.CONCAT, [sub, sub], axis=0)


def _seg_elementwise(g: _Gen, cur: str) -> str:
    kind = [OpKind.ADD, OpKind.MUL, OpKind.SQRT, OpKind.EXP][g.rng.integers(4)]
    if kind in (OpKind.ADD, OpKind.MUL):
        return g.emit(kind, [cur, g.weight(0.5, 1.5)])
    if kind is OpKind.EXP:
        # keep magnitudes tame: exp of a reciprocal-compressed value
        rc = g.emit(OpKind.RECIPROCAL, [g.emit(OpKind.ADD, [cur, g.weight(1.0, 2.0)])])
        return g.emit(OpKind.EXP, [rc])
    return g.emit(kind, [cur])


def _seg_matmul(g: _Gen, cur: str) -> str:
    return g.emit(OpKind.MATMUL, [cur, g.weight(0.5, 1.5)])


SEGMENTS = [
    _seg_basic,
    _seg_commutative,
    _seg_distributive,
    _seg_associative,
    _seg_aggregation,
    _seg_transportation,
    _seg_splitting,
    _seg_elementwise,
    _seg_matmul,
]


def random_template_graph(seed: int, segments: int = 5) -> Graph:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9E4]))
    g = _Gen(rng)
    g.shapes["x"] = (N, N)
    cur = "x"
    for _ in range(segments):
        seg = SEGMENTS[rng.integers(len(SEGMENTS))]
        cur = seg(g, cur)
    return Graph(
        nodes=tuple(g.nodes),
        inputs=(TensorSpec("x", (N, N)),),
        weights=tuple(g.weights),
        outputs=(cur,),
    )


def random_fanout_graph(seed: int, segments: int = 7) -> Graph:
    """Backbone plus random taps: some intermediates become extra graph
    outputs, some merge back in later (multi-consumer fan-out points)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xBAD]))
    g = _Gen(rng)
    g.shapes["x"] = (N, N)
    cur = "x"
    taps: list[str] = []
    for _ in range(segments):
        seg = SEGMENTS[rng.integers(len(SEGMENTS))]
        cur = seg(g, cur)
        if rng.random() < 0.3:
            taps.append(cur)
        if taps and rng.random() < 0.3:
            cur = g.emit(OpKind.ADD, [cur, taps[rng.integers(len(taps))]])
    outputs = [cur] + [t for t in taps if rng.random() < 0.5 and t != cur]
    return Graph(
        nodes=tuple(g.nodes),
        inputs=(TensorSpec("x", (N, N)),),
        weights=tuple(g.weights),
        outputs=tuple(dict.fromkeys(outputs)),
    )
