"""Hand-built graphs used by tests, demos, and the fusion report walkthrough.

`seven_case_graph` wires two graph sections (entry tensors A and K) so that
each fusion law matches exactly once:

  section A: (A x B)^-1 + C  |  * + D - E  |  (* + F) o G + (* + F) o H
             |  (* + I)^-1 o ((* + I) o J)^-1
  section K: (K + L)^-1 ++ (K o M)^-1  |  index(* o N) + O  |  *[:] o P - Q

All tensors are 4x4 (8x4 after the concat) so the algebra, not broadcasting,
drives every match.
"""

from __future__ import annotations

from .graph_ir import Graph, Node, OpKind, TensorSpec, infer_shape


class _G:
    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.shapes: dict[str, tuple[int, ...]] = {}

    def add(self, nid: str, kind: OpKind, inputs: list[str], **attrs) -> str:
        shape = infer_shape(kind, [self.shapes[r] for r in inputs], attrs)
        self.nodes.append(Node(nid, kind, tuple(inputs), shape, tuple(sorted(attrs.items()))))
        self.shapes[nid] = shape
        return nid


def seven_case_graph() -> Graph:
    g = _G()
    n = 4
    inputs = [TensorSpec("A", (n, n)), TensorSpec("K", (n, n))]
    weight_names = ["B", "C", "D", "E", "F", "G", "H", "I", "J", "L", "M", "O"]
    weights = [TensorSpec(w, (n, n)) for w in weight_names]
    weights.append(TensorSpec("N", (2 * n, n)))
    weights.append(TensorSpec("P", (2, n)))
    weights.append(TensorSpec("Q", (2, n)))
    weights.append(
        TensorSpec("idx", (n,), data=tuple(float(i) for i in (0, 2, 4, 6)))
    )
    for spec in inputs + weights:
        g.shapes[spec.name] = spec.shape

    # case 1: basic fusion over a MatMul -> Reciprocal -> Add chain
    mm = g.add("s1.matmul", OpKind.MATMUL, ["A", "B"])
    rc = g.add("s1.recip", OpKind.RECIPROCAL, [mm])
    c1 = g.add("s1.plus_c", OpKind.ADD, [rc, "C"])
    # case 2: commutative reorder of + D - E
    c2a = g.add("s2.plus_d", OpKind.ADD, [c1, "D"])
    c2 = g.add("s2.minus_e", OpKind.SUB, [c2a, "E"])
    # case 3: distributive factoring
    s3 = g.add("s3.plus_f", OpKind.ADD, [c2, "F"])
    g3 = g.add("s3.times_g", OpKind.MUL, [s3, "G"])
    h3 = g.add("s3.times_h", OpKind.MUL, [s3, "H"])
    c3 = g.add("s3.sum", OpKind.ADD, [g3, h3])
    # case 4: associative regrouping
    s4 = g.add("s4.plus_i", OpKind.ADD, [c3, "I"])
    r41 = g.add("s4.recip_s", OpKind.RECIPROCAL, [s4])
    m4 = g.add("s4.times_j", OpKind.MUL, [s4, "J"])
    r42 = g.add("s4.recip_sj", OpKind.RECIPROCAL, [m4])
    c4 = g.add("s4.product", OpKind.MUL, [r41, r42])
    # case 5: data aggregation into a concat
    a5 = g.add("s5.k_plus_l", OpKind.ADD, ["K", "L"])
    r51 = g.add("s5.recip_kl", OpKind.RECIPROCAL, [a5])
    m5 = g.add("s5.k_times_m", OpKind.MUL, ["K", "M"])
    r52 = g.add("s5.recip_km", OpKind.RECIPROCAL, [m5])
    c5 = g.add("s5.concat", OpKind.CONCAT, [r51, r52], axis=0)
    # case 6: data transportation through a gather
    m6 = g.add("s6.times_n", OpKind.MUL, [c5, "N"])
    g6 = g.add("s6.index", OpKind.GATHER, [m6, "idx"], axis=0)
    c6 = g.add("s6.plus_o", OpKind.ADD, [g6, "O"])
    # case 7: data splitting through a slice
    s7 = g.add("s7.rows", OpKind.SLICE, [c6], axis=0, start=0, stop=2)
    m7 = g.add("s7.times_p", OpKind.MUL, [s7, "P"])
    c7 = g.add("s7.minus_q", OpKind.SUB, [m7, "Q"])

    return Graph(
        nodes=tuple(g.nodes),
        inputs=tuple(inputs),
        weights=tuple(weights),
        outputs=(c4, c7),
    )
