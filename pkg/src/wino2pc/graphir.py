"""Protocol graph IR: typed nodes, width/scale inference, static cost estimation.

Node kinds: Input, Requant, Ext, Trunc, TR, FeatureTransform,
OutputTransform, Gemm, Relu, ResidualAdd, Output.

Conventions:
  * Requant nodes are the zero-cost local ring narrowing (drop high bits,
    scale unchanged).  Scale-changing re-quantization is lowered to
    explicit Trunc / TR / Ext nodes so the optimizer can fuse them.
  * A Trunc decomposed by the optimizer into a TR/Ext pair carries `unit`
    attributes; while both members are alive the pair is charged as the
    original monolithic truncation (the decomposition is a wire-level
    identity), and the members revert to their own formulas once fusion
    consumes one of them.
  * `msb_opt` on a conversion selects the discounted MSB-known charge;
    it is set by the optimizer, never implied by the data.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .costs import CostModel
from .errors import GraphError
from .ledger import Phase
from .protocols import BitImportance
from .winograd import winograd_matrices, tiling_spec

KINDS = {"Input", "Requant", "Ext", "Trunc", "TR", "FeatureTransform",
         "OutputTransform", "Gemm", "Relu", "ResidualAdd", "Output"}

LOCAL_KINDS = {"Requant", "FeatureTransform", "OutputTransform",
               "ResidualAdd"}


def clog2(v: int) -> int:
    return max(math.ceil(math.log2(v)), 0) if v > 1 else 0


@dataclass
class Node:
    id: str
    kind: str
    inputs: list[str]
    attrs: dict = field(default_factory=dict)

    def copy(self) -> "Node":
        return Node(self.id, self.kind, list(self.inputs), dict(self.attrs))


@dataclass(frozen=True)
class Meta:
    ring: int
    scale_exp: int
    vb: int          # worst-case live value bits (signed width actually used)
    msb: bool        # provably nonnegative along this edge
    shape: tuple[int, ...]

    @property
    def n(self) -> int:
        return int(np.prod(self.shape)) if self.shape else 1


class GraphIR:
    def __init__(self, nodes: list[Node] | None = None,
                 weights: dict | None = None):
        self.nodes: dict[str, Node] = {}
        self.weights: dict[str, dict] = weights or {}
        for n in nodes or []:
            self.add(n)

    def add(self, node: Node) -> Node:
        if node.kind not in KINDS:
            raise GraphError(f"unknown node kind {node.kind!r}")
        if node.id in self.nodes:
            raise GraphError(f"duplicate node id {node.id!r}")
        for src in node.inputs:
            if src not in self.nodes:
                raise GraphError(f"node {node.id!r} uses unknown input {src!r}")
        self.nodes[node.id] = node
        return node

    def __iter__(self):
        return iter(self.nodes.values())

    def __len__(self):
        return len(self.nodes)

    def node(self, nid: str) -> Node:
        return self.nodes[nid]

    def consumers(self, nid: str) -> list[Node]:
        return [n for n in self.nodes.values() if nid in n.inputs]

    def copy(self) -> "GraphIR":
        g = GraphIR()
        g.weights = {k: dict(v) for k, v in self.weights.items()}
        for n in self.nodes.values():
            g.nodes[n.id] = n.copy()
        return g

    def remove(self, nid: str) -> None:
        del self.nodes[nid]

    def importance(self, gemm: Node) -> BitImportance:
        return BitImportance(tuple(gemm.attrs["importance"]))

    # -- serialization ---------------------------------------------------------

    def to_dict(self) -> dict:
        def clean(v):
            if isinstance(v, np.ndarray):
                return v.tolist()
            if isinstance(v, tuple):
                return list(v)
            if isinstance(v, (np.integer,)):
                return int(v)
            return v

        return {
            "nodes": [
                {"id": n.id, "kind": n.kind, "inputs": list(n.inputs),
                 "attrs": {k: clean(v) for k, v in n.attrs.items()}}
                for n in self.nodes.values()
            ],
            "weights": {
                name: {
                    "codes": np.asarray(w["codes"]).tolist(),
                    "importance": list(w["importance"]),
                    "signed": bool(w.get("signed", True)),
                }
                for name, w in self.weights.items()
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GraphIR":
        g = cls()
        g.weights = {
            name: {
                "codes": np.asarray(w["codes"], dtype=np.int64),
                "importance": tuple(w["importance"]),
                "signed": bool(w.get("signed", True)),
            }
            for name, w in d.get("weights", {}).items()
        }
        for nd in d["nodes"]:
            g.add(Node(nd["id"], nd["kind"], list(nd["inputs"]),
                       dict(nd.get("attrs", {}))))
        return g

    def to_json(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=1)

    @classmethod
    def from_json(cls, path) -> "GraphIR":
        with open(path) as f:
            return cls.from_dict(json.load(f))


# -- inference / type checking ----------------------------------------------------

def infer(g: GraphIR) -> dict[str, Meta]:
    """Compute (ring, scale, live bits, msb, shape) for every node output.

    Raises GraphError on inconsistent widths or scales; the graph must be
    listed in topological order.
    """
    metas: dict[str, Meta] = {}
    for n in g:
        ins = []
        for src in n.inputs:
            if src not in metas:
                raise GraphError(f"node {n.id!r} listed before its input {src!r}")
            ins.append(metas[src])
        metas[n.id] = _infer_node(g, n, ins)
    return metas


def _infer_node(g: GraphIR, n: Node, ins: list[Meta]) -> Meta:
    a = n.attrs
    if n.kind == "Input":
        bits = int(a["bits"])
        return Meta(bits, int(a.get("scale_exp", 0)),
                    int(a.get("vb", bits)), bool(a.get("msb", False)),
                    tuple(a["shape"]))
    if not ins:
        raise GraphError(f"{n.kind} node {n.id!r} has no input")
    x = ins[0]
    if n.kind == "Ext":
        to = int(a["to_bits"])
        if to <= x.ring:
            raise GraphError(f"Ext {n.id!r}: target {to} <= input ring {x.ring}")
        return Meta(to, x.scale_exp, x.vb, x.msb, x.shape)
    if n.kind == "Trunc":
        s = int(a["shift"])
        if not 0 < s < x.ring:
            raise GraphError(f"Trunc {n.id!r}: bad shift {s} for ring {x.ring}")
        return Meta(x.ring, x.scale_exp - s, max(x.vb - s, 1), x.msb, x.shape)
    if n.kind == "TR":
        s = int(a["shift"])
        if not 0 < s < x.ring:
            raise GraphError(f"TR {n.id!r}: bad shift {s} for ring {x.ring}")
        return Meta(x.ring - s, x.scale_exp - s, max(x.vb - s, 1), x.msb, x.shape)
    if n.kind == "Requant":
        to = int(a["to_bits"])
        if to > x.ring:
            raise GraphError(f"Requant {n.id!r} cannot widen {x.ring} -> {to}")
        return Meta(to, x.scale_exp, min(x.vb, to), x.msb, x.shape)
    if n.kind == "Relu":
        return Meta(x.ring, x.scale_exp, x.vb, True, x.shape)
    if n.kind in ("FeatureTransform", "OutputTransform"):
        plan = winograd_matrices(int(a["m"]), int(a["r"]))
        # transform sandwiches on raw share words need slack under int64
        if x.ring > 52:
            raise GraphError(
                f"{n.kind} {n.id!r}: a {x.ring}-bit ring leaves no headroom "
                f"for the transform arithmetic")
    if n.kind == "FeatureTransform":
        nb, c, h, w = x.shape
        spec = tiling_spec(h, w, plan, int(a.get("pad", 1)))
        vb = x.vb + plan.ft_ext_bits
        if vb > x.ring:
            raise GraphError(
                f"FeatureTransform {n.id!r}: {x.vb}+{plan.ft_ext_bits} live bits "
                f"exceed the {x.ring}-bit ring")
        return Meta(x.ring, x.scale_exp, vb, False,
                    (nb, c, spec.tiles, plan.t, plan.t))
    if n.kind == "OutputTransform":
        nb, k = x.shape[0], x.shape[1]
        spec = tiling_spec(int(a["in_h"]), int(a["in_w"]), plan,
                           int(a.get("pad", 1)))
        vb = x.vb + plan.out_ext_bits
        if vb > x.ring:
            raise GraphError(
                f"OutputTransform {n.id!r}: {x.vb}+{plan.out_ext_bits} live "
                f"bits exceed the {x.ring}-bit ring")
        return Meta(x.ring, x.scale_exp, vb, False,
                    (nb, k, spec.out_h, spec.out_w))
    if n.kind == "Gemm":
        acc = int(a["acc_bits"])
        if x.ring != acc:
            raise GraphError(
                f"Gemm {n.id!r} expects operand in the {acc}-bit ring, got {x.ring}")
        imp = g.importance(n)
        grow = clog2(int(a["l"])) + clog2(imp.total)
        vb = min(acc, x.vb + grow)
        scale = x.scale_exp + int(a.get("w_scale_exp", 0))
        layout = a.get("layout", "fc")
        m = int(a["m"])
        if layout == "win":
            nb, c, t, tt, _ = x.shape
            shape = (nb, m, t, tt, tt)
        elif layout == "direct":
            nb, c, h, w = x.shape
            stride, pad, r = int(a["stride"]), int(a["pad"]), int(a["r"])
            oh = (h + 2 * pad - r) // stride + 1
            ow = (w + 2 * pad - r) // stride + 1
            shape = (nb, m, oh, ow)
        else:
            shape = (x.shape[0], m)
        return Meta(acc, scale, vb, False, shape)
    if n.kind == "ResidualAdd":
        main, res = ins
        if main.ring != res.ring:
            raise GraphError(
                f"ResidualAdd {n.id!r}: ring mismatch {main.ring} vs {res.ring}")
        if main.scale_exp < res.scale_exp:
            raise GraphError(
                f"ResidualAdd {n.id!r}: residual scale finer than main branch")
        if main.shape != res.shape:
            raise GraphError(f"ResidualAdd {n.id!r}: shape mismatch")
        shift = main.scale_exp - res.scale_exp
        vb = min(main.ring, max(main.vb, res.vb + shift) + 1)
        return Meta(main.ring, main.scale_exp, vb, False, main.shape)
    if n.kind == "Output":
        return x
    raise GraphError(f"unhandled kind {n.kind}")


# -- static communication estimation ----------------------------------------------

def _unit_partner_alive(g: GraphIR, n: Node) -> bool:
    uid = n.attrs.get("unit")
    if uid is None:
        return False
    role = n.attrs["unit_role"]
    other_role = "tail" if role == "head" else "head"
    for m in g:
        if m.attrs.get("unit") == uid and m.attrs.get("unit_role") == other_role:
            return True
    return False


def node_cost(g: GraphIR, metas: dict[str, Meta], n: Node,
              cm: CostModel) -> dict[Phase, int]:
    """Modeled bits a node charges when executed; shared with the runtime."""
    zero = {Phase.OFFLINE: 0, Phase.ONLINE: 0}
    a = n.attrs
    msb = bool(a.get("msb_opt", False))
    if n.kind == "Input":
        m = metas[n.id]
        return {Phase.OFFLINE: 0, Phase.ONLINE: m.n * cm.io(m.ring)}
    if n.kind == "Output":
        x = metas[n.inputs[0]]
        return {Phase.OFFLINE: 0, Phase.ONLINE: x.n * cm.io(x.ring)}
    if n.kind in ("Requant", "FeatureTransform", "OutputTransform",
                  "ResidualAdd"):
        return dict(zero)
    x = metas[n.inputs[0]]
    if n.kind == "Ext":
        if _unit_partner_alive(g, n):
            return dict(zero)  # charged on the unit head
        return {Phase.OFFLINE: 0,
                Phase.ONLINE: x.n * cm.ext(x.ring, int(a["to_bits"]), msb)}
    if n.kind == "Trunc":
        return {Phase.OFFLINE: 0,
                Phase.ONLINE: x.n * cm.trunc(x.ring, int(a["shift"]), msb)}
    if n.kind == "TR":
        if _unit_partner_alive(g, n):
            modeled = x.n * cm.trunc(int(a["unit_l1"]), int(a["unit_shift"]), msb)
        else:
            modeled = x.n * cm.tr(x.ring, int(a["shift"]), msb)
        return {Phase.OFFLINE: 0, Phase.ONLINE: modeled}
    if n.kind == "Relu":
        return {Phase.OFFLINE: 0, Phase.ONLINE: x.n * cm.relu(x.ring)}
    if n.kind == "Gemm":
        p = int(a.get("positions", 1))
        m_, l_, lw = int(a["m"]), int(a["l"]), int(a["lw"])
        n_cols = int(a["n_cols"])
        acc = int(a["acc_bits"])
        return {Phase.OFFLINE: p * cm.gemm_offline(m_, l_, lw),
                Phase.ONLINE: p * cm.gemm_online(m_, l_, lw, n_cols, acc)}
    raise GraphError(f"unhandled kind {n.kind}")


def estimate_comm(g: GraphIR, cm: CostModel | None = None):
    """Static per-node and total modeled bits, offline/online split.

    Matches the executed ledger exactly for any graph: the runtime charges
    through this same function.
    """
    cm = cm or CostModel()
    metas = infer(g)
    per_node = {n.id: node_cost(g, metas, n, cm) for n in g}
    totals = {
        Phase.OFFLINE: sum(c[Phase.OFFLINE] for c in per_node.values()),
        Phase.ONLINE: sum(c[Phase.ONLINE] for c in per_node.values()),
    }
    totals["total"] = totals[Phase.OFFLINE] + totals[Phase.ONLINE]
    return per_node, totals
