"""Shared test utilities: micro-graph builders, a random graph generator,
and a paired TCP driver."""

import itertools
import threading

import numpy as np

from wino2pc.graphir import GraphIR, Node, clog2, infer
from wino2pc.protocols import default_importance
from wino2pc.qtensor import QTensor, QuantParams, ring_reduce
from wino2pc.sharing import PartyId

_PORTS = itertools.count(24000)


def run_tcp_both(graph, x, seed):
    """Run both parties over a real loopback socket; returns the client view."""
    from wino2pc.runner import run_graph_party_tcp

    port = next(_PORTS)
    res = {}

    def server():
        res["s"] = run_graph_party_tcp(graph, PartyId.SERVER, None,
                                       "127.0.0.1", port, seed=seed)

    def client():
        res["c"] = run_graph_party_tcp(graph, PartyId.CLIENT, x,
                                       "127.0.0.1", port, seed=seed)

    ts = threading.Thread(target=server)
    tc = threading.Thread(target=client)
    ts.start()
    tc.start()
    ts.join(120)
    tc.join(120)
    return res["c"]


def chain_graph(input_bits, specs, n=8, scale_exp=0, shape=None, vb=None):
    """Build Input -> ops -> Output from (kind, attrs) tuples."""
    g = GraphIR()
    attrs = {"shape": list(shape or (n,)), "bits": input_bits,
             "scale_exp": scale_exp}
    if vb is not None:
        attrs["vb"] = vb
    g.add(Node("input", "Input", [], attrs))
    prev = "input"
    for i, (kind, attrs) in enumerate(specs):
        node = Node(f"n{i}", kind, [prev], dict(attrs))
        g.add(node)
        prev = node.id
    g.add(Node("output", "Output", [prev], {}))
    infer(g)
    return g


def random_input_for(g: GraphIR, seed=0) -> QTensor:
    meta = infer(g)["input"]
    rng = np.random.default_rng(seed)
    data = ring_reduce(rng.integers(-(1 << 30), 1 << 30, size=meta.shape),
                       meta.ring)
    return QTensor(data, QuantParams(meta.ring, meta.scale_exp))


def random_graph(seed: int) -> GraphIR:
    """Random valid protocol graph: conversions, ReLU, small GEMMs, residuals."""
    rng = np.random.default_rng(seed)
    feats = int(rng.integers(2, 7))
    bits = int(rng.integers(8, 15))
    g = GraphIR()
    g.add(Node("input", "Input", [],
               {"shape": [1, feats], "bits": bits, "scale_exp": 0}))
    prev = "input"
    ring, vb, scale = bits, bits, 0
    fork = ("input", bits, 0) if rng.random() < 0.4 else None
    n_ops = int(rng.integers(2, 8))
    idx = 0

    def emit(kind, **attrs):
        nonlocal prev, idx
        node = Node(f"n{idx}", kind, [prev], attrs)
        g.add(node)
        prev = node.id
        idx += 1
        return node

    did_gemm = False
    for _ in range(n_ops):
        choices = ["ext", "relu"]
        if vb >= 2 and ring >= 3:
            choices += ["trunc", "tr"]
        if ring > max(vb, 2):
            choices.append("narrow")
        if not did_gemm and fork is None and ring <= 14:
            choices.append("gemm")
        op = rng.choice(choices)
        if op == "ext" and ring < 34:
            to = int(rng.integers(ring + 1, ring + 7))
            emit("Ext", to_bits=to)
            ring = to
        elif op == "trunc":
            s = int(rng.integers(1, min(vb, ring)))
            emit("Trunc", shift=s)
            vb = max(vb - s, 1)
            scale -= s
        elif op == "tr" and ring - 1 > 1:
            s = int(rng.integers(1, min(vb, ring - 1)))
            emit("TR", shift=s)
            ring -= s
            vb = max(vb - s, 1)
            scale -= s
        elif op == "narrow":
            to = int(rng.integers(max(vb, 2), ring))
            emit("Requant", to_bits=to)
            ring = to
        elif op == "relu":
            emit("Relu")
        elif op == "gemm":
            lw = int(rng.choice([2, 3, 4]))
            imp = default_importance(lw)
            m = int(rng.integers(1, 4))
            acc = max(ring + 1, vb + clog2(feats) + clog2(imp.total))
            emit("Ext", to_bits=acc)
            codes = rng.integers(-(1 << (lw - 1)), 1 << (lw - 1),
                                 size=(m, feats))
            g.weights[f"w{idx}"] = {"codes": codes,
                                    "importance": imp.weights, "signed": True}
            emit("Gemm", layout="fc", weights=f"w{idx}", m=m, l=feats, lw=lw,
                 importance=list(imp.weights), signed=True, acc_bits=acc,
                 positions=1, n_cols=1, w_scale_exp=0)
            ring = acc
            vb = min(acc, vb + clog2(feats) + clog2(imp.total))
            did_gemm = True
            feats = m
    if fork is not None and scale >= fork[2]:
        src, src_ring, _ = fork
        l_add = ring + 1
        main = emit("Ext", to_bits=l_add)
        res = Node(f"n{idx}", "Ext", [src], {"to_bits": l_add,
                                             "role": "residual_res_align"})
        g.add(res)
        idx += 1
        main.attrs["role"] = "residual_main_align"
        node = Node(f"n{idx}", "ResidualAdd", [main.id, res.id], {})
        g.add(node)
        prev = node.id
        idx += 1
        ring = l_add
        vb = min(l_add, vb + 1)
    g.add(Node("output", "Output", [prev], {}))
    infer(g)
    return g
