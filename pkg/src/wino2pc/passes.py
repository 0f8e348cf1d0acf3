"""Graph rewrite passes: truncation decomposition, conversion fusion,
residual simplification, and MSB propagation.

Every pass is a pure graph-to-graph function that preserves execution
semantics bit for bit and never increases the static communication
estimate.  Pass order matters: decomposition exposes the TR/Ext pairs the
fusion rules consume, and MSB marking runs last so discounts apply to the
final node set.
"""

from __future__ import annotations

from .errors import GraphError
from .graphir import GraphIR, Node, infer

PIPELINE = ("decompose_trunc", "fuse_across_local", "fuse_ext_ext",
            "fuse_trunc_ext", "simplify_residual", "propagate_msb")

_LOCAL_LINEAR = {"FeatureTransform", "OutputTransform"}


def _rebuild(g: GraphIR, nodes: list[Node]) -> GraphIR:
    out = GraphIR()
    out.weights = g.weights
    for n in nodes:
        out.nodes[n.id] = n
    return out


def _retopo(g: GraphIR) -> GraphIR:
    """Stable topological re-sort (passes may move nodes upstream)."""
    pending = list(g.nodes.values())
    emitted: dict[str, Node] = {}
    progress = True
    while pending and progress:
        progress = False
        rest = []
        for n in pending:
            if all(src in emitted for src in n.inputs):
                emitted[n.id] = n
                progress = True
            else:
                rest.append(n)
        pending = rest
    if pending:
        raise GraphError("cycle introduced by a rewrite")
    return _rebuild(g, list(emitted.values()))


def _rewire(nodes: list[Node], old: str, new: str) -> None:
    for n in nodes:
        n.inputs = [new if s == old else s for s in n.inputs]


def _sole_consumer(g: GraphIR, nid: str) -> Node | None:
    cons = g.consumers(nid)
    return cons[0] if len(cons) == 1 else None


def _is_unit(n: Node) -> bool:
    return "unit" in n.attrs


def _dissolve_unit(n: Node) -> None:
    for k in ("unit", "unit_role", "unit_l1", "unit_shift"):
        n.attrs.pop(k, None)


def decompose_trunc(g: GraphIR) -> GraphIR:
    """Rewrite Trunc(l1, s) as TR(l1, s) followed by Ext(l1-s, l1).

    The pair carries a shared `unit` tag: while both members survive it is
    charged exactly as the monolithic truncation (the decomposition is the
    same wire protocol), so the rewrite alone never changes the ledger.
    Fusion passes dissolve the unit when they consume the Ext member.
    """
    g = g.copy()
    metas = infer(g)
    out: list[Node] = []
    replaced: dict[str, str] = {}
    for n in g:
        n.inputs = [replaced.get(s, s) for s in n.inputs]
        if n.kind != "Trunc":
            out.append(n)
            continue
        l1 = metas[n.id].ring  # Trunc preserves the input ring
        shift = int(n.attrs["shift"])
        uid = f"unit:{n.id}"
        common = {k: v for k, v in n.attrs.items() if k in ("role", "msb_opt")}
        tr = Node(f"{n.id}.tr", "TR", list(n.inputs),
                  {"shift": shift, "unit": uid, "unit_role": "head",
                   "unit_l1": l1, "unit_shift": shift, **common})
        ext = Node(f"{n.id}.ext", "Ext", [tr.id],
                   {"to_bits": l1, "unit": uid, "unit_role": "tail", **common})
        out.append(tr)
        out.append(ext)
        replaced[n.id] = ext.id
    g2 = _rebuild(g, out)
    infer(g2)
    return g2


def fuse_across_local(g: GraphIR) -> GraphIR:
    """Commute extensions backward across local linear transforms.

    [x -> Local -> Ext(b->c)] becomes [x -> Ext -> Local], making the
    extension adjacent to upstream conversions so the fusion rules apply.
    Moving an extension earlier widens the ring the transform runs in, so
    the transform's growth bound keeps holding; truncations do not commute
    with sums and are never moved.
    """
    g = g.copy()
    changed = True
    while changed:
        changed = False
        metas = infer(g)
        for local in list(g.nodes.values()):
            if local.kind not in _LOCAL_LINEAR:
                continue
            ext = _sole_consumer(g, local.id)
            if ext is None or ext.kind != "Ext" or _is_unit(ext):
                continue
            # moving earlier re-prices the extension at the transform's
            # input element count; only profitable (or neutral) moves fire
            if metas[local.inputs[0]].n > metas[local.id].n:
                continue
            src = local.inputs[0]
            downstream = [n for n in g if ext.id in n.inputs]
            ext.inputs = [src]
            local.inputs = [ext.id]
            for n in downstream:
                _rewire([n], ext.id, local.id)
            g = _retopo(g)
            changed = True
            break
    infer(g)
    return g


def _dissolve_partner(g: GraphIR, n: Node) -> None:
    uid = n.attrs.get("unit")
    if uid is None:
        return
    for m in g:
        if m is not n and m.attrs.get("unit") == uid:
            _dissolve_unit(m)
    _dissolve_unit(n)


def _fold_once(g: GraphIR) -> bool:
    """One extension-chain fold; returns True if the graph changed."""
    metas = infer(g)
    for e1 in list(g.nodes.values()):
        if e1.kind != "Ext":
            continue
        nxt = _sole_consumer(g, e1.id)
        if nxt is None:
            continue
        src = e1.inputs[0]
        src_ring = metas[src].ring
        if nxt.kind == "Ext" and not _is_unit(e1) and not _is_unit(nxt):
            # Ext(a->b); Ext(b->c)  =>  Ext(a->c)
            nxt.inputs = [src]
            if e1.attrs.get("role"):
                nxt.attrs["role"] = e1.attrs["role"]
            nxt.attrs["msb_opt"] = e1.attrs.get("msb_opt", False)
            g.remove(e1.id)
            return True
        if nxt.kind == "Requant":
            c = int(nxt.attrs["to_bits"])
            if c == src_ring:
                # Ext then narrow back: identity
                _dissolve_partner(g, e1)
                nodes = list(g.nodes.values())
                _rewire(nodes, nxt.id, src)
                g.remove(e1.id)
                g.remove(nxt.id)
                return True
            if c > src_ring:
                # Ext(a->b); narrow to c in (a, b)  =>  Ext(a->c)
                _dissolve_partner(g, e1)
                e1.attrs["to_bits"] = c
                nodes = list(g.nodes.values())
                _rewire(nodes, nxt.id, e1.id)
                g.remove(nxt.id)
                return True
            # c < src_ring: the extension is dead, keep the narrow
            _dissolve_partner(g, e1)
            nxt.inputs = [src]
            g.remove(e1.id)
            return True
    return False


def fuse_ext_ext(g: GraphIR) -> GraphIR:
    """Fuse neighboring extensions (and fold extensions that a narrowing
    immediately undoes).  Decomposition-unit members are left for
    fuse_trunc_ext."""
    g = g.copy()
    while _fold_once(g):
        pass
    infer(g)
    return g


def fuse_trunc_ext(g: GraphIR) -> GraphIR:
    """Fuse a truncation-ending re-quantization with a following extension.

    Handles both the decomposed form [TR ; Ext(unit) ; Ext] and the raw
    form [Trunc ; Ext]; either way the result is a single TR followed by a
    single extension charged at the truncated width.
    """
    g = g.copy()
    changed = True
    while changed:
        changed = False
        for n in list(g.nodes.values()):
            if n.kind == "TR" and _is_unit(n) and n.attrs.get("unit_role") == "head":
                tail = _sole_consumer(g, n.id)
                if tail is None or tail.kind != "Ext" or not _is_unit(tail):
                    continue
                nxt = _sole_consumer(g, tail.id)
                if nxt is None or nxt.kind != "Ext" or _is_unit(nxt):
                    continue
                nxt.inputs = [n.id]
                if tail.attrs.get("role"):
                    nxt.attrs["role"] = tail.attrs["role"]
                nxt.attrs["msb_opt"] = n.attrs.get("msb_opt", False)
                g.remove(tail.id)
                _dissolve_unit(n)
                changed = True
                break
            if n.kind == "Trunc":
                nxt = _sole_consumer(g, n.id)
                if nxt is None or nxt.kind != "Ext" or _is_unit(nxt):
                    continue
                shift = int(n.attrs["shift"])
                common = {k: v for k, v in n.attrs.items()
                          if k in ("role", "msb_opt")}
                tr = Node(f"{n.id}.tr", "TR", list(n.inputs),
                          {"shift": shift, **common})
                nodes = []
                for m in g:
                    if m is n:
                        nodes.append(tr)
                    else:
                        nodes.append(m)
                nxt.inputs = [tr.id]
                if common.get("role"):
                    nxt.attrs["role"] = common["role"]
                nxt.attrs["msb_opt"] = common.get("msb_opt", False)
                g = _rebuild(g, nodes)
                changed = True
                break
    infer(g)
    return g


def simplify_residual(g: GraphIR) -> GraphIR:
    """Drop the main-branch alignment before a residual addition.

    The add is retargeted to the main operand's own (bits, scale) and only
    the residual branch is converted, removing the redundant main-branch
    extension.  The rewrite only fires when the narrower ring still holds
    the sum's live bits (otherwise dropping the alignment would change
    wraparound behavior) and is skipped whenever retyping would fail.
    """
    g = g.copy()
    changed = True
    while changed:
        changed = False
        for add in list(g.nodes.values()):
            if add.kind != "ResidualAdd":
                continue
            main_align = g.nodes.get(add.inputs[0])
            if main_align is None or main_align.kind != "Ext":
                continue
            if _sole_consumer(g, main_align.id) is not add:
                continue
            candidate = g.copy()
            metas = infer(candidate)
            c_add = candidate.node(add.id)
            c_main = candidate.node(main_align.id)
            new_main = c_main.inputs[0]
            m_main = metas[new_main]
            main_ring = m_main.ring
            c_add.inputs[0] = new_main
            candidate.remove(c_main.id)
            res_src = c_add.inputs[1]
            res_node = candidate.nodes.get(res_src)
            if res_node is not None and res_node.kind == "Ext" \
                    and _sole_consumer(candidate, res_node.id) is c_add:
                m_res = metas[res_node.inputs[0]]
                if main_ring == m_res.ring:
                    c_add.inputs[1] = res_node.inputs[0]
                    candidate.remove(res_node.id)
                elif main_ring > m_res.ring:
                    res_node.attrs["to_bits"] = main_ring
                else:
                    continue
            else:
                m_res = metas[res_src]
                if m_res.ring != main_ring:
                    continue
            # the sum must keep fitting: dropping the alignment is illegal
            # when the carry needs the extra bit the baseline provided
            shift = m_main.scale_exp - m_res.scale_exp
            if shift < 0 or max(m_main.vb, m_res.vb + shift) + 1 > main_ring:
                continue
            try:
                infer(candidate)
            except GraphError:
                continue
            g = candidate
            changed = True
            break
    return g


def propagate_msb(g: GraphIR) -> GraphIR:
    """Mark conversions whose operand is provably nonnegative (post-ReLU).

    Marked Ext/Trunc/TR nodes use the discounted MSB-known charge.  The
    nonnegativity flag flows through conversions and is cleared by GEMMs,
    transforms and additions (their outputs can be negative), so marks stop
    at the next GEMM output.
    """
    g = g.copy()
    metas = infer(g)
    for n in g:
        if n.kind in ("Ext", "Trunc", "TR") and metas[n.inputs[0]].msb:
            n.attrs["msb_opt"] = True
    return g


_PASSES = {
    "decompose_trunc": decompose_trunc,
    "fuse_across_local": fuse_across_local,
    "fuse_ext_ext": fuse_ext_ext,
    "fuse_trunc_ext": fuse_trunc_ext,
    "simplify_residual": simplify_residual,
    "propagate_msb": propagate_msb,
}


def get_pass(name: str):
    if name not in _PASSES:
        raise GraphError(f"unknown pass {name!r}; known: {sorted(_PASSES)}")
    return _PASSES[name]


def run_pipeline(g: GraphIR, passes=PIPELINE) -> GraphIR:
    for name in passes:
        g = get_pass(name)(g)
    return g


def run_pipeline_trace(g: GraphIR, passes=PIPELINE):
    """Apply passes one by one, yielding (name, graph) after each."""
    trace = []
    for name in passes:
        g = get_pass(name)(g)
        trace.append((name, g))
    return trace
