"""Graph execution: two-party protocol runs and the plaintext oracle run.

Both parties walk the graph in listed order and execute each node's
protocol step; local nodes touch no channel.  Charges come from the same
per-node cost function the static estimator uses, so an executed ledger
that disagrees with estimate_comm is an invariant violation, not a
rounding artifact.  The plaintext runner applies identical value
transformations (floor shifts, ring reductions) so a reconstructed
protocol output and the plain output are comparable bit for bit.
"""

from __future__ import annotations

import hashlib
import json

import numpy as np

from .channels import (TAG_INPUT_SHARE, TAG_LEDGER_SYNC, TAG_OUTPUT_SHARE,
                       tcp_connect, tcp_listen)
from .conversions import ext_step, narrow_local, tr_step, trunc_step
from .costs import CostModel
from .errors import GraphError, InvariantViolation
from .graphir import GraphIR, Meta, estimate_comm, infer, node_cost
from .ledger import CommLedger, Phase
from .protocols import (BitImportance, decode_planes, decompose_ints,
                        gemm_step, relu_step)
from .qtensor import QTensor, QuantParams, ring_reduce
from .sharing import PartyId, uniform_ring
from .session import PartyRuntime, run_pair
from .winograd import (feature_transform, output_transform, tile_merge_outputs,
                       tile_partition, tiling_spec, winograd_matrices)


def _weight_planes(g: GraphIR, name: str):
    w = g.weights[name]
    imp = BitImportance(tuple(w["importance"]))
    signed = bool(w.get("signed", True))
    codes = np.asarray(w["codes"], dtype=np.int64)
    planes = decompose_ints(codes, imp, signed)
    return planes, imp, signed, codes


def _im2col(x: np.ndarray, r: int, stride: int, pad: int) -> np.ndarray:
    """(N, C, H, W) -> (C*r*r, N*H'*W') patch matrix; local rearrangement."""
    n, c, h, w = x.shape
    oh = (h + 2 * pad - r) // stride + 1
    ow = (w + 2 * pad - r) // stride + 1
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    xp[:, :, pad:pad + h, pad:pad + w] = x
    win = np.lib.stride_tricks.sliding_window_view(xp, (r, r), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]              # (N, C, H', W', r, r)
    col = win.transpose(1, 4, 5, 0, 2, 3).reshape(c * r * r, n * oh * ow)
    return np.ascontiguousarray(col), (n, oh, ow)


def _win_pack(vals: np.ndarray) -> np.ndarray:
    """(N, C, T, t, t) -> (t*t, C, N*T) for per-position GEMM."""
    n, c, t, th, tw = vals.shape
    return np.ascontiguousarray(
        vals.transpose(3, 4, 1, 0, 2).reshape(th * tw, c, n * t))


def _win_unpack(vals: np.ndarray, n: int, t: int, tt: int) -> np.ndarray:
    """(t*t, K, N*T) -> (N, K, T, t, t)."""
    k = vals.shape[1]
    return np.ascontiguousarray(
        vals.reshape(tt, tt, k, n, t).transpose(3, 2, 4, 0, 1))


def _gemm_io(node, meta_in: Meta):
    a = node.attrs
    layout = a.get("layout", "fc")
    if layout == "win":
        nb, c, t, tt, _ = meta_in.shape
        return int(a["positions"]), int(a["l"]), nb * t
    if layout == "direct":
        nb, c, h, w = meta_in.shape
        stride, pad, r = int(a["stride"]), int(a["pad"]), int(a["r"])
        oh = (h + 2 * pad - r) // stride + 1
        ow = (w + 2 * pad - r) // stride + 1
        return 1, int(a["l"]), nb * oh * ow
    return 1, int(a["l"]), meta_in.shape[0]


def _check_gemm_attrs(node, meta_in: Meta) -> None:
    p, l, n_cols = _gemm_io(node, meta_in)
    if (p != int(node.attrs.get("positions", 1))
            or l != int(node.attrs["l"])
            or n_cols != int(node.attrs["n_cols"])):
        raise GraphError(
            f"Gemm {node.id!r} attrs disagree with operand shape: "
            f"expected positions={p}, l={l}, n_cols={n_cols}")


def _party_program(graph: GraphIR, input_tensor: QTensor | None):
    """Build the per-party executable; the client must hold the input."""
    metas = infer(graph)
    cm_holder = {}

    def program(rt: PartyRuntime):
        cm_holder["cm"] = rt.cost
        vals: dict[str, np.ndarray] = {}
        result = None
        for node in graph:
            meta = metas[node.id]
            cost = node_cost(graph, metas, node, rt.cost)
            a = node.attrs
            role = a.get("role", "")
            msb = bool(a.get("msb_opt", False))
            if node.kind == "Input":
                rt.begin_step()
                if rt.role is PartyId.CLIENT:
                    if input_tensor is None:
                        raise InvariantViolation("client holds no input tensor")
                    if tuple(input_tensor.shape) != meta.shape \
                            or input_tensor.params.bits != meta.ring:
                        raise GraphError("input tensor does not match the graph")
                    server_share = uniform_ring(rt.input_rng, meta.ring,
                                                meta.shape)
                    mine = ring_reduce(input_tensor.data - server_share,
                                       meta.ring)
                    rt.send_ring(TAG_INPUT_SHARE, server_share.ravel(),
                                 meta.ring)
                else:
                    mine = rt.recv_ring(TAG_INPUT_SHARE, meta.n,
                                        meta.ring).reshape(meta.shape)
                vals[node.id] = mine
                rt.charge(node.id, "share_input", Phase.ONLINE,
                          cost[Phase.ONLINE], rt.step_wire_bits(), role)
                continue
            x = vals[node.inputs[0]]
            m_in = metas[node.inputs[0]]
            if node.kind == "Ext":
                vals[node.id] = ext_step(
                    rt, node.id, x, m_in.ring, int(a["to_bits"]), msb, role,
                    modeled_total=cost[Phase.ONLINE])
            elif node.kind == "Trunc":
                vals[node.id] = trunc_step(
                    rt, node.id, x, m_in.ring, int(a["shift"]), msb, role,
                    modeled_total=cost[Phase.ONLINE])
            elif node.kind == "TR":
                vals[node.id] = tr_step(
                    rt, node.id, x, m_in.ring, int(a["shift"]), msb, role,
                    modeled_total=cost[Phase.ONLINE])
            elif node.kind == "Requant":
                vals[node.id] = narrow_local(x, int(a["to_bits"]))
            elif node.kind == "Relu":
                vals[node.id] = relu_step(rt, node.id, x, m_in.ring, role,
                                          modeled_total=cost[Phase.ONLINE])
            elif node.kind == "FeatureTransform":
                plan = winograd_matrices(int(a["m"]), int(a["r"]))
                tiles, _ = tile_partition(x, plan, int(a.get("pad", 1)))
                vals[node.id] = ring_reduce(feature_transform(tiles, plan),
                                            meta.ring)
            elif node.kind == "OutputTransform":
                plan = winograd_matrices(int(a["m"]), int(a["r"]))
                spec = tiling_spec(int(a["in_h"]), int(a["in_w"]), plan,
                                   int(a.get("pad", 1)))
                y = ring_reduce(output_transform(x, plan), meta.ring)
                vals[node.id] = tile_merge_outputs(y, spec)
            elif node.kind == "Gemm":
                _check_gemm_attrs(node, m_in)
                planes, imp, signed, _ = _weight_planes(graph, a["weights"])
                layout = a.get("layout", "fc")
                if layout == "win":
                    op = _win_pack(x)
                elif layout == "direct":
                    op, dims = _im2col(x, int(a["r"]), int(a["stride"]),
                                       int(a["pad"]))
                    op = op[None]
                else:
                    op = x.reshape(x.shape[0], -1).T[None]
                if planes.ndim == 3:
                    planes = planes[None]
                out = gemm_step(rt, node.id, op, planes, imp, signed,
                                int(a["acc_bits"]), role)
                if layout == "win":
                    nb, _, t, tt, _ = m_in.shape
                    out = _win_unpack(out, nb, t, tt)
                elif layout == "direct":
                    nb, oh, ow = dims
                    k = out.shape[1]
                    out = out.reshape(k, nb, oh, ow).transpose(1, 0, 2, 3)
                else:
                    out = out[0].T
                vals[node.id] = np.ascontiguousarray(out)
            elif node.kind == "ResidualAdd":
                res = vals[node.inputs[1]]
                m_res = metas[node.inputs[1]]
                shift = m_in.scale_exp - m_res.scale_exp
                vals[node.id] = ring_reduce(x + (res.astype(np.int64) << shift),
                                            meta.ring)
            elif node.kind == "Output":
                rt.begin_step()
                if rt.role is PartyId.SERVER:
                    rt.send_ring(TAG_OUTPUT_SHARE, x.ravel(), meta.ring)
                    result = None
                else:
                    other = rt.recv_ring(TAG_OUTPUT_SHARE, meta.n,
                                         meta.ring).reshape(meta.shape)
                    data = ring_reduce(x + other, meta.ring)
                    params = QuantParams(meta.ring, meta.scale_exp,
                                         msb_known_nonneg=meta.msb)
                    result = QTensor(data, params)
                rt.charge(node.id, "reveal_output", Phase.ONLINE,
                          cost[Phase.ONLINE], rt.step_wire_bits(), role)
                vals[node.id] = x
            else:
                raise GraphError(f"unhandled kind {node.kind}")
        return result

    return program


def _verify_against_estimate(graph: GraphIR, ledger: CommLedger,
                             cm: CostModel) -> None:
    per_node, totals = estimate_comm(graph, cm)
    executed: dict[str, dict[Phase, int]] = ledger.modeled_by_node()
    for nid, want in per_node.items():
        got = executed.get(nid, {Phase.OFFLINE: 0, Phase.ONLINE: 0})
        if got[Phase.OFFLINE] != want[Phase.OFFLINE] \
                or got[Phase.ONLINE] != want[Phase.ONLINE]:
            raise InvariantViolation(
                f"node {nid!r}: executed ledger {got} != estimate {want}")
    if ledger.total_modeled() != totals["total"]:
        raise InvariantViolation("ledger total diverges from the estimate")


def run_graph_2pc(graph: GraphIR, input_tensor: QTensor, seed: int = 0,
                  cm: CostModel | None = None):
    """In-process two-party run.  Returns (output, ledger, mult_count)."""
    cm = cm or CostModel()
    program = _party_program(graph, input_tensor)
    res_s, res_c, ledger, mults = run_pair(program, program, seed=seed, cost=cm)
    _verify_against_estimate(graph, ledger, cm)
    return res_c, ledger, mults


def _ledger_digest(ledger: CommLedger) -> bytes:
    blob = json.dumps(ledger.to_rows(), sort_keys=True).encode()
    return hashlib.sha256(blob).digest()


def run_graph_party_tcp(graph: GraphIR, role: PartyId,
                        input_tensor: QTensor | None, host: str, port: int,
                        seed: int = 0, cm: CostModel | None = None):
    """One party's TCP run; returns (output_or_None, ledger, mult_count).

    The parties cross-check ledger digests before closing: a mismatch is an
    invariant violation on both ends.
    """
    cm = cm or CostModel()
    if role is PartyId.SERVER:
        endpoint, _ = tcp_listen(host, port)
    else:
        endpoint = tcp_connect(host, port)
    rt = PartyRuntime(role, endpoint, seed, cm)
    try:
        program = _party_program(graph, input_tensor)
        result = program(rt)
        digest = _ledger_digest(rt.ledger)
        endpoint.send(TAG_LEDGER_SYNC, digest)
        theirs = endpoint.recv(TAG_LEDGER_SYNC)
        if theirs != digest:
            raise InvariantViolation("parties disagree on the ledger")
        _verify_against_estimate(graph, rt.ledger, cm)
    finally:
        endpoint.close()
    return result, rt.ledger, rt.mult_count


def run_graph_plain(graph: GraphIR, input_tensor: QTensor,
                    cm: CostModel | None = None):
    """Single-process plaintext execution with identical rounding decisions.

    Returns (output, mult_count)."""
    metas = infer(graph)
    vals: dict[str, np.ndarray] = {}
    mults = 0
    result = None
    for node in graph:
        meta = metas[node.id]
        a = node.attrs
        if node.kind == "Input":
            if tuple(input_tensor.shape) != meta.shape \
                    or input_tensor.params.bits != meta.ring:
                raise GraphError("input tensor does not match the graph")
            vals[node.id] = input_tensor.data.copy()
            continue
        x = vals[node.inputs[0]]
        m_in = metas[node.inputs[0]]
        if node.kind == "Ext":
            vals[node.id] = x.copy()
        elif node.kind == "Trunc":
            vals[node.id] = x >> int(a["shift"])
        elif node.kind == "TR":
            vals[node.id] = ring_reduce(x >> int(a["shift"]), meta.ring)
        elif node.kind == "Requant":
            vals[node.id] = ring_reduce(x, meta.ring)
        elif node.kind == "Relu":
            vals[node.id] = np.maximum(x, 0)
        elif node.kind == "FeatureTransform":
            plan = winograd_matrices(int(a["m"]), int(a["r"]))
            tiles, _ = tile_partition(x, plan, int(a.get("pad", 1)))
            vals[node.id] = ring_reduce(feature_transform(tiles, plan),
                                        meta.ring)
        elif node.kind == "OutputTransform":
            plan = winograd_matrices(int(a["m"]), int(a["r"]))
            spec = tiling_spec(int(a["in_h"]), int(a["in_w"]), plan,
                               int(a.get("pad", 1)))
            y = ring_reduce(output_transform(x, plan), meta.ring)
            vals[node.id] = tile_merge_outputs(y, spec)
        elif node.kind == "Gemm":
            _check_gemm_attrs(node, m_in)
            planes, imp, signed, codes = _weight_planes(graph, a["weights"])
            w_dec = decode_planes(planes, imp, signed)
            acc = int(a["acc_bits"])
            layout = a.get("layout", "fc")
            if layout == "win":
                op = _win_pack(x)
                out = ring_reduce(np.einsum("pml,pln->pmn", w_dec, op), acc)
                nb, _, t, tt, _ = m_in.shape
                out = _win_unpack(out, nb, t, tt)
                mults += w_dec.shape[0] * w_dec.shape[1] * w_dec.shape[2] \
                    * op.shape[2]
            elif layout == "direct":
                op, dims = _im2col(x, int(a["r"]), int(a["stride"]),
                                   int(a["pad"]))
                out = ring_reduce(w_dec @ op, acc)
                nb, oh, ow = dims
                k = out.shape[0]
                out = out.reshape(k, nb, oh, ow).transpose(1, 0, 2, 3)
                mults += w_dec.shape[0] * w_dec.shape[1] * op.shape[1]
            else:
                op = x.reshape(x.shape[0], -1).T
                out = ring_reduce(w_dec @ op, acc).T
                mults += w_dec.shape[0] * w_dec.shape[1] * op.shape[1]
            vals[node.id] = np.ascontiguousarray(out)
        elif node.kind == "ResidualAdd":
            res = vals[node.inputs[1]]
            m_res = metas[node.inputs[1]]
            shift = m_in.scale_exp - m_res.scale_exp
            vals[node.id] = ring_reduce(x + (res.astype(np.int64) << shift),
                                        meta.ring)
        elif node.kind == "Output":
            params = QuantParams(meta.ring, meta.scale_exp,
                                 msb_known_nonneg=meta.msb)
            result = QTensor(ring_reduce(x, meta.ring), params)
            vals[node.id] = x
        else:
            raise GraphError(f"unhandled kind {node.kind}")
    return result, mults
