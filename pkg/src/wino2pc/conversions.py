"""Share-level bit width conversion protocols.

Extension, faithful truncation, truncate-and-reduce, and the composed
re-quantization.  Each protocol follows the same emulation shape: the
parties open a dealer-masked copy of the operand (one symmetric exchange
of n*l1 bits), the replicated dealer evaluates the conversion on the true
value, and fresh output shares are dealt.  Results are exact; the modeled
ledger charge per element is the closed-form cost of the real protocol.

MSB-known variants (operand provably nonnegative) run the identical
numeric path and differ only in the charge.
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidWidths, UnreachableTarget
from .ledger import Phase
from .qtensor import ring_reduce, signed_max
from .sharing import PartyId, Share, SharePair
from .session import PartyRuntime, run_pair


def _open_true_value(rt: PartyRuntime, vals: np.ndarray, bits: int) -> np.ndarray:
    """Masked opening; the dealer replica recovers the true signed value."""
    flat = np.ascontiguousarray(vals, dtype=np.int64).ravel()
    mask_mine, mask_full = rt.dealer_mask_shares(bits, flat.size)
    opened = rt.exchange_open(ring_reduce(flat + mask_mine, bits), bits)
    return ring_reduce(opened - mask_full, bits).reshape(vals.shape)


def _masked_unary(rt: PartyRuntime, node: str, vals: np.ndarray, in_bits: int,
                  out_bits: int, f, protocol: str, modeled_per_elem: int,
                  role: str = "", modeled_total: int | None = None) -> np.ndarray:
    rt.begin_step()
    true_vals = _open_true_value(rt, vals, in_bits)
    out_true = ring_reduce(f(true_vals), out_bits)
    out = rt.dealer_output_share(out_true, out_bits)
    modeled = (vals.size * modeled_per_elem if modeled_total is None
               else modeled_total)
    rt.charge(node, protocol, Phase.ONLINE, modeled, rt.step_wire_bits(), role)
    return out


# -- party-level steps (used by the graph runner and the pair API) ------------

def ext_step(rt: PartyRuntime, node: str, vals: np.ndarray, l1: int, l2: int,
             msb: bool = False, role: str = "",
             modeled_total: int | None = None) -> np.ndarray:
    if l2 <= l1:
        raise InvalidWidths(f"ext needs l2 > l1, got {l1} -> {l2}")
    return _masked_unary(rt, node, vals, l1, l2, lambda x: x, "ext",
                         rt.cost.ext(l1, l2, msb), role, modeled_total)


def trunc_step(rt: PartyRuntime, node: str, vals: np.ndarray, l1: int,
               shift: int, msb: bool = False, role: str = "",
               modeled_total: int | None = None) -> np.ndarray:
    if not 0 < shift < l1:
        raise InvalidWidths(f"trunc needs 0 < shift < l1, got shift={shift}, l1={l1}")
    return _masked_unary(rt, node, vals, l1, l1, lambda x: x >> shift, "trunc",
                         rt.cost.trunc(l1, shift, msb), role, modeled_total)


def tr_step(rt: PartyRuntime, node: str, vals: np.ndarray, l1: int,
            shift: int, msb: bool = False, role: str = "",
            modeled_total: int | None = None) -> np.ndarray:
    if not 0 < shift < l1:
        raise InvalidWidths(f"tr needs 0 < shift < l1, got shift={shift}, l1={l1}")
    return _masked_unary(rt, node, vals, l1, l1 - shift, lambda x: x >> shift,
                         "tr", rt.cost.tr(l1, shift, msb), role, modeled_total)


def narrow_local(vals: np.ndarray, to_bits: int) -> np.ndarray:
    """Drop high bits locally (ring reduction); free and exact when the value fits."""
    return ring_reduce(vals, to_bits)


def requant_step(rt: PartyRuntime, node: str, vals: np.ndarray,
                 l1: int, e1: int, l2: int, e2: int,
                 msb: bool = False, role: str = "") -> np.ndarray:
    """Compose ext / truncate-and-reduce / narrowing to land on (l2, 2^e2)."""
    shift = e1 - e2
    out = vals
    bits = l1
    if shift > 0:
        if shift >= l1:
            raise UnreachableTarget(
                f"cannot shift {l1}-bit operand down by {shift}")
        out = tr_step(rt, node, out, bits, shift, msb, role)
        bits = l1 - shift
    if shift < 0:
        # finer target scale: widen first, then re-scale locally
        if l2 < bits - shift:
            raise UnreachableTarget(
                f"target width {l2} cannot carry a 2^{-shift} upscale of "
                f"{bits}-bit values")
        if l2 > bits:
            out = ext_step(rt, node, out, bits, l2, msb, role)
            bits = l2
        out = ring_reduce(out.astype(np.int64) << (-shift), bits)
    if l2 > bits:
        out = ext_step(rt, node, out, bits, l2, msb, role)
    elif l2 < bits:
        out = narrow_local(out, l2)
    return out


# -- pair-level API (lockstep simulation of both parties) ---------------------

def _pair_op(pair: SharePair, seed, step_server, step_client, out_params):
    res_s, res_c, ledger, _ = run_pair(step_server, step_client, seed=seed)
    out = SharePair(Share(PartyId.SERVER, res_s, out_params),
                    Share(PartyId.CLIENT, res_c, out_params))
    return out, ledger


def ext(pair: SharePair, l1: int, l2: int, seed: int = 0) -> tuple[SharePair, object]:
    if pair.params.bits != l1:
        raise InvalidWidths("pair width does not match l1")
    msb = pair.params.msb_known_nonneg
    p = pair.params.with_bits(l2)

    def fn(vals):
        return lambda rt: ext_step(rt, "ext", vals, l1, l2, msb)

    return _pair_op(pair, seed, fn(pair.server.values), fn(pair.client.values), p)


def trunc(pair: SharePair, l1: int, shift: int, seed: int = 0):
    if pair.params.bits != l1:
        raise InvalidWidths("pair width does not match l1")
    msb = pair.params.msb_known_nonneg
    p = pair.params.with_scale_exp(pair.params.scale_exp - shift)

    def fn(vals):
        return lambda rt: trunc_step(rt, "trunc", vals, l1, shift, msb)

    return _pair_op(pair, seed, fn(pair.server.values), fn(pair.client.values), p)


def truncate_reduce(pair: SharePair, l1: int, shift: int, seed: int = 0):
    if pair.params.bits != l1:
        raise InvalidWidths("pair width does not match l1")
    msb = pair.params.msb_known_nonneg
    p = pair.params.with_bits(l1 - shift).with_scale_exp(
        pair.params.scale_exp - shift)

    def fn(vals):
        return lambda rt: tr_step(rt, "tr", vals, l1, shift, msb)

    return _pair_op(pair, seed, fn(pair.server.values), fn(pair.client.values), p)


def requant(pair: SharePair, to_bits: int, to_scale_exp: int, seed: int = 0):
    l1, e1 = pair.params.bits, pair.params.scale_exp
    msb = pair.params.msb_known_nonneg
    p = pair.params.with_bits(to_bits).with_scale_exp(to_scale_exp)

    def fn(vals):
        return lambda rt: requant_step(rt, "requant", vals, l1, e1,
                                       to_bits, to_scale_exp, msb)

    return _pair_op(pair, seed, fn(pair.server.values), fn(pair.client.values), p)


def requant_oracle(values: np.ndarray, l1: int, e1: int, l2: int, e2: int,
                   clamp: bool = False) -> np.ndarray:
    """Plaintext re-quantization with the protocol's exact shift semantics.

    With clamp=True, out-of-range results saturate instead of wrapping
    (useful when comparing against the front-door quantizer on in-range
    data; the protocol itself never clamps).
    """
    v = np.asarray(values, dtype=np.int64)
    shift = e1 - e2
    if shift > 0:
        v = v >> shift
    elif shift < 0:
        v = v << (-shift)
    if clamp:
        hi = signed_max(l2)
        return np.clip(v, -hi - 1, hi)
    return ring_reduce(v, l2)
