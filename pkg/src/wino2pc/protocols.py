"""OT-style per-bit GEMM, the composed quantized Winograd convolution,
two-party ReLU, and the simplified residual protocol.

The GEMM follows the per-bit decomposition of the weights: every bit plane
is multiplied against the shared operand via one (emulated) OT row, and a
bit-importance vector decides what each plane contributes to the decoded
weight.  Bit planes are most-significant first; for signed weights the
leading plane contributes negatively (two's complement).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .conversions import ext_step
from .errors import (AccumulatorTooNarrow, InvalidWidths, ScaleUnalignable)
from .ledger import Phase
from .qtensor import QuantParams, ring_reduce
from .sharing import PartyId, Share, SharePair
from .session import PartyRuntime, run_pair
from .winograd import (WinogradPlan, feature_transform, output_transform,
                       tile_merge_outputs, tile_partition)
from .channels import TAG_GEMM_MASK


@dataclass(frozen=True)
class BitImportance:
    """Per-bit weights replacing the powers of two, most-significant first."""

    weights: tuple[int, ...]

    def __post_init__(self):
        w = tuple(int(v) for v in self.weights)
        object.__setattr__(self, "weights", w)
        if not w:
            raise ValueError("empty importance set")
        for v in w:
            if v <= 0 or v & (v - 1):
                raise ValueError(f"importance {v} is not a positive power of two")
        if any(a <= b for a, b in zip(w, w[1:])):
            raise ValueError("importance must be strictly decreasing")

    def __len__(self) -> int:
        return len(self.weights)

    def __getitem__(self, i: int) -> int:
        return self.weights[i]

    @property
    def total(self) -> int:
        return sum(self.weights)


def default_importance(lw: int) -> BitImportance:
    return BitImportance(tuple(1 << (lw - 1 - i) for i in range(lw)))


def decode_planes(planes: np.ndarray, importance: BitImportance,
                  signed: bool = True) -> np.ndarray:
    """Sum of plane * importance; the leading plane is negated when signed."""
    p = np.asarray(planes, dtype=np.int64)
    coef = np.array(importance.weights, dtype=np.int64)
    if signed:
        coef = coef.copy()
        coef[0] = -coef[0]
    return (p * coef).sum(axis=-1)


def representable_codes(importance: BitImportance, signed: bool = True) -> np.ndarray:
    """All integers the (importance, sign convention) pair can encode."""
    lw = len(importance)
    grid = np.array(np.meshgrid(*[[0, 1]] * lw, indexing="ij"),
                    dtype=np.int64).reshape(lw, -1).T
    return np.unique(decode_planes(grid, importance, signed))


def decompose_ints(values: np.ndarray, importance: BitImportance,
                   signed: bool = True) -> np.ndarray:
    """Bit planes (..., l_w) for integers in the representable set."""
    v = np.asarray(values, dtype=np.int64)
    out = np.zeros(v.shape + (len(importance),), dtype=np.uint8)
    rem = v.copy()
    if signed:
        neg = rem < 0
        out[..., 0] = neg
        rem = rem + neg * importance[0]
        tail = importance.weights[1:]
    else:
        top = rem >= importance[0]
        out[..., 0] = top
        rem = rem - top * importance[0]
        tail = importance.weights[1:]
    for i, b in enumerate(tail, start=1):
        bit = rem >= b
        out[..., i] = bit
        rem = rem - bit * b
    if np.any(rem != 0):
        raise ValueError("value not representable under this importance set")
    return out


def quantize_to_codes(values: np.ndarray, importance: BitImportance,
                      signed: bool = True) -> np.ndarray:
    """Nearest representable integer code, ties toward the smaller magnitude."""
    codes = representable_codes(importance, signed)
    v = np.asarray(values, dtype=np.float64)
    pos = np.searchsorted(codes, v)
    pos = np.clip(pos, 1, len(codes) - 1)
    lo = codes[pos - 1]
    hi = codes[pos]
    pick_hi = (hi - v) < (v - lo)
    return np.where(pick_hi, hi, lo).astype(np.int64)


def min_acc_bits(l_x: int, length: int, importance: BitImportance) -> int:
    """Accumulator width guaranteeing exact signed GEMM results."""
    return l_x + max(math.ceil(math.log2(length)), 0) + \
        max(math.ceil(math.log2(importance.total)), 0)


# -- party-level GEMM ------------------------------------------------------------

def gemm_step(rt: PartyRuntime, node: str, my_vals: np.ndarray,
              planes: np.ndarray, importance: BitImportance, signed: bool,
              acc_bits: int, role: str = "") -> np.ndarray:
    """Per-bit OT GEMM on shares already living in the accumulator ring.

    my_vals: (P, L, N) share of the operand; planes: (P, M, L, l_w) weight
    bits held by the server (the dealer replica makes them available to the
    emulation on both sides).  Returns my (P, M, N) output share.

    Offline, the dealer hands the client additive shares of W x R - S for
    its mask R and the server's mask S.  Online the client sends the
    masked operand and the server finishes locally.
    """
    p, l, n = my_vals.shape
    m = planes.shape[1]
    lw = planes.shape[3]
    # share values occupy acc bits; the masked matmul must stay within int64
    if acc_bits + lw + 1 + max(math.ceil(math.log2(l)), 0) > 63:
        raise AccumulatorTooNarrow(
            "accumulator plus weight growth exceeds native word headroom")
    w_dec = decode_planes(planes, importance, signed)        # (P, M, L)
    rt.begin_step()
    r_mask = rt.dealer.draw_ring(acc_bits, p * l * n).reshape(p, l, n)
    s_mask = rt.dealer.draw_ring(acc_bits, p * m * n).reshape(p, m, n)
    client_base = ring_reduce(
        np.einsum("pml,pln->pmn", w_dec, r_mask) - s_mask, acc_bits)
    if rt.is_server:
        d = rt.recv_ring(TAG_GEMM_MASK, p * l * n, acc_bits).reshape(p, l, n)
        x_plus = ring_reduce(my_vals + d, acc_bits)
        out = ring_reduce(np.einsum("pml,pln->pmn", w_dec, x_plus) + s_mask,
                          acc_bits)
    else:
        d = ring_reduce(my_vals - r_mask, acc_bits)
        rt.send_ring(TAG_GEMM_MASK, d.ravel(), acc_bits)
        out = client_base
    rt.mult_count += p * m * l * n
    wire = rt.step_wire_bits()
    rt.charge(node, "gemm", Phase.OFFLINE,
              p * rt.cost.gemm_offline(m, l, lw), 0, role)
    rt.charge(node, "gemm", Phase.ONLINE,
              p * rt.cost.gemm_online(m, l, lw, n, acc_bits), wire, role)
    return out


def relu_step(rt: PartyRuntime, node: str, vals: np.ndarray, bits: int,
              role: str = "", modeled_total: int | None = None) -> np.ndarray:
    """max(0, x) via a dealer-assisted masked comparison; output flagged nonneg."""
    from .conversions import _masked_unary

    return _masked_unary(rt, node, vals, bits, bits,
                         lambda x: np.maximum(x, 0), "relu",
                         rt.cost.relu(bits), role, modeled_total)


# -- pair-level protocol API -------------------------------------------------------

def ot_gemm(x: SharePair, planes: np.ndarray, importance: BitImportance,
            acc_bits: int, signed: bool = True, seed: int = 0):
    """OT GEMM over a shared (L, N) operand at l_x bits.

    Extends the operand to the accumulator ring first (that extension is
    its own ledger entry), then runs the per-bit protocol.  Output is the
    (M, N) share pair at acc_bits.
    """
    l_x = x.params.bits
    if planes.ndim == 3:
        planes = planes[None]
    p, m, l, lw = planes.shape
    if lw != len(importance):
        raise InvalidWidths("planes and importance disagree on l_w")
    if acc_bits < min_acc_bits(l_x, l, importance):
        raise AccumulatorTooNarrow(
            f"acc_bits={acc_bits} < required {min_acc_bits(l_x, l, importance)}")
    if acc_bits > 62:
        raise AccumulatorTooNarrow("accumulator beyond native word headroom")
    msb = x.params.msb_known_nonneg

    def party(vals):
        def fn(rt: PartyRuntime):
            v = vals.reshape(1, l, -1) if vals.ndim == 2 else vals
            if l_x < acc_bits:
                v = ext_step(rt, "gemm", v, l_x, acc_bits, msb, role="acc_ext")
            return gemm_step(rt, "gemm", v, planes, importance, signed, acc_bits)
        return fn

    out_s, out_c, ledger, mults = run_pair(party(x.server.values),
                                           party(x.client.values), seed=seed)
    params = QuantParams(acc_bits, x.params.scale_exp)
    shape = (m, x.shape[-1]) if p == 1 else (p, m, x.shape[-1])
    pair = SharePair(Share(PartyId.SERVER, out_s.reshape(shape), params),
                     Share(PartyId.CLIENT, out_c.reshape(shape), params))
    return pair, ledger, mults


def relu_2pc(x: SharePair, seed: int = 0):
    bits = x.params.bits
    out_params = x.params.with_msb(True)

    def fn(vals):
        return lambda rt: relu_step(rt, "relu", vals, bits)

    out_s, out_c, ledger, _ = run_pair(fn(x.server.values), fn(x.client.values),
                                       seed=seed)
    pair = SharePair(Share(PartyId.SERVER, out_s, out_params),
                     Share(PartyId.CLIENT, out_c, out_params))
    return pair, ledger


def _residual_steps(rt: PartyRuntime, main_vals, res_vals, l_main, e_main,
                    l_res, e_res, res_msb: bool, align_main_to=None):
    """Residual addition; optionally align the main branch up first (baseline)."""
    l_add = l_main
    if align_main_to is not None:
        main_vals = ext_step(rt, "residual", main_vals, l_main, align_main_to,
                             False, role="residual_main_align")
        l_add = align_main_to
    if l_add > l_res:
        res_vals = ext_step(rt, "residual", res_vals, l_res, l_add, res_msb,
                            role="residual_res_align")
    shift = e_main - e_res
    res_vals = ring_reduce(res_vals.astype(np.int64) << shift, l_add)
    return ring_reduce(main_vals + res_vals, l_add), l_add


def residual_add_simplified(main: SharePair, residual: SharePair, seed: int = 0):
    """Align only the residual branch to the main operand's (bits, scale)."""
    l_main, e_main = main.params.bits, main.params.scale_exp
    l_res, e_res = residual.params.bits, residual.params.scale_exp
    if e_main < e_res:
        raise ScaleUnalignable(
            "residual scale is finer than the main branch; aligning would "
            "truncate the residual")
    if l_res > l_main:
        raise ScaleUnalignable("residual is wider than the main branch")
    res_msb = residual.params.msb_known_nonneg

    def fn(mv, rv):
        return lambda rt: _residual_steps(rt, mv, rv, l_main, e_main,
                                          l_res, e_res, res_msb)[0]

    out_s, out_c, ledger, _ = run_pair(
        fn(main.server.values, residual.server.values),
        fn(main.client.values, residual.client.values), seed=seed)
    params = QuantParams(l_main, e_main)
    pair = SharePair(Share(PartyId.SERVER, out_s, params),
                     Share(PartyId.CLIENT, out_c, params))
    return pair, ledger


def residual_add_baseline(main: SharePair, residual: SharePair, seed: int = 0):
    """Reference pattern that converts both branches to a common domain."""
    l_main, e_main = main.params.bits, main.params.scale_exp
    l_res, e_res = residual.params.bits, residual.params.scale_exp
    if e_main < e_res:
        raise ScaleUnalignable("residual scale finer than main")
    l_add = l_main + 1
    res_msb = residual.params.msb_known_nonneg

    def fn(mv, rv):
        return lambda rt: _residual_steps(rt, mv, rv, l_main, e_main,
                                          l_res, e_res, res_msb,
                                          align_main_to=l_add)[0]

    out_s, out_c, ledger, _ = run_pair(
        fn(main.server.values, residual.server.values),
        fn(main.client.values, residual.client.values), seed=seed)
    params = QuantParams(l_add, e_main)
    pair = SharePair(Share(PartyId.SERVER, out_s, params),
                     Share(PartyId.CLIENT, out_c, params))
    return pair, ledger


# -- composed quantized Winograd convolution ----------------------------------------

def qwinconv_steps(rt: PartyRuntime, node: str, my_vals: np.ndarray,
                   planes: np.ndarray, importance: BitImportance, signed: bool,
                   plan: WinogradPlan, l_a: int, pad: int = 1,
                   msb: bool = False,
                   acc_bits: int | None = None,
                   out_bits: int | None = None) -> tuple[np.ndarray, int]:
    """Extension -> feature transform -> per-position GEMM -> extension ->
    output transform, itemized in the ledger block by block."""
    n, c, h, w = my_vals.shape
    k = planes.shape[1]
    l_ft = l_a + plan.ft_ext_bits
    vals = ext_step(rt, node, my_vals, l_a, l_ft, msb, role="ft_ext")
    tiles, spec = tile_partition(vals, plan, pad)
    u = ring_reduce(feature_transform(tiles, plan), l_ft)     # local
    acc = acc_bits or min_acc_bits(l_ft, c, importance)
    u = ext_step(rt, node, u, l_ft, acc, msb, role="acc_ext")
    # (N, C, T, t, t) -> (P, L, N*T) per Winograd position
    p = plan.t * plan.t
    gemm_in = u.transpose(3, 4, 1, 0, 2).reshape(p, c, n * spec.tiles)
    gemm_out = gemm_step(rt, node, gemm_in, planes, importance, signed, acc)
    l_out = out_bits or (acc + plan.out_ext_bits)
    gemm_out = ext_step(rt, node, gemm_out, acc, l_out, False, role="out_ext")
    m_tiles = gemm_out.reshape(plan.t, plan.t, k, n, spec.tiles)
    m_tiles = m_tiles.transpose(3, 2, 4, 0, 1)                # (N, K, T, t, t)
    y_tiles = ring_reduce(output_transform(m_tiles, plan), l_out)
    return tile_merge_outputs(y_tiles, spec), l_out


def qwinconv(x: SharePair, w_win_q: np.ndarray, importance: BitImportance,
             plan: WinogradPlan, *, weight_scale_exp: int = 0,
             signed: bool = True, pad: int = 1, seed: int = 0):
    """Quantized Winograd convolution protocol over a shared activation.

    x: (N, C, H, W) share pair at l_a bits; w_win_q: Winograd-domain
    quantized weights (K, C, t, t) as integers.  Reconstruction equals the
    plaintext quantized Winograd pipeline bit for bit.
    """
    l_a = x.params.bits
    k, c = w_win_q.shape[:2]
    p = plan.t * plan.t
    planes = decompose_ints(
        w_win_q.reshape(k, c, p).transpose(2, 0, 1), importance, signed)
    msb = x.params.msb_known_nonneg

    def fn(vals):
        return lambda rt: qwinconv_steps(rt, "qwinconv", vals, planes,
                                         importance, signed, plan, l_a,
                                         pad, msb)

    (out_s, bits_s), (out_c, _), ledger, mults = run_pair(
        fn(x.server.values), fn(x.client.values), seed=seed)
    params = QuantParams(bits_s, x.params.scale_exp + weight_scale_exp)
    pair = SharePair(Share(PartyId.SERVER, out_s, params),
                     Share(PartyId.CLIENT, out_c, params))
    return pair, ledger, mults


def qwinconv_plain(x_q: np.ndarray, w_win_q: np.ndarray, plan: WinogradPlan,
                   importance: BitImportance | None = None,
                   signed: bool = True, pad: int = 1) -> np.ndarray:
    """Plaintext oracle for the quantized Winograd pipeline (exact ints)."""
    n, c, h, w = x_q.shape
    k = w_win_q.shape[0]
    tiles, spec = tile_partition(x_q.astype(np.int64), plan, pad)
    u = feature_transform(tiles, plan)
    p = plan.t * plan.t
    u2 = u.transpose(3, 4, 1, 0, 2).reshape(p, c, n * spec.tiles)
    wmat = w_win_q.reshape(k, c, p).transpose(2, 0, 1).astype(np.int64)
    prod = np.einsum("pml,pln->pmn", wmat, u2)
    m_tiles = prod.reshape(plan.t, plan.t, k, n, spec.tiles).transpose(3, 2, 4, 0, 1)
    y_tiles = output_transform(m_tiles, plan)
    return tile_merge_outputs(y_tiles, spec)
