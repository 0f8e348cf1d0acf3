"""Winograd convolution machinery: transforms, tiling, extension bounds, oracles.

Supported plans are F(2,3) and F(4,3).  B and A are integer matrices, so
applying the feature and output transforms to additive shares is a local,
communication-free operation.  G carries fractions and is only ever used
offline, in exact rational arithmetic, before quantization.

The growth of values under a transform is bounded by column l1-norms: a
product against matrix M grows magnitudes by at most max_j ||M[:,j]||_1,
so ceil(log2) of that norm is the per-side extension requirement and the
two-sided sandwich doubles it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import UnsupportedPlan

# F(2,3), Lavin-Gray.  Matrices stored transposed the way they are applied:
# feature U = BT @ X @ B, weight V = G @ w @ GT, output Y = AT @ M @ A.
_BT_F23 = [
    [1, 0, -1, 0],
    [0, 1, 1, 0],
    [0, -1, 1, 0],
    [0, 1, 0, -1],
]
_G_F23 = [
    [Fraction(1), Fraction(0), Fraction(0)],
    [Fraction(1, 2), Fraction(1, 2), Fraction(1, 2)],
    [Fraction(1, 2), Fraction(-1, 2), Fraction(1, 2)],
    [Fraction(0), Fraction(0), Fraction(1)],
]
_AT_F23 = [
    [1, 1, 1, 0],
    [0, 1, -1, -1],
]

# F(4,3)
_BT_F43 = [
    [4, 0, -5, 0, 1, 0],
    [0, -4, -4, 1, 1, 0],
    [0, 4, -4, -1, 1, 0],
    [0, -2, -1, 2, 1, 0],
    [0, 2, -1, -2, 1, 0],
    [0, 4, 0, -5, 0, 1],
]
_G_F43 = [
    [Fraction(1, 4), Fraction(0), Fraction(0)],
    [Fraction(-1, 6), Fraction(-1, 6), Fraction(-1, 6)],
    [Fraction(-1, 6), Fraction(1, 6), Fraction(-1, 6)],
    [Fraction(1, 24), Fraction(1, 12), Fraction(1, 6)],
    [Fraction(1, 24), Fraction(-1, 12), Fraction(1, 6)],
    [Fraction(0), Fraction(0), Fraction(1)],
]
_AT_F43 = [
    [1, 1, 1, 1, 1, 0],
    [0, 1, -1, 2, -2, 0],
    [0, 1, 1, 4, 4, 0],
    [0, 1, -1, 8, -8, 1],
]


def _ceil_log2(v) -> int:
    """Smallest k with 2^k >= v, for positive rational or integer v."""
    if v <= 0:
        raise ValueError("need a positive norm")
    k = 0
    p = Fraction(1)
    while p < v:
        p *= 2
        k += 1
    return k


def ext_bits_for_transform(matrix) -> int:
    """One-sided extension bits for a product against `matrix`.

    Returns ceil(max_j log2 ||M[:,j]||_1); callers double it for the
    two-sided sandwich M^T X M.
    """
    m = np.asarray(matrix, dtype=object)
    if m.ndim != 2:
        raise ValueError("need a 2-D matrix")
    norms = [sum(abs(Fraction(x)) for x in m[:, j]) for j in range(m.shape[1])]
    best = max(norms)
    if best == 0:
        raise ValueError("matrix has an all-zero column")
    return _ceil_log2(best)


@dataclass(frozen=True)
class WinogradPlan:
    m: int
    r: int
    bt: np.ndarray          # (t, t) int64, applied as BT @ X @ BT.T
    g: tuple                # (t, r) Fractions
    at: np.ndarray          # (m, t) int64, applied as AT @ M @ AT.T
    ft_ext_bits: int
    out_ext_bits: int

    @property
    def t(self) -> int:
        return self.m + self.r - 1

    @property
    def mults_per_tile(self) -> int:
        return self.t * self.t

    @property
    def b_matrix(self) -> np.ndarray:
        """B so that the feature transform is B^T X B; columns are BT's rows."""
        return self.bt.T.copy()

    @property
    def a_matrix(self) -> np.ndarray:
        return self.at.T.copy()


_PLANS = {}


def winograd_matrices(m: int, r: int) -> WinogradPlan:
    """Standard transform matrices for the supported (m, r) plans."""
    key = (m, r)
    if key in _PLANS:
        return _PLANS[key]
    if key == (2, 3):
        bt, g, at = _BT_F23, _G_F23, _AT_F23
    elif key == (4, 3):
        bt, g, at = _BT_F43, _G_F43, _AT_F43
    else:
        raise UnsupportedPlan(f"no F({m},{r}) plan; supported: (2,3), (4,3)")
    bt_arr = np.array(bt, dtype=np.int64)
    at_arr = np.array(at, dtype=np.int64)
    plan = WinogradPlan(
        m=m,
        r=r,
        bt=bt_arr,
        g=tuple(tuple(row) for row in g),
        at=at_arr,
        ft_ext_bits=2 * ext_bits_for_transform(bt_arr.T),
        out_ext_bits=2 * ext_bits_for_transform(at_arr.T),
    )
    _PLANS[key] = plan
    return plan


# -- weight transformation (offline, exact) -----------------------------------

def g_denominator(plan: WinogradPlan) -> int:
    return math.lcm(*[f.denominator for row in plan.g for f in row])


def weight_transform_int(w_num: np.ndarray, den: int, plan: WinogradPlan):
    """G w G^T for dyadic/rational kernels given as w_num / den.

    Returns (num, den_out) with num an int64 tensor (K, C, t, t); exact.
    """
    gd = g_denominator(plan)
    gn = np.array([[int(f * gd) for f in row] for row in plan.g], dtype=np.int64)
    num = np.einsum("ij,kcjl,ml->kcim", gn, w_num.astype(np.int64), gn)
    return num, den * gd * gd


def weight_transform(kernels, plan: WinogradPlan) -> np.ndarray:
    """G w G^T per (out-channel, in-channel) pair, in exact rationals.

    Accepts float or Fraction kernels of shape (K, C, r, r); returns an
    object ndarray of Fractions, shape (K, C, t, t).
    """
    w = np.asarray(kernels)
    if w.ndim == 2:
        w = w[None, None]
    K, C, r1, r2 = w.shape
    if (r1, r2) != (plan.r, plan.r):
        raise UnsupportedPlan(f"kernel must be {plan.r}x{plan.r}")
    g = np.array([[f for f in row] for row in plan.g], dtype=object)
    out = np.empty((K, C, plan.t, plan.t), dtype=object)
    for k in range(K):
        for c in range(C):
            tile = np.array([[Fraction(x) for x in row] for row in w[k, c]],
                            dtype=object)
            out[k, c] = g @ tile @ g.T
    return out


# -- tiling --------------------------------------------------------------------

@dataclass(frozen=True)
class TilingSpec:
    m: int
    t: int
    pad: int
    in_h: int
    in_w: int
    out_h: int
    out_w: int
    tiles_h: int
    tiles_w: int

    @property
    def tiles(self) -> int:
        return self.tiles_h * self.tiles_w


def tiling_spec(h: int, w: int, plan: WinogradPlan, pad: int = 1) -> TilingSpec:
    out_h = h + 2 * pad - plan.r + 1
    out_w = w + 2 * pad - plan.r + 1
    if out_h <= 0 or out_w <= 0:
        raise ValueError("input too small for the kernel")
    th = -(-out_h // plan.m)
    tw = -(-out_w // plan.m)
    return TilingSpec(plan.m, plan.t, pad, h, w, out_h, out_w, th, tw)


def tile_partition(x: np.ndarray, plan: WinogradPlan, pad: int = 1):
    """Overlapping t-wide tiles at stride m: (N, C, H, W) -> (N, C, T, t, t)."""
    n, c, h, w = x.shape
    spec = tiling_spec(h, w, plan, pad)
    ph = spec.tiles_h * plan.m + plan.r - 1
    pw = spec.tiles_w * plan.m + plan.r - 1
    canvas = np.zeros((n, c, ph, pw), dtype=x.dtype)
    canvas[:, :, pad:pad + h, pad:pad + w] = x
    win = np.lib.stride_tricks.sliding_window_view(canvas, (plan.t, plan.t),
                                                   axis=(2, 3))
    tiles = win[:, :, ::plan.m, ::plan.m]
    tiles = tiles.reshape(n, c, spec.tiles, plan.t, plan.t).copy()
    return tiles, spec


def tile_merge(tiles: np.ndarray, spec: TilingSpec) -> np.ndarray:
    """Invert tile_partition (overlaps agree by construction)."""
    n, c = tiles.shape[:2]
    ph = spec.tiles_h * spec.m + spec.t - spec.m
    pw = spec.tiles_w * spec.m + spec.t - spec.m
    canvas = np.zeros((n, c, ph, pw), dtype=tiles.dtype)
    idx = 0
    for a in range(spec.tiles_h):
        for b in range(spec.tiles_w):
            canvas[:, :, a * spec.m:a * spec.m + spec.t,
                   b * spec.m:b * spec.m + spec.t] = tiles[:, :, idx]
            idx += 1
    return canvas[:, :, spec.pad:spec.pad + spec.in_h,
                  spec.pad:spec.pad + spec.in_w].copy()


def tile_merge_outputs(tiles: np.ndarray, spec: TilingSpec) -> np.ndarray:
    """Reassemble per-tile m x m outputs into (N, K, H', W')."""
    n, k = tiles.shape[:2]
    canvas = np.zeros((n, k, spec.tiles_h * spec.m, spec.tiles_w * spec.m),
                      dtype=tiles.dtype)
    idx = 0
    for a in range(spec.tiles_h):
        for b in range(spec.tiles_w):
            canvas[:, :, a * spec.m:(a + 1) * spec.m,
                   b * spec.m:(b + 1) * spec.m] = tiles[:, :, idx]
            idx += 1
    return canvas[:, :, :spec.out_h, :spec.out_w].copy()


# -- transforms ----------------------------------------------------------------

def feature_transform(tiles: np.ndarray, plan: WinogradPlan) -> np.ndarray:
    """B^T X B per tile.  Integer matrices: local and exact on shares."""
    return np.einsum("ij,...jk,lk->...il", plan.bt, tiles, plan.bt)


def output_transform(tiles: np.ndarray, plan: WinogradPlan) -> np.ndarray:
    """A^T M A per tile, producing m x m outputs."""
    return np.einsum("ij,...jk,lk->...il", plan.at, tiles, plan.at)


def _object_sandwich(mat_rows, tiles):
    m = np.array(mat_rows, dtype=object)
    flat = tiles.reshape(-1, tiles.shape[-2], tiles.shape[-1])
    out = np.empty((flat.shape[0], m.shape[0], m.shape[0]), dtype=object)
    for i, tile in enumerate(flat):
        out[i] = m @ tile @ m.T
    return out.reshape(tiles.shape[:-2] + (m.shape[0], m.shape[0]))


# -- reference convolutions ------------------------------------------------------

def direct_conv_plain(w, x, stride: int = 1, pad: int = 1) -> np.ndarray:
    """Reference convolution; exact for int64 or Fraction inputs."""
    w = np.asarray(w)
    x = np.asarray(x)
    n, c, h, wd = x.shape
    k, c2, r, r2 = w.shape
    assert c == c2 and r == r2
    oh = (h + 2 * pad - r) // stride + 1
    ow = (wd + 2 * pad - r) // stride + 1
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=x.dtype)
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    out = np.zeros((n, k, oh, ow), dtype=x.dtype if x.dtype == object else np.int64)
    if w.dtype == object or x.dtype == object:
        out = np.full((n, k, oh, ow), Fraction(0), dtype=object)
    for kk in range(k):
        for cc in range(c):
            for u in range(r):
                for v in range(r):
                    patch = xp[:, cc, u:u + oh * stride:stride,
                               v:v + ow * stride:stride]
                    out[:, kk] += w[kk, cc, u, v] * patch
    return out


def winograd_conv_plain(w, x, plan: WinogradPlan, pad: int = 1) -> np.ndarray:
    """Winograd-route convolution in exact rational arithmetic."""
    w = np.asarray(w)
    x = np.asarray(x)
    w_frac = np.vectorize(Fraction, otypes=[object])(w) if w.dtype != object else w
    x_frac = np.vectorize(Fraction, otypes=[object])(x) if x.dtype != object else x
    v = weight_transform(w_frac, plan)                       # (K, C, t, t)
    tiles, spec = tile_partition(x_frac, plan, pad)          # (N, C, T, t, t)
    u = _object_sandwich(plan.bt.tolist(), tiles)            # (N, C, T, t, t)
    n_, c_, t_ = u.shape[:3]
    k_ = v.shape[0]
    prod = np.full((n_, k_, t_, plan.t, plan.t), Fraction(0), dtype=object)
    for kk in range(k_):
        for cc in range(c_):
            prod[:, kk] += v[kk, cc] * u[:, cc]
    y_tiles = _object_sandwich(plan.at.tolist(), prod)       # (N, K, T, m, m)
    return tile_merge_outputs(y_tiles, spec)
