"""Fixed-point integer tensors over power-of-two rings.

Values are stored as signed two's-complement representatives of Z_{2^l}
with a dyadic scale 2^e: a tensor element q represents the real value
q / 2^e.  Everything downstream of this module (shares, protocols,
oracles) manipulates these integers and nothing else.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

from .errors import InvalidWidths

_QTSR_MAGIC = b"QTSR"
_QTSR_VERSION = 1

_FLAG_SIGNED = 0x01
_FLAG_MSB_NONNEG = 0x02


def _check_bits(bits: int) -> None:
    if not 1 <= int(bits) <= 64:
        raise InvalidWidths(f"ring width must be in 1..64, got {bits}")


def ring_mask(bits: int) -> np.uint64:
    """All-ones mask for an l-bit ring, as uint64."""
    _check_bits(bits)
    if bits == 64:
        return np.uint64(0xFFFFFFFFFFFFFFFF)
    return np.uint64((1 << bits) - 1)


def ring_reduce(values, bits: int):
    """Reduce mod 2^bits and report the signed two's-complement representative.

    Accepts a python int (arbitrary precision) or an integer ndarray.
    Idempotent: ring_reduce(ring_reduce(x, l), l) == ring_reduce(x, l).
    """
    _check_bits(bits)
    if isinstance(values, (int, np.integer)):
        m = int(values) % (1 << bits)
        if m >= 1 << (bits - 1):
            m -= 1 << bits
        return m
    a = np.asarray(values)
    if a.dtype == object or not np.issubdtype(a.dtype, np.integer):
        flat = np.array([ring_reduce(int(v), bits) for v in a.ravel()], dtype=np.int64)
        return flat.reshape(a.shape)
    u = np.atleast_1d(a).astype(np.uint64)  # scalar ops would warn on wrap
    if bits == 64:
        return u.view(np.int64).copy().reshape(a.shape)
    u = u & ring_mask(bits)
    half = np.uint64(1 << (bits - 1))
    two = np.uint64(1 << bits)
    return np.where(u >= half, u - two, u).view(np.int64).reshape(a.shape)


def signed_min(bits: int) -> int:
    return -(1 << (bits - 1))


def signed_max(bits: int) -> int:
    return (1 << (bits - 1)) - 1


@dataclass(frozen=True)
class QuantParams:
    """Bit width l, dyadic scale 2^scale_exp, signedness, and MSB knowledge."""

    bits: int
    scale_exp: int = 0
    signed: bool = True
    msb_known_nonneg: bool = False

    def __post_init__(self):
        _check_bits(self.bits)

    @property
    def scale(self) -> float:
        return float(2.0 ** self.scale_exp)

    def with_bits(self, bits: int) -> "QuantParams":
        return replace(self, bits=bits)

    def with_scale_exp(self, e: int) -> "QuantParams":
        return replace(self, scale_exp=e)

    def with_msb(self, flag: bool) -> "QuantParams":
        return replace(self, msb_known_nonneg=flag)

    def bounds(self) -> tuple[int, int]:
        if self.signed:
            return signed_min(self.bits), signed_max(self.bits)
        return 0, (1 << self.bits) - 1


@dataclass(frozen=True)
class QTensor:
    """Integer tensor with quantization parameters.

    data is always int64 holding the signed representative of each ring
    element; `params.bits` defines the ring.
    """

    data: np.ndarray
    params: QuantParams

    def __post_init__(self):
        a = np.ascontiguousarray(np.asarray(self.data, dtype=np.int64))
        object.__setattr__(self, "data", a)
        lo, hi = self.params.bounds()
        if a.size and (a.min() < lo or a.max() > hi):
            raise ValueError(
                f"elements out of range for {self.params.bits}-bit "
                f"{'signed' if self.params.signed else 'unsigned'} tensor"
            )
        if self.params.msb_known_nonneg and a.size and a.min() < 0:
            raise ValueError("msb_known_nonneg tensor holds negative elements")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, QTensor)
            and self.params == other.params
            and self.shape == other.shape
            and bool(np.array_equal(self.data, other.data))
        )


def _round_half_away(x: np.ndarray) -> np.ndarray:
    # np.round ties to even; the engine's convention is half away from zero.
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize(real_tensor, params: QuantParams) -> QTensor:
    """Clamped round-to-nearest quantization, q = clamp(round(v * 2^e))."""
    v = np.asarray(real_tensor, dtype=np.float64)
    scaled = np.ldexp(v, params.scale_exp)
    q = _round_half_away(scaled)
    lo, hi = params.bounds()
    q = np.clip(q, lo, hi)
    return QTensor(q.astype(np.int64), params)


def dequantize(t: QTensor) -> np.ndarray:
    """Element-wise v = q / 2^e."""
    return np.ldexp(t.data.astype(np.float64), -t.params.scale_exp)


def save_qtsr(path, t: QTensor) -> None:
    """Write the little-endian QTSR container.

    Layout: magic "QTSR", version u16, rank u8, dims u32 each, bits u8,
    scale_exp i8, flags u8, then raw little-endian int64 elements.
    """
    flags = 0
    if t.params.signed:
        flags |= _FLAG_SIGNED
    if t.params.msb_known_nonneg:
        flags |= _FLAG_MSB_NONNEG
    rank = len(t.shape)
    with open(path, "wb") as f:
        f.write(_QTSR_MAGIC)
        f.write(struct.pack("<HB", _QTSR_VERSION, rank))
        for d in t.shape:
            f.write(struct.pack("<I", d))
        f.write(struct.pack("<BbB", t.params.bits, t.params.scale_exp, flags))
        f.write(t.data.astype("<i8").tobytes())


def load_qtsr(path) -> QTensor:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != _QTSR_MAGIC:
        raise ValueError("not a QTSR file")
    version, rank = struct.unpack_from("<HB", raw, 4)
    if version != _QTSR_VERSION:
        raise ValueError(f"unsupported QTSR version {version}")
    off = 7
    dims = []
    for _ in range(rank):
        (d,) = struct.unpack_from("<I", raw, off)
        dims.append(d)
        off += 4
    bits, scale_exp, flags = struct.unpack_from("<BbB", raw, off)
    off += 3
    n = int(np.prod(dims)) if dims else 1
    data = np.frombuffer(raw, dtype="<i8", count=n, offset=off).reshape(dims)
    params = QuantParams(
        bits=bits,
        scale_exp=scale_exp,
        signed=bool(flags & _FLAG_SIGNED),
        msb_known_nonneg=bool(flags & _FLAG_MSB_NONNEG),
    )
    return QTensor(data.astype(np.int64), params)
