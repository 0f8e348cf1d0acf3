"""Additive secret sharing over Z_{2^l}."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ParamMismatch, ShapeMismatch
from .qtensor import QTensor, QuantParams, ring_mask, ring_reduce


class PartyId(str, Enum):
    SERVER = "server"
    CLIENT = "client"

    @property
    def other(self) -> "PartyId":
        return PartyId.CLIENT if self is PartyId.SERVER else PartyId.SERVER


@dataclass(frozen=True)
class Share:
    """One party's additive share of a logical tensor.

    `values` holds signed representatives of ring elements; the ring is
    Z_{2^params.bits}.  params (and shape) are public metadata identical
    on both sides.
    """

    owner: PartyId
    values: np.ndarray
    params: QuantParams

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.values, dtype=np.int64))
        object.__setattr__(self, "values", ring_reduce(v, self.params.bits))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape


def uniform_ring(rng: np.random.Generator, bits: int, shape) -> np.ndarray:
    """Uniform ring elements (signed representatives) from a seeded generator."""
    n = int(np.prod(shape)) if np.ndim(shape) or isinstance(shape, (tuple, list)) else int(shape)
    raw = rng.bytes(8 * max(n, 1))
    u = np.frombuffer(raw, dtype="<u8", count=max(n, 1)) & ring_mask(bits)
    return ring_reduce(u[:n], bits).reshape(shape)


def share(t: QTensor, rng: np.random.Generator) -> tuple[Share, Share]:
    """Split a tensor into a uniform server share and the matching client share."""
    bits = t.params.bits
    server_vals = uniform_ring(rng, bits, t.shape)
    client_vals = ring_reduce(t.data - server_vals, bits)
    return (
        Share(PartyId.SERVER, server_vals, t.params),
        Share(PartyId.CLIENT, client_vals, t.params),
    )


def reconstruct(a: Share, b: Share) -> QTensor:
    """Ring addition of the two shares, reduced to the signed representative."""
    if a.owner == b.owner:
        raise ParamMismatch("need one share from each party")
    if a.shape != b.shape:
        raise ShapeMismatch(f"share shapes differ: {a.shape} vs {b.shape}")
    if a.params != b.params:
        raise ParamMismatch(f"share params differ: {a.params} vs {b.params}")
    total = ring_reduce(a.values + b.values, a.params.bits)
    return QTensor(total, a.params)


def share_pair(t: QTensor, rng: np.random.Generator) -> "SharePair":
    s, c = share(t, rng)
    return SharePair(s, c)


@dataclass(frozen=True)
class SharePair:
    """Both parties' shares of one logical tensor, for lockstep simulation."""

    server: Share
    client: Share

    def __post_init__(self):
        if self.server.owner != PartyId.SERVER or self.client.owner != PartyId.CLIENT:
            raise ParamMismatch("pair must hold (server, client) shares in order")

    @property
    def params(self) -> QuantParams:
        return self.server.params

    @property
    def shape(self) -> tuple[int, ...]:
        return self.server.shape

    def open(self) -> QTensor:
        return reconstruct(self.server, self.client)
