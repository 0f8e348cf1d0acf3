"""Two-party protocol runtime.

Each party runs the same deterministic program against its half of a
channel.  Offline correlated randomness comes from a dealer emulation:
a generator seeded identically on both sides, consumed in lockstep, that
plays the ideal functionality for OT products, comparisons and masked
conversions.  The emulation keeps the message pattern of the real
protocols (masked openings, masked operand transfers) and charges the
modeled costs, but its correlations are derived, not cryptographic.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from .channels import Endpoint, inproc_channel_pair, pack_ring, unpack_ring, TAG_OPEN
from .costs import CostModel
from .errors import InvariantViolation
from .ledger import CommLedger, Phase, merge_party_ledgers
from .qtensor import ring_mask, ring_reduce
from .sharing import PartyId


def _dealer_seed(seed: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed & 0xFFFFFFFF, 0x6EA1E5])


def _client_seed(seed: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed & 0xFFFFFFFF, 0xC11E57])


class Dealer:
    """Replicated ideal-functionality dealer.

    Both parties instantiate a Dealer from the session seed and draw from
    it in identical order, so either side can locally derive any
    correlation the functionality hands out.  Secrecy is emulated, not
    enforced; costs are charged by the requesting protocol.
    """

    def __init__(self, seed: int):
        self._rng = np.random.Generator(np.random.PCG64(_dealer_seed(seed)))

    def draw_ring(self, bits: int, n: int) -> np.ndarray:
        raw = self._rng.bytes(8 * max(n, 1))
        u = np.frombuffer(raw, dtype="<u8", count=max(n, 1)) & ring_mask(bits)
        return ring_reduce(u[:n], bits)


@dataclass
class PartyRuntime:
    """Per-party protocol state: role, channel, dealer replica, ledger."""

    role: PartyId
    endpoint: Endpoint
    seed: int
    cost: CostModel = field(default_factory=CostModel)
    ledger: CommLedger = field(default_factory=CommLedger)
    mult_count: int = 0

    def __post_init__(self):
        self.dealer = Dealer(self.seed)
        self.input_rng = np.random.Generator(np.random.PCG64(_client_seed(self.seed)))
        self._wire_mark = 0

    @property
    def is_server(self) -> bool:
        return self.role is PartyId.SERVER

    # -- wire helpers --------------------------------------------------------

    def begin_step(self) -> None:
        self._wire_mark = self.endpoint.traffic()

    def step_wire_bits(self) -> int:
        return 8 * (self.endpoint.traffic() - self._wire_mark)

    def send_ring(self, tag: int, values: np.ndarray, bits: int) -> None:
        self.endpoint.send(tag, pack_ring(values, bits))

    def recv_ring(self, tag: int, n: int, bits: int) -> np.ndarray:
        return unpack_ring(self.endpoint.recv(tag), n, bits)

    def exchange_open(self, masked: np.ndarray, bits: int) -> np.ndarray:
        """Symmetric masked opening: both send, both add. Returns the opening."""
        flat = np.ascontiguousarray(masked, dtype=np.int64).ravel()
        self.send_ring(TAG_OPEN, flat, bits)
        other = self.recv_ring(TAG_OPEN, flat.size, bits)
        return ring_reduce(flat + other, bits).reshape(masked.shape)

    # -- dealer-derived correlations ------------------------------------------

    def dealer_mask_shares(self, bits: int, n: int):
        """Additive shares of a dealer mask r; returns (my_share, full_r)."""
        r_server = self.dealer.draw_ring(bits, n)
        r_client = self.dealer.draw_ring(bits, n)
        r_full = ring_reduce(r_server + r_client, bits)
        mine = r_server if self.is_server else r_client
        return mine, r_full

    def dealer_output_share(self, f_values: np.ndarray, bits: int) -> np.ndarray:
        """Split functionality output f into fresh additive shares; return mine."""
        flat = np.ascontiguousarray(f_values, dtype=np.int64).ravel()
        u = self.dealer.draw_ring(bits, flat.size)
        if self.is_server:
            out = u
        else:
            out = ring_reduce(flat - u, bits)
        return out.reshape(f_values.shape)

    # -- ledger ----------------------------------------------------------------

    def charge(self, node: str, protocol: str, phase: Phase, modeled: int,
               wire_bits: int = 0, role: str = "") -> None:
        self.ledger.add(node, protocol, phase, modeled, wire_bits, role)


class _PartyThread(threading.Thread):
    def __init__(self, fn, runtime):
        super().__init__(daemon=True)
        self._fn = fn
        self.runtime = runtime
        self.result = None
        self.error = None

    def run(self):
        try:
            self.result = self._fn(self.runtime)
        except BaseException as exc:  # re-raised by the driver
            self.error = exc


def run_pair(server_fn, client_fn, seed: int = 0,
             cost: CostModel | None = None):
    """Drive both party programs over an in-process channel pair.

    Returns (server_result, client_result, merged_ledger, mult_count).
    """
    cm = cost or CostModel()
    ep_s, ep_c = inproc_channel_pair()
    rt_s = PartyRuntime(PartyId.SERVER, ep_s, seed, cm)
    rt_c = PartyRuntime(PartyId.CLIENT, ep_c, seed, cm)
    ts = _PartyThread(server_fn, rt_s)
    tc = _PartyThread(client_fn, rt_c)
    ts.start()
    tc.start()
    ts.join(120.0)
    tc.join(120.0)
    if ts.is_alive() or tc.is_alive():
        raise InvariantViolation("party threads deadlocked")
    for t in (ts, tc):
        if t.error is not None:
            raise t.error
    ledger = merge_party_ledgers(rt_s.ledger, rt_c.ledger)
    if rt_s.mult_count != rt_c.mult_count:
        raise InvariantViolation("multiplication counters diverged")
    return ts.result, tc.result, ledger, rt_s.mult_count


def dealer_correlation(kind: str, sizes: dict, *, seed: int = 0,
                       cost: CostModel | None = None,
                       ledger: CommLedger | None = None):
    """Standalone correlated-randomness request against the dealer.

    Produces per-party material for the named functionality and charges
    the requesting protocol's modeled cost to the Offline ledger.

    kinds:
      "ot_mult":   shares of w*r for a bit vector w and random r.
                   sizes: {"n": int, "bits": int, "w": 0/1 array}
      "comparison": shares of 1{x<0} for a masked x.
                   sizes: {"n": int, "bits": int, "x": int array}
      "ext":       mask material for an extension protocol.
                   sizes: {"n": int, "l1": int, "l2": int}
    """
    cm = cost or CostModel()
    led = ledger if ledger is not None else CommLedger()
    dealer_s = Dealer(seed)
    dealer_c = Dealer(seed)

    def split(values, bits):
        flat = np.ascontiguousarray(values, dtype=np.int64).ravel()
        u = dealer_s.draw_ring(bits, flat.size)
        dealer_c.draw_ring(bits, flat.size)  # lockstep draw on the replica
        return u, ring_reduce(flat - u, bits)

    if kind == "ot_mult":
        n, bits = int(sizes["n"]), int(sizes["bits"])
        w = int(sizes.get("w", 1)) & 1
        r = dealer_s.draw_ring(bits, n)
        dealer_c.draw_ring(bits, n)
        prod = ring_reduce(w * r, bits)
        s_share, c_share = split(prod, bits)
        led.add("dealer", "ot_mult", Phase.OFFLINE, n * (cm.lam + bits))
        return {"r": r, "server": s_share, "client": c_share, "ledger": led}
    if kind == "comparison":
        bits = int(sizes["bits"])
        x = np.asarray(sizes["x"], dtype=np.int64)
        ind = (ring_reduce(x, bits) < 0).astype(np.int64)
        s_share, c_share = split(ind, bits)
        led.add("dealer", "comparison", Phase.OFFLINE,
                x.size * cm.relu(bits))
        return {"server": s_share, "client": c_share, "ledger": led}
    if kind == "ext":
        n, l1, l2 = int(sizes["n"]), int(sizes["l1"]), int(sizes["l2"])
        r = dealer_s.draw_ring(l1, n)
        dealer_c.draw_ring(l1, n)
        s_share, c_share = split(r, l1)
        led.add("dealer", "ext", Phase.OFFLINE, n * cm.ext(l1, l2))
        return {"server": s_share, "client": c_share, "ledger": led}
    raise ValueError(f"unknown correlation kind {kind!r}")
