"""Communication ledger: modeled bit counts next to actually transmitted bits.

modeled_bits follow the closed-form cost model; wire_bits count the bytes
the emulation really pushed through its channel (framing included).  The
two are reported side by side so the gap between the ideal-functionality
emulation and the modeled protocol is always visible.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

from .errors import InvariantViolation


class Phase(str, Enum):
    OFFLINE = "offline"
    ONLINE = "online"


@dataclass
class LedgerEntry:
    node: str
    protocol: str
    phase: Phase
    modeled_bits: int
    wire_bits: int
    role: str = ""

    def key(self):
        return (self.node, self.protocol, self.phase, self.modeled_bits, self.role)


@dataclass
class CommLedger:
    entries: list[LedgerEntry] = field(default_factory=list)

    def add(self, node: str, protocol: str, phase: Phase, modeled_bits: int,
            wire_bits: int = 0, role: str = "") -> None:
        if modeled_bits < 0 or wire_bits < 0:
            raise InvariantViolation("ledger charges must be nonnegative")
        self.entries.append(
            LedgerEntry(node, protocol, Phase(phase), int(modeled_bits),
                        int(wire_bits), role)
        )

    def total_modeled(self, phase: Phase | None = None) -> int:
        return sum(e.modeled_bits for e in self.entries
                   if phase is None or e.phase == phase)

    def total_wire(self, phase: Phase | None = None) -> int:
        return sum(e.wire_bits for e in self.entries
                   if phase is None or e.phase == phase)

    def modeled_by_node(self) -> dict[str, dict[Phase, int]]:
        out: dict[str, dict[Phase, int]] = {}
        for e in self.entries:
            d = out.setdefault(e.node, {Phase.OFFLINE: 0, Phase.ONLINE: 0})
            d[e.phase] += e.modeled_bits
        return out

    def modeled_by_protocol(self) -> dict[str, dict[Phase, int]]:
        out: dict[str, dict[Phase, int]] = {}
        for e in self.entries:
            d = out.setdefault(e.protocol, {Phase.OFFLINE: 0, Phase.ONLINE: 0})
            d[e.phase] += e.modeled_bits
        return out

    def modeled_by_role(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for e in self.entries:
            out[e.role] = out.get(e.role, 0) + e.modeled_bits
        return out

    def to_rows(self) -> list[dict]:
        return [
            {
                "node": e.node,
                "protocol": e.protocol,
                "phase": e.phase.value,
                "modeled_bits": e.modeled_bits,
                "wire_bits": e.wire_bits,
                "role": e.role,
            }
            for e in self.entries
        ]


def merge_party_ledgers(server: CommLedger, client: CommLedger) -> CommLedger:
    """Combine the two parties' ledgers into the session ledger.

    Modeled charges must agree entry for entry (both parties run the same
    deterministic protocol schedule).  Wire bits are symmetric as well:
    each party records bytes sent plus bytes received per step, which both
    sides observe identically.
    """
    if len(server.entries) != len(client.entries):
        raise InvariantViolation("party ledgers differ in length")
    merged = CommLedger()
    for a, b in zip(server.entries, client.entries):
        if a.key() != b.key() or a.wire_bits != b.wire_bits:
            raise InvariantViolation(f"party ledgers disagree: {a} vs {b}")
        merged.entries.append(LedgerEntry(a.node, a.protocol, a.phase,
                                          a.modeled_bits, a.wire_bits, a.role))
    return merged
