"""Closed-form per-element communication costs for every protocol.

The asymptotic complexity rows of the underlying conversion protocols are
adopted verbatim as exact modeled costs; the optimizer's fusion identities
are then checkable as ledger arithmetic.  This module is the single source
of truth shared by the executing runtime and the static estimator, which
is what makes `estimate == executed` an enforceable invariant.

MSB-known discounts (values provably nonnegative, e.g. post-ReLU) are
documented engineering choices, configurable via the dataclass fields.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

DEFAULT_LAMBDA = 128


@dataclass(frozen=True)
class CostModel:
    lam: int = DEFAULT_LAMBDA

    # -- bit width conversions (per element) --------------------------------

    def ext(self, l1: int, l2: int, msb: bool = False) -> int:
        """Extend l1-bit x to l2-bit z with z = x."""
        if msb:
            return self.lam + l1 + l2
        return self.lam * (l1 + 1) + 13 * l1 + l2

    def trunc(self, l1: int, shift: int, msb: bool = False) -> int:
        """Right-shift an l1-bit value by `shift`, keeping the l1-bit ring."""
        if msb:
            return self.lam * (l1 + 1) + 13 * l1
        return self.lam * (l1 + 3) + 15 * l1 + shift + 20

    def tr(self, l1: int, shift: int, msb: bool = False) -> int:
        """Truncate-and-reduce: shift right and drop to an (l1-shift)-bit ring."""
        if msb:
            return self.lam + 13 * shift + l1
        return self.lam * (shift + 1) + 13 * shift + l1

    # -- non-linear ----------------------------------------------------------

    def relu(self, l: int) -> int:
        """Per-element DReLU+MUX stand-in; scales with the activation width."""
        return self.lam * (l + 2) + 14 * l

    # -- OT-based GEMM --------------------------------------------------------

    def gemm_offline(self, m: int, l: int, lw: int) -> int:
        """Correlation setup: one lambda-sized OT seed per weight bit row."""
        return m * l * lw * self.lam

    def gemm_online(self, m: int, l: int, lw: int, n: int, acc_bits: int) -> int:
        """Masked row exchange: N accumulator-width elements per weight bit."""
        return m * l * lw * n * acc_bits

    def gemm_total(self, m: int, l: int, lw: int, n: int, acc_bits: int) -> int:
        return m * l * lw * (self.lam + n * acc_bits)

    # -- share distribution / reveal ------------------------------------------

    def io(self, l: int) -> int:
        """One ring element across the wire (input sharing, output reveal)."""
        return l

    # -- helpers ---------------------------------------------------------------

    def at_lambda(self, lam: int) -> "CostModel":
        return replace(self, lam=lam)


def lambda_term(f, *args, lam: int = DEFAULT_LAMBDA, **kwargs) -> int:
    """Extract the lambda-proportional part of a cost formula.

    Evaluates the formula at lambda and at 0 and returns the difference,
    so the fusion identities can be checked on the lambda term alone.
    """
    hi = f(CostModel(lam=lam), *args, **kwargs)
    lo = f(CostModel(lam=0), *args, **kwargs)
    return hi - lo
