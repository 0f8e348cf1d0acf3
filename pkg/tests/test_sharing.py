import numpy as np
import pytest

from wino2pc.costs import CostModel
from wino2pc.errors import InvariantViolation, ParamMismatch, ShapeMismatch
from wino2pc.ledger import CommLedger, LedgerEntry, Phase, merge_party_ledgers
from wino2pc.qtensor import QTensor, QuantParams, ring_reduce
from wino2pc.sharing import (PartyId, Share, reconstruct, share, share_pair,
                             uniform_ring)
from wino2pc.session import Dealer, dealer_correlation


class TestShareReconstruct:
    def test_pinned_additions(self):
        p = QuantParams(4, 0)
        s = Share(PartyId.SERVER, np.array([3]), p)
        c = Share(PartyId.CLIENT, np.array([2]), p)
        assert reconstruct(s, c).data.tolist() == [5]
        # 7 + 1 = 8 wraps to -8 in the 4-bit ring
        s = Share(PartyId.SERVER, np.array([7]), p)
        c = Share(PartyId.CLIENT, np.array([1]), p)
        assert reconstruct(s, c).data.tolist() == [-8]
        # ring representatives wrap: 15 = -1, so -1 + 1 = 0
        s = Share(PartyId.SERVER, np.array([15]), p)
        c = Share(PartyId.CLIENT, np.array([1]), p)
        assert reconstruct(s, c).data.tolist() == [0]
        s = Share(PartyId.SERVER, np.array([0]), p)
        c = Share(PartyId.CLIENT, np.array([0]), p)
        assert reconstruct(s, c).data.tolist() == [0]

    def test_client_share_is_difference(self):
        rng = np.random.default_rng(0)
        t = QTensor(np.array([-8, 5, 7, 0]), QuantParams(4, 0))
        s, c = share(t, rng)
        assert np.array_equal(
            c.values, ring_reduce(t.data - s.values, 4))

    def test_thousand_random_round_trips(self):
        rng = np.random.default_rng(1)
        for _ in range(1000):
            bits = int(rng.integers(1, 33))
            shape = tuple(rng.integers(1, 5, size=int(rng.integers(1, 3))))
            data = ring_reduce(
                rng.integers(-(1 << 40), 1 << 40, size=shape), bits)
            t = QTensor(data, QuantParams(bits, int(rng.integers(-4, 4))))
            s, c = share(t, rng)
            assert reconstruct(s, c) == t

    def test_errors(self):
        p = QuantParams(4, 0)
        a = Share(PartyId.SERVER, np.array([1]), p)
        with pytest.raises(ParamMismatch):
            reconstruct(a, Share(PartyId.SERVER, np.array([1]), p))
        with pytest.raises(ShapeMismatch):
            reconstruct(a, Share(PartyId.CLIENT, np.array([1, 2]), p))
        with pytest.raises(ParamMismatch):
            reconstruct(a, Share(PartyId.CLIENT, np.array([1]), QuantParams(5, 0)))

    def test_determinism(self):
        t = QTensor(np.arange(-8, 8), QuantParams(6, 0))
        a = share(t, np.random.default_rng(42))
        b = share(t, np.random.default_rng(42))
        assert np.array_equal(a[0].values, b[0].values)
        assert np.array_equal(a[1].values, b[1].values)

    def test_uniform_ring_shape_and_range(self):
        rng = np.random.default_rng(2)
        v = uniform_ring(rng, 5, (3, 4))
        assert v.shape == (3, 4)
        assert v.min() >= -16 and v.max() <= 15


class TestCommLedger:
    def test_totals_and_monotonicity(self):
        led = CommLedger()
        running = 0
        for i in range(10):
            led.add(f"n{i}", "ext", Phase.ONLINE, 100 * i, 8 * i)
            assert led.total_modeled() >= running
            running = led.total_modeled()
        assert led.total_modeled() == sum(100 * i for i in range(10))
        assert led.total_wire() == sum(8 * i for i in range(10))

    def test_rejects_negative(self):
        led = CommLedger()
        with pytest.raises(InvariantViolation):
            led.add("n", "ext", Phase.ONLINE, -1)

    def test_phase_split(self):
        led = CommLedger()
        led.add("a", "gemm", Phase.OFFLINE, 10)
        led.add("a", "gemm", Phase.ONLINE, 32)
        assert led.total_modeled(Phase.OFFLINE) == 10
        assert led.total_modeled(Phase.ONLINE) == 32
        assert led.modeled_by_node()["a"][Phase.ONLINE] == 32

    def test_merge_requires_agreement(self):
        a, b = CommLedger(), CommLedger()
        a.add("n", "ext", Phase.ONLINE, 5, 16)
        b.add("n", "ext", Phase.ONLINE, 5, 16)
        merged = merge_party_ledgers(a, b)
        assert merged.total_modeled() == 5
        b.entries[0] = LedgerEntry("n", "ext", Phase.ONLINE, 6, 16)
        with pytest.raises(InvariantViolation):
            merge_party_ledgers(a, b)


class TestDealer:
    def test_replicas_agree(self):
        d1, d2 = Dealer(7), Dealer(7)
        assert np.array_equal(d1.draw_ring(12, 100), d2.draw_ring(12, 100))

    def test_ot_mult_correlation(self):
        for w in (0, 1):
            out = dealer_correlation("ot_mult", {"n": 16, "bits": 8, "w": w},
                                     seed=3)
            total = ring_reduce(out["server"] + out["client"], 8)
            assert np.array_equal(total, ring_reduce(w * out["r"], 8))

    def test_comparison_correlation(self):
        x = np.array([-3, 5, 0, -1, 7], dtype=np.int64)
        out = dealer_correlation("comparison", {"n": 5, "bits": 6, "x": x},
                                 seed=4)
        total = ring_reduce(out["server"] + out["client"], 6)
        assert np.array_equal(total, (x < 0).astype(np.int64))

    def test_ext_charge_pinned(self):
        # one Ext(6->14) correlation over 10 elements at lambda=128
        out = dealer_correlation("ext", {"n": 10, "l1": 6, "l2": 14},
                                 seed=5, cost=CostModel(lam=128))
        led = out["ledger"]
        assert led.total_modeled(Phase.OFFLINE) == 10 * 988
        assert led.total_modeled(Phase.ONLINE) == 0

    def test_share_pair_open(self):
        rng = np.random.default_rng(6)
        t = QTensor(np.arange(-4, 4).reshape(2, 4), QuantParams(5, 1))
        pair = share_pair(t, rng)
        assert pair.open() == t
