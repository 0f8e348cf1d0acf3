import numpy as np
import pytest

from wino2pc.costs import CostModel
from wino2pc.errors import AccumulatorTooNarrow, ScaleUnalignable
from wino2pc.ledger import Phase
from wino2pc.protocols import (BitImportance, decode_planes, decompose_ints,
                               default_importance, min_acc_bits, ot_gemm,
                               quantize_to_codes, qwinconv, qwinconv_plain,
                               relu_2pc, representable_codes,
                               residual_add_baseline, residual_add_simplified)
from wino2pc.qtensor import QTensor, QuantParams, ring_reduce
from wino2pc.sharing import share_pair
from wino2pc.winograd import winograd_matrices

LAM = 128


def _pair(values, bits, scale_exp=0, msb=False, seed=0):
    t = QTensor(np.asarray(values, dtype=np.int64),
                QuantParams(bits, scale_exp, msb_known_nonneg=msb))
    return share_pair(t, np.random.default_rng(seed))


class TestBitImportance:
    def test_default(self):
        assert default_importance(4).weights == (8, 4, 2, 1)
        assert default_importance(1).weights == (1,)

    def test_validation(self):
        with pytest.raises(ValueError):
            BitImportance((4, 3))       # not a power of two
        with pytest.raises(ValueError):
            BitImportance((4, 4))       # not strictly decreasing
        with pytest.raises(ValueError):
            BitImportance(())

    def test_decode_decompose_roundtrip(self):
        for lw in (1, 2, 3, 4):
            for reweighted in (False, True):
                imp = default_importance(lw) if not reweighted else \
                    BitImportance((1 << lw,) + default_importance(lw).weights[1:])
                for signed in (True, False):
                    codes = representable_codes(imp, signed)
                    assert len(codes) == 1 << lw
                    planes = decompose_ints(codes, imp, signed)
                    assert np.array_equal(
                        decode_planes(planes, imp, signed), codes)

    def test_unrepresentable_raises(self):
        imp = BitImportance((16, 4, 2, 1))  # re-weighted: gap below zero
        with pytest.raises(ValueError):
            decompose_ints(np.array([-3]), imp, signed=True)

    def test_quantize_to_codes_nearest(self):
        imp = default_importance(3)
        got = quantize_to_codes(np.array([2.4, 2.6, -9.0, 100.0]), imp, True)
        assert got.tolist() == [2, 3, -4, 3]


class TestOtGemm:
    def test_unit_weight(self):
        imp = default_importance(2)
        planes = decompose_ints(np.array([[1]]), imp, True)
        out, _, _ = ot_gemm(_pair([[3]], 4), planes, imp, acc_bits=8)
        assert out.open().data.tolist() == [[3]]

    def test_negative_weight_twos_complement(self):
        imp = default_importance(2)
        planes = decompose_ints(np.array([[-2]]), imp, True)
        x = _pair([[3, -1, 5]], 4)
        out, _, _ = ot_gemm(x, planes, imp, acc_bits=8)
        assert out.open().data.tolist() == [[-6, 2, -10]]

    def test_importance_linearity_exhaustive(self):
        # every bit pattern of a single weight, decoded against the oracle
        for lw in (1, 2, 3, 4):
            imp = default_importance(lw)
            patterns = np.array(np.meshgrid(*[[0, 1]] * lw, indexing="ij"),
                                dtype=np.uint8).reshape(lw, -1).T
            x = _pair([[7]], 5, seed=lw)
            for pat in patterns:
                planes = pat.reshape(1, 1, lw)
                acc = min_acc_bits(5, 1, imp)
                out, _, _ = ot_gemm(x, planes, imp, acc_bits=acc)
                want = int(decode_planes(planes, imp, True)[0, 0]) * 7
                assert out.open().data.tolist() == [[ring_reduce(want, acc)]]

    def test_reweighted_importance_exhaustive(self):
        for lw in (2, 3, 4):
            imp = BitImportance((1 << lw,) + default_importance(lw).weights[1:])
            patterns = np.array(np.meshgrid(*[[0, 1]] * lw, indexing="ij"),
                                dtype=np.uint8).reshape(lw, -1).T
            x = _pair([[5]], 5, seed=lw)
            acc = min_acc_bits(5, 1, imp)
            for pat in patterns:
                planes = pat.reshape(1, 1, lw)
                out, _, _ = ot_gemm(x, planes, imp, acc_bits=acc)
                want = int(decode_planes(planes, imp, True)[0, 0]) * 5
                assert out.open().data.tolist() == [[ring_reduce(want, acc)]]

    def test_cost_scaling(self):
        rng = np.random.default_rng(0)
        m, l, n, acc = 3, 4, 5, 16

        def gemm_bits(lw):
            imp = default_importance(lw)
            w = rng.integers(-(1 << (lw - 1)), 1 << (lw - 1), size=(m, l))
            planes = decompose_ints(w, imp, True)
            x = _pair(rng.integers(-8, 8, size=(l, n)), 6, seed=1)
            _, led, _ = ot_gemm(x, planes, imp, acc_bits=acc)
            gemm_entries = [e for e in led.entries if e.protocol == "gemm"]
            return sum(e.modeled_bits for e in gemm_entries)

        assert gemm_bits(4) == 2 * gemm_bits(2)

    def test_online_term_proportional_to_n(self):
        cm = CostModel(lam=LAM)
        base = cm.gemm_online(3, 4, 2, 5, 16)
        assert cm.gemm_online(3, 4, 2, 10, 16) == 2 * base
        assert cm.gemm_total(3, 4, 2, 5, 16) == \
            3 * 4 * 2 * (LAM + 5 * 16)

    def test_offline_online_split(self):
        imp = default_importance(2)
        planes = decompose_ints(np.array([[1]]), imp, True)
        x = _pair([[3]], 6, seed=2)
        _, led, _ = ot_gemm(x, planes, imp, acc_bits=16)
        gemm = {p: v for p, v in led.modeled_by_protocol().items()}["gemm"]
        assert gemm[Phase.OFFLINE] == 1 * 1 * 2 * LAM
        assert gemm[Phase.ONLINE] == 1 * 1 * 2 * 1 * 16

    def test_narrow_accumulator_rejected(self):
        imp = default_importance(4)
        planes = decompose_ints(np.zeros((2, 8), dtype=np.int64), imp, True)
        with pytest.raises(AccumulatorTooNarrow):
            ot_gemm(_pair(np.zeros((8, 2)), 6), planes, imp, acc_bits=10)


class TestRelu:
    def test_pinned(self):
        out, _ = relu_2pc(_pair([-5, 7], 6))
        assert out.open().data.tolist() == [0, 7]
        assert out.params.msb_known_nonneg

    def test_exhaustive_8bit(self):
        vals = np.arange(-128, 128)
        out, led = relu_2pc(_pair(vals, 8, seed=3))
        assert np.array_equal(out.open().data, np.maximum(vals, 0))
        assert led.total_modeled() == 256 * (LAM * 10 + 14 * 8)


class TestResidual:
    def test_pinned_alignment(self):
        main = _pair([40], 14, scale_exp=4)
        res = _pair([5], 8, scale_exp=2, seed=1)
        out, led = residual_add_simplified(main, res)
        assert out.open().data.tolist() == [60]
        assert out.params.bits == 14 and out.params.scale_exp == 4
        # the only charged conversion is the residual extension
        assert {e.protocol for e in led.entries} == {"ext"}
        assert led.total_modeled() == CostModel().ext(8, 14)

    def test_zero_residual(self):
        main = _pair([40, -3], 14, scale_exp=4)
        res = _pair([0, 0], 8, scale_exp=4, seed=2)
        out, led = residual_add_simplified(main, res)
        assert out.open().data.tolist() == [40, -3]
        assert led.total_modeled() == 2 * CostModel().ext(8, 14)

    def test_simplified_cheaper_than_baseline(self):
        rng = np.random.default_rng(4)
        vals_m = ring_reduce(rng.integers(-4000, 4000, size=32), 14)
        vals_r = ring_reduce(rng.integers(-100, 100, size=32), 8)
        main = _pair(vals_m, 14, scale_exp=6)
        res = _pair(vals_r, 8, scale_exp=2, seed=5)
        simp, led_s = residual_add_simplified(main, res)
        base, led_b = residual_add_baseline(main, res)
        assert led_s.total_modeled() < led_b.total_modeled()
        # both compute the same aligned sum, in their own rings
        assert np.array_equal(
            ring_reduce(base.open().data, 14), simp.open().data)

    def test_scale_unalignable(self):
        with pytest.raises(ScaleUnalignable):
            residual_add_simplified(_pair([1], 14, scale_exp=2),
                                    _pair([1], 8, scale_exp=4, seed=1))
        with pytest.raises(ScaleUnalignable):
            residual_add_simplified(_pair([1], 6, scale_exp=4),
                                    _pair([1], 8, scale_exp=2, seed=1))


class TestQWinConv:
    def _random_layer(self, seed, lw, la, c=None, k=None, h=None):
        rng = np.random.default_rng(seed)
        c = c or int(rng.integers(1, 17))
        k = k or int(rng.integers(1, 17))
        h = h or int(rng.integers(4, 17))
        imp = default_importance(lw)
        codes = quantize_to_codes(
            rng.normal(0, 0.4, size=(k, c, 4, 4))
            * (1 << (lw - 1)), imp, True)
        x = ring_reduce(rng.integers(-(1 << 20), 1 << 20, size=(1, c, h, h)), la)
        return codes, imp, x

    def test_zero_input_costs_anyway(self):
        plan = winograd_matrices(2, 3)
        codes, imp, _ = self._random_layer(0, 2, 6, c=2, k=2, h=4)
        x = _pair(np.zeros((1, 2, 4, 4), dtype=np.int64), 6)
        out, led, _ = qwinconv(x, codes, imp, plan)
        assert not out.open().data.any()
        gemm = led.modeled_by_protocol()["gemm"]
        assert gemm[Phase.OFFLINE] > 0 and gemm[Phase.ONLINE] > 0

    def test_matches_plain_oracle(self):
        plan = winograd_matrices(2, 3)
        for seed, lw, la in ((1, 4, 6), (2, 2, 6), (3, 2, 4), (4, 4, 4)):
            codes, imp, xv = self._random_layer(seed, lw, la, c=3, k=4, h=6)
            pair = share_pair(QTensor(xv, QuantParams(la, 0)),
                              np.random.default_rng(seed))
            out, _, _ = qwinconv(pair, codes, imp, plan, seed=seed)
            want = ring_reduce(qwinconv_plain(xv, codes, plan),
                               out.params.bits)
            assert np.array_equal(out.open().data, want)

    def test_mult_count_ratio(self):
        plan = winograd_matrices(2, 3)
        c, k, h = 16, 16, 8
        codes, imp, xv = self._random_layer(5, 2, 6, c=c, k=k, h=h)
        pair = share_pair(QTensor(xv, QuantParams(6, 0)),
                          np.random.default_rng(5))
        _, _, mults = qwinconv(pair, codes, imp, plan)
        tiles = (h // 2) ** 2
        assert mults == k * c * tiles * 16
        direct_mults = k * c * 9 * h * h  # stride 1, padded: H'W' = h*h
        assert mults * 36 == direct_mults * 16

    def test_ledger_itemizes_blocks(self):
        plan = winograd_matrices(2, 3)
        codes, imp, xv = self._random_layer(6, 2, 4, c=2, k=2, h=4)
        pair = share_pair(QTensor(xv, QuantParams(4, 0)),
                          np.random.default_rng(6))
        _, led, _ = qwinconv(pair, codes, imp, plan)
        roles = {e.role for e in led.entries}
        assert {"ft_ext", "acc_ext", "out_ext", ""} <= roles
        # local transforms generate no wire traffic: every frame belongs
        # to a charged protocol step
        assert all(e.wire_bits > 0 for e in led.entries
                   if e.phase == Phase.ONLINE)

    def test_end_to_end_random_small_layers(self):
        plan = winograd_matrices(2, 3)
        rng = np.random.default_rng(7)
        for trial in range(8):
            lw = int(rng.choice([2, 4]))
            la = int(rng.choice([4, 6]))
            codes, imp, xv = self._random_layer(trial + 10, lw, la)
            pair = share_pair(QTensor(xv, QuantParams(la, 0)),
                              np.random.default_rng(trial))
            out, _, _ = qwinconv(pair, codes, imp, plan, seed=trial)
            want = ring_reduce(qwinconv_plain(xv, codes, plan),
                               out.params.bits)
            assert np.array_equal(out.open().data, want)
