"""Quantization math: scales, rounding, clamping, FP16 simulation, observers."""

import math

import numpy as np
import pytest

from pillarmix.quant import (
    FP16_MAX,
    DType,
    MinMaxObserver,
    QuantParams,
    compute_scale,
    dequantize,
    fake_quant,
    fake_quant_per_channel,
    fp16_roundtrip,
    observe,
    quantize,
    weight_quant_params,
)


class TestComputeScale:
    def test_worked_examples(self):
        assert compute_scale(-1.0, 2.0).scale == pytest.approx(2.0 / 127.0, abs=1e-12)
        assert compute_scale(-127.0, 127.0).scale == 1.0
        assert compute_scale(0.0, 0.0).scale == 1.0  # degenerate fallback

    def test_zero_point_pinned(self):
        assert compute_scale(-3.0, 5.0).zero_point == 0

    def test_matches_max_abs_oracle(self):
        rng = np.random.default_rng(42)
        for _ in range(1000):
            a, b = sorted(rng.uniform(-100, 100, size=2))
            expected = max(abs(a), abs(b)) / 127.0
            assert compute_scale(a, b).scale == expected

    def test_scale_equivariance(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            a, b = sorted(rng.uniform(-10, 10, size=2))
            c = float(rng.uniform(0.1, 10))
            lhs = compute_scale(c * a, c * b).scale
            rhs = c * compute_scale(a, b).scale
            assert lhs == pytest.approx(rhs, rel=1e-12)

    def test_errors(self):
        with pytest.raises(ValueError, match="non-finite"):
            compute_scale(-math.inf, 1.0)
        with pytest.raises(ValueError, match="min .* > max"):
            compute_scale(2.0, 1.0)
        with pytest.raises(ValueError, match="positive"):
            QuantParams(scale=0.0)
        with pytest.raises(ValueError, match="zero_point"):
            QuantParams(scale=1.0, zero_point=3)


class TestQuantizeDequantize:
    def test_zero_maps_to_zero(self):
        for s in (0.001, 1.0, 42.0):
            assert quantize(0.0, QuantParams(scale=s)) == 0

    def test_round_half_to_even(self):
        qp = QuantParams(scale=1.0)
        assert quantize(2.5, qp) == 2
        assert quantize(3.5, qp) == 4
        assert quantize(-2.5, qp) == -2

    def test_clamp_saturates(self):
        qp = QuantParams(scale=1.0)
        assert quantize(1000.0, qp) == 127
        assert quantize(-1000.0, qp) == -128

    def test_dequantize_examples(self):
        qp = QuantParams(scale=1.0)
        assert dequantize(0, qp) == 0.0
        assert dequantize(127, qp) == 127.0

    def test_round_trip_bound(self):
        rng = np.random.default_rng(11)
        for _ in range(500):
            s = float(rng.uniform(1e-3, 10))
            qp = QuantParams(scale=s)
            x = float(rng.uniform(-128 * s, 127 * s))
            assert abs(dequantize(quantize(x, qp), qp) - x) <= s / 2

    def test_monotone_in_x(self):
        qp = QuantParams(scale=0.37)
        xs = np.sort(np.random.default_rng(12).uniform(-100, 100, size=1000))
        qs = quantize(xs, qp)
        assert np.all(np.diff(qs) >= 0)


class TestFakeQuant:
    def test_zeros_fixed(self):
        t = np.zeros((3, 4), dtype=np.float32)
        np.testing.assert_array_equal(fake_quant(t, QuantParams(scale=0.5)), t)

    def test_grid_points_fixed(self):
        qp = QuantParams(scale=0.03125)  # power of two: grid exact in float32
        k = np.arange(-127, 128, dtype=np.float32)
        t = k * np.float32(qp.scale)
        np.testing.assert_array_equal(fake_quant(t, qp), t)

    def test_matches_scalar_oracle_and_bound(self):
        rng = np.random.default_rng(13)
        qp = QuantParams(scale=float(rng.uniform(0.01, 1.0)))
        t = rng.uniform(-128 * qp.scale, 127 * qp.scale, size=256).astype(np.float32)
        fq = fake_quant(t, qp)
        for x, y in zip(t, fq):
            assert y == np.float32(dequantize(quantize(float(x), qp), qp))
        assert np.max(np.abs(fq - t)) <= qp.scale / 2

    def test_idempotent(self):
        rng = np.random.default_rng(14)
        qp = QuantParams(scale=0.11)
        t = rng.normal(scale=5.0, size=128).astype(np.float32)
        once = fake_quant(t, qp)
        np.testing.assert_array_equal(fake_quant(once, qp), once)

    def test_error_decomposition(self):
        # inside the clip range the error is a rounding error bounded by s/2;
        # outside it equals the distance to the saturated grid edge
        qp = QuantParams(scale=0.5)
        inside = np.array([0.2, -3.3, 14.9], dtype=np.float32)
        assert np.max(np.abs(fake_quant(inside, qp) - inside)) <= qp.scale / 2
        outside = np.array([200.0, -100.0], dtype=np.float32)
        fq = fake_quant(outside, qp)
        np.testing.assert_allclose(fq, [127 * 0.5, -128 * 0.5], rtol=1e-6)
        np.testing.assert_allclose(
            np.abs(fq - outside), [200.0 - 63.5, 100.0 - 64.0], rtol=1e-6
        )

    def test_per_channel_weight_mode(self):
        rng = np.random.default_rng(15)
        w = rng.normal(size=(4, 3, 2, 2)).astype(np.float32)
        w[2] *= 40.0  # one wild output channel should not coarsen the others
        qp = weight_quant_params(w, per_channel=True)
        fq = fake_quant_per_channel(w, qp)
        per_tensor = fake_quant(w, weight_quant_params(w))
        err_pc = np.abs(fq - w)[0].max()
        err_pt = np.abs(per_tensor - w)[0].max()
        assert err_pc < err_pt
        for ch in range(4):
            assert np.abs(fq[ch] - w[ch]).max() <= qp.scales[ch] / 2


class TestFp16Roundtrip:
    def test_exact_cases(self):
        assert fp16_roundtrip(np.float32(1.0)) == 1.0
        assert fp16_roundtrip(np.float32(2049.0)) == 2048.0
        assert fp16_roundtrip(np.float32(1e6)) == FP16_MAX

    def test_idempotent(self):
        rng = np.random.default_rng(16)
        t = (rng.normal(size=512) * 1e3).astype(np.float32)
        once = fp16_roundtrip(t)
        np.testing.assert_array_equal(fp16_roundtrip(once), once)

    def test_integers_up_to_2048_exact(self):
        ints = np.arange(-2048, 2049, dtype=np.float32)
        np.testing.assert_array_equal(fp16_roundtrip(ints), ints)

    def test_saturates_instead_of_inf(self):
        t = np.array([1e30, -1e30, 65519.0], dtype=np.float32)
        out = fp16_roundtrip(t)
        assert np.all(np.isfinite(out))
        np.testing.assert_array_equal(out, [FP16_MAX, -FP16_MAX, FP16_MAX])


class TestMinMaxObserver:
    def test_empty_then_observe(self):
        obs = MinMaxObserver()
        assert obs.is_empty
        obs = observe(obs, np.array([-1.0, 3.0]))
        assert (obs.running_min, obs.running_max, obs.count) == (-1.0, 3.0, 1)

    def test_no_widening_on_interior_batch(self):
        obs = observe(MinMaxObserver(), np.array([-1.0, 3.0]))
        obs = observe(obs, np.array([0.0, 0.0]))
        assert (obs.running_min, obs.running_max) == (-1.0, 3.0)

    def test_order_independence(self):
        rng = np.random.default_rng(17)
        batches = [rng.normal(size=8) for _ in range(6)]
        a = MinMaxObserver()
        for b in batches:
            a = observe(a, b)
        c = MinMaxObserver()
        for b in reversed(batches):
            c = observe(c, b)
        assert (a.running_min, a.running_max) == (c.running_min, c.running_max)

    def test_merge_counts_and_ranges(self):
        a = observe(MinMaxObserver(), np.array([1.0, 2.0]))
        b = observe(MinMaxObserver(), np.array([-4.0, 0.5]))
        m = a.merge(b)
        assert (m.running_min, m.running_max, m.count) == (-4.0, 2.0, 2)

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError, match="non-finite"):
            observe(MinMaxObserver(), np.array([1.0, np.nan]))

    def test_empty_observer_has_no_params(self):
        with pytest.raises(ValueError, match="empty observer"):
            MinMaxObserver().quant_params()

    def test_params_follow_scale_formula(self):
        obs = observe(MinMaxObserver(), np.array([-0.5, 2.54]))
        assert obs.quant_params().scale == 2.54 / 127.0


def test_dtype_tags_closed():
    assert {d.value for d in DType} == {"fp32", "fp16", "int8"}
    with pytest.raises(ValueError):
        DType("int4")
