import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fixquant import quantizer as q
from fixquant.errors import EncodingError, NumericError, ShapeError
from fixquant.quantizer import QuantEncoding, QuantizerSpec


def asym(scale, zero_point=0, bitwidth=8):
    return QuantEncoding(scale=scale, zero_point=zero_point, bitwidth=bitwidth)


def sym(scale, bitwidth=8, signed=True):
    return QuantEncoding(scale=scale, zero_point=0, bitwidth=bitwidth, signed=signed, symmetric=True)


class TestEncodingValidation:
    def test_scale_snapped_to_float32(self):
        e = asym(0.1)
        assert e.scale == float(np.float32(0.1))

    def test_nonpositive_scale_rejected(self):
        with pytest.raises(EncodingError):
            asym(0.0)
        with pytest.raises(EncodingError):
            asym(-1.0)

    def test_signed_requires_symmetric(self):
        with pytest.raises(EncodingError):
            QuantEncoding(scale=0.1, zero_point=0, bitwidth=8, signed=True, symmetric=False)

    def test_symmetric_pins_zero_point(self):
        with pytest.raises(EncodingError):
            QuantEncoding(scale=0.1, zero_point=3, bitwidth=8, symmetric=True)

    def test_zero_point_must_sit_on_grid(self):
        with pytest.raises(EncodingError):
            asym(0.1, zero_point=256)
        with pytest.raises(EncodingError):
            asym(0.1, zero_point=-1)

    def test_bitwidth_bounds(self):
        for bw in (1, 33):
            with pytest.raises(EncodingError):
                asym(0.1, bitwidth=bw)

    def test_integer_range_unsigned(self):
        e = asym(0.5, zero_point=10)
        assert (e.q_lo, e.q_hi) == (0, 255)

    def test_integer_range_signed(self):
        e = sym(0.5)
        assert (e.q_lo, e.q_hi) == (-128, 127)

    def test_grid_limits(self):
        e = asym(0.5, zero_point=10)
        assert e.grid_min == 0.5 * (0 - 10)
        assert e.grid_max == 0.5 * (255 - 10)


def test_round_half_away_from_zero():
    got = q.round_half_away(np.array([0.5, 1.5, -0.5, -1.5, 2.4]))
    assert got.tolist() == [1, 2, -1, -2, 2]


def test_quantize_int_worked_scalar():
    # round(1.3 / 0.5) + 10 = 3 + 10
    assert q.quantize_int(1.3, asym(0.5, zero_point=10)) == 13


def test_quantize_int_zero_maps_to_zero_point():
    for e in (asym(0.3, zero_point=77), sym(0.1)):
        assert q.quantize_int(0.0, e) == e.zero_point


def test_quantize_int_saturates_at_grid_edge():
    e = asym(1.0)
    assert q.quantize_int(300.2, e) == 255
    assert q.quantize_int(-5.0, e) == 0


def test_dequantize_worked_scalar():
    assert q.dequantize(13, asym(0.5, zero_point=10)) == 1.5


def test_dequantize_rejects_off_grid_values():
    with pytest.raises(EncodingError):
        q.dequantize(np.array([256]), asym(0.5))
    with pytest.raises(EncodingError):
        q.dequantize(np.array([1.5]), asym(0.5))


def test_qdq_error_bounded_by_half_scale_inside_grid():
    e = asym(0.03, zero_point=128)
    x = np.linspace(e.grid_min, e.grid_max, 1001)
    err = np.abs(q.qdq_tensor(x, e) - x)
    assert err.max() <= e.scale / 2 + 1e-12


def test_qdq_idempotent():
    e = asym(0.07, zero_point=31)
    rng = np.random.default_rng(0)
    x = rng.normal(scale=3.0, size=500)
    once = q.qdq_tensor(x, e)
    assert np.array_equal(q.qdq_tensor(once, e), once)


def test_quantize_rejects_nan():
    with pytest.raises(NumericError):
        q.quantize_int(np.array([np.nan]), asym(0.1))


class TestQuantizerSpec:
    def test_disabled_spec_is_identity(self):
        spec = QuantizerSpec(enabled=False)
        x = np.array([0.123456789, -3.21])
        assert np.array_equal(q.qdq(x, spec), x)

    def test_enabled_spec_requires_encodings(self):
        with pytest.raises(EncodingError):
            q.qdq(np.ones(3), QuantizerSpec())

    def test_set_encodings_checks_bitwidth(self):
        spec = QuantizerSpec(bitwidth=8)
        with pytest.raises(EncodingError):
            spec.set_encodings(asym(0.1, bitwidth=4))

    def test_frozen_spec_ignores_plain_updates(self):
        spec = QuantizerSpec()
        spec.set_encodings(asym(0.5), frozen=True)
        spec.set_encodings(asym(0.25))
        assert spec.encodings[0].scale == 0.5

    def test_frozen_spec_accepts_explicit_frozen_update(self):
        spec = QuantizerSpec()
        spec.set_encodings(asym(0.5), frozen=True)
        spec.set_encodings(asym(0.25), frozen=True)
        assert spec.encodings[0].scale == 0.25

    def test_clone_detaches_encodings(self):
        spec = QuantizerSpec()
        spec.set_encodings(asym(0.5))
        other = spec.clone()
        other.set_encodings(asym(0.25))
        assert spec.encodings[0].scale == 0.5


def test_ste_mask_flags_clipped_entries():
    spec = QuantizerSpec()
    spec.set_encodings(asym(1.0, zero_point=128))
    x = np.array([-200.0, 0.0, 500.0])
    assert q.ste_mask(x, spec).tolist() == [0.0, 1.0, 0.0]


def test_ste_mask_all_ones_when_disabled():
    spec = QuantizerSpec(enabled=False)
    assert q.ste_mask(np.full(4, 1e9), spec).tolist() == [1.0] * 4


class TestPerChannel:
    def row_spec(self, w):
        encs = [
            QuantEncoding(scale=max(np.abs(r).max(), 1e-8) / 127, signed=True, symmetric=True)
            for r in w
        ]
        spec = QuantizerSpec(symmetric=True, channel_axis=0)
        spec.set_encodings(encs)
        return spec

    def test_each_row_gets_own_scale(self):
        w = np.array([[0.1, -0.1], [10.0, -10.0]])
        spec = self.row_spec(w)
        assert spec.encodings[0].scale < spec.encodings[1].scale

    def test_qdq_matches_rowwise_qdq(self):
        rng = np.random.default_rng(1)
        w = rng.normal(size=(3, 5)) * np.array([[1.0], [5.0], [0.2]])
        spec = self.row_spec(w)
        y = q.qdq(w, spec)
        for i, e in enumerate(spec.encodings):
            assert np.allclose(y[i], q.qdq_tensor(w[i], e), atol=1e-12)

    def test_channel_count_checked(self):
        spec = self.row_spec(np.ones((3, 5)))
        with pytest.raises(EncodingError):
            q.qdq(np.ones((4, 5)), spec)

    def test_ste_mask_uses_per_channel_grids(self):
        w = np.array([[0.1], [10.0]])
        spec = self.row_spec(w)
        x = np.array([[5.0], [5.0]])  # clips on the narrow row only
        assert q.ste_mask(x, spec).ravel().tolist() == [0.0, 1.0]


class TestIntegerMatmulAsymmetric:
    def test_symmetric_case_is_plain_scaled_matmul(self):
        ew, ex = sym(0.5), asym(0.1)
        wi = np.array([[1, 2], [3, 4]], dtype=np.int64)
        xi = np.array([1, 1], dtype=np.int64)
        y = q.integer_matmul_asymmetric(wi, xi, ew, ex)
        assert np.allclose(y, 0.5 * 0.1 * (wi @ xi))

    def test_matches_dequantized_matmul(self):
        rng = np.random.default_rng(2)
        w = rng.normal(size=(3, 6))
        x = rng.normal(size=(6, 4)) + 0.7
        ew = sym(np.abs(w).max() / 127)
        ex = asym((x.max() - min(x.min(), 0.0)) / 255, zero_point=60)
        wi = q.quantize_int(w, ew)
        xi = q.quantize_int(x, ex)
        y = q.integer_matmul_asymmetric(wi, xi, ew, ex)
        ref = q.dequantize(wi, ew) @ q.dequantize(xi, ex)
        assert np.allclose(y, ref, rtol=1e-9, atol=1e-12)

    def test_rejects_integers_off_their_grid(self):
        with pytest.raises(EncodingError):
            q.integer_matmul_asymmetric(
                np.array([[999]]), np.array([1]), sym(1.0), asym(1.0)
            )

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            q.integer_matmul_asymmetric(
                np.ones((2, 3), np.int64), np.ones(4, np.int64), sym(1.0), asym(1.0)
            )

    def test_product_magnitude_precheck(self):
        e = QuantEncoding(scale=1.0, bitwidth=32, symmetric=True)
        big = np.array([[2**31]], dtype=np.int64)
        with pytest.raises(NumericError):
            q.integer_matmul_asymmetric(big, big.ravel(), e, e)


class TestIntegerMac:
    def test_worked_example(self):
        # acc stays integer; dequantizing by s_w*s_x recovers the real product
        ew, ex = sym(0.5), asym(0.1)
        wi = np.array([[1, 2], [3, 4]], dtype=np.int64)
        xi = np.array([1, 1], dtype=np.int64)
        acc = q.integer_mac(wi, xi, None, ew, ex)
        assert acc.tolist() == [3, 7]
        assert np.allclose(ew.scale * ex.scale * acc, [0.15, 0.35])

    def test_bias_enters_pre_quantized(self):
        ew, ex = sym(0.5), asym(0.1)
        wi = np.array([[1, 2], [3, 4]], dtype=np.int64)
        xi = np.array([1, 1], dtype=np.int64)
        bias_int = np.array([100, -100], dtype=np.int64)
        acc = q.integer_mac(wi, xi, bias_int, ew, ex)
        assert acc.tolist() == [103, -93]

    def test_zero_point_correction_matches_dequantized_math(self):
        rng = np.random.default_rng(3)
        w = rng.normal(size=(4, 5))
        x = rng.uniform(0.0, 2.0, size=(5, 3))
        ew = sym(np.abs(w).max() / 127)
        ex = asym(x.max() / 255, zero_point=0)
        ex = QuantEncoding(scale=(x.max() - 0.0) / 255, zero_point=0, bitwidth=8)
        wi, xi = q.quantize_int(w, ew), q.quantize_int(x, ex)
        acc = q.integer_mac(wi, xi, None, ew, ex)
        ref = q.dequantize(wi, ew) @ q.dequantize(xi, ex)
        assert np.allclose(ew.scale * ex.scale * acc, ref, atol=1e-9)

    def test_requires_symmetric_weights(self):
        with pytest.raises(EncodingError):
            q.integer_mac(
                np.ones((1, 1), np.int64), np.ones(1, np.int64), None, asym(0.5, zero_point=3), asym(0.1)
            )

    def test_int32_accumulator_overflow_raises(self):
        e32 = QuantEncoding(scale=1.0, bitwidth=32, symmetric=True, signed=True)
        wi = np.array([[2**20]], dtype=np.int64)
        xi = np.array([2**20], dtype=np.int64)
        with pytest.raises(NumericError):
            q.integer_mac(wi, xi, None, e32, e32)

    def test_bias_shape_checked(self):
        ew, ex = sym(0.5), asym(0.1)
        with pytest.raises(ShapeError):
            q.integer_mac(
                np.ones((2, 2), np.int64), np.ones(2, np.int64), np.ones(3, np.int64), ew, ex
            )


# hypothesis invariants


@settings(max_examples=200, deadline=None)
@given(
    x=st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=64),
    scale=st.floats(1e-4, 1e3),
    bitwidth=st.integers(2, 16),
    data=st.data(),
)
def test_quantize_output_always_on_integer_grid(x, scale, bitwidth, data):
    zp = data.draw(st.integers(0, 2**bitwidth - 1))
    e = QuantEncoding(scale=scale, zero_point=zp, bitwidth=bitwidth)
    xq = q.quantize_int(np.array(x), e)
    assert xq.min() >= e.q_lo and xq.max() <= e.q_hi


@settings(max_examples=200, deadline=None)
@given(
    x=st.lists(st.floats(-100, 100, allow_nan=False), min_size=1, max_size=32),
    scale=st.floats(0.01, 10.0),
    zp=st.integers(0, 255),
)
def test_clipping_happens_iff_outside_grid(x, scale, zp):
    e = QuantEncoding(scale=scale, zero_point=zp, bitwidth=8)
    x = np.array(x)
    y = q.qdq_tensor(x, e)
    inside = (x >= e.grid_min) & (x <= e.grid_max)
    assert np.all(np.abs(y[inside] - x[inside]) <= e.scale / 2 + 1e-9)
    outside_err = np.abs(y[~inside] - x[~inside])
    clipped_to_edge = np.isin(y[~inside], [e.grid_min, e.grid_max])
    assert np.all(clipped_to_edge | (outside_err <= e.scale / 2 + 1e-9))


@settings(max_examples=100, deadline=None)
@given(
    scale=st.floats(0.01, 10.0),
    zp=st.integers(0, 255),
)
def test_qdq_zero_is_exact(scale, zp):
    e = QuantEncoding(scale=scale, zero_point=zp, bitwidth=8)
    assert q.qdq_tensor(np.array([0.0]), e)[0] == 0.0


@settings(max_examples=100, deadline=None)
@given(x=st.lists(st.floats(-50, 50), min_size=1, max_size=32))
def test_qdq_lands_on_grid(x):
    e = asym(0.25, zero_point=100)
    y = q.qdq_tensor(np.array(x), e)
    k = y / e.scale + e.zero_point
    assert np.allclose(k, np.round(k), atol=1e-6)
