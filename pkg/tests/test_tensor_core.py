import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fixquant import tensor_core as tc
from fixquant.errors import NumericError, ShapeError


def test_matmul_worked_example():
    assert np.array_equal(tc.matmul([[1, 2], [3, 4]], [1, 1]), [3, 7])


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        tc.matmul([[1, 2]], [1, 2, 3])


def test_f32_snaps_to_float32_grid():
    x = tc.f32(0.1)
    assert x.dtype == np.float64
    assert x.item() == float(np.float32(0.1))


def test_ensure_finite_rejects_nan_and_inf():
    with pytest.raises(NumericError):
        tc.ensure_finite(np.array([1.0, np.nan]), "x")
    with pytest.raises(NumericError):
        tc.ensure_finite(np.array([np.inf]), "x")


class TestLinear:
    def test_matches_manual_affine(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(5, 3))
        w = rng.normal(size=(4, 3))
        b = rng.normal(size=(4,))
        assert np.allclose(tc.linear(x, w, b), x @ w.T + b)

    def test_flattens_feature_maps(self):
        x = np.arange(2 * 3 * 2 * 2, dtype=float).reshape(2, 3, 2, 2)
        w = np.ones((1, 12))
        y = tc.linear(x, w)
        assert y.shape == (2, 1)
        assert np.allclose(y[:, 0], x.reshape(2, -1).sum(axis=1))

    def test_bad_feature_count(self):
        with pytest.raises(ShapeError):
            tc.linear(np.ones((2, 3)), np.ones((4, 5)))


class TestConv2d:
    def test_scalar_example(self):
        # 1x1 kernel over a single pixel: 2*3 + 1
        x = np.full((1, 1, 1, 1), 3.0)
        w = np.full((1, 1, 1, 1), 2.0)
        assert tc.conv2d(x, w, [1.0])[0, 0, 0, 0] == 7.0

    def test_against_explicit_loops(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2, 3, 5, 5))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=(4,))
        y = tc.conv2d(x, w, b, stride=2, padding=1)
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        n, _, hp, wp = xp.shape
        ho = (hp - 3) // 2 + 1
        wo = (wp - 3) // 2 + 1
        ref = np.zeros((n, 4, ho, wo))
        for ni in range(n):
            for oc in range(4):
                for i in range(ho):
                    for j in range(wo):
                        patch = xp[ni, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3]
                        ref[ni, oc, i, j] = np.sum(patch * w[oc]) + b[oc]
        assert np.allclose(y, ref)

    def test_depthwise_groups(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(1, 4, 4, 4))
        w = rng.normal(size=(4, 1, 3, 3))
        y = tc.conv2d(x, w, np.zeros(4), padding=1, groups=4)
        # each channel convolved independently
        for c in range(4):
            yc = tc.conv2d(x[:, c : c + 1], w[c : c + 1], [0.0], padding=1)
            assert np.allclose(y[:, c : c + 1], yc)

    def test_group_divisibility_checked(self):
        with pytest.raises(ShapeError):
            tc.conv2d(np.ones((1, 3, 4, 4)), np.ones((4, 1, 3, 3)), np.zeros(4), groups=2)


def test_batchnorm_matches_formula():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 3, 4, 4))
    g, b = rng.normal(size=3), rng.normal(size=3)
    m, v = rng.normal(size=3), rng.uniform(0.5, 2.0, size=3)
    y = tc.batchnorm(x, g, b, m, v)
    ref = g[:, None, None] * (x - m[:, None, None]) / np.sqrt(v[:, None, None] + 1e-5) + b[:, None, None]
    assert np.allclose(y, ref)


def test_batchnorm_rejects_negative_variance():
    with pytest.raises(NumericError):
        tc.batchnorm(np.ones((1, 2)), [1, 1], [0, 0], [0, 0], [1.0, -0.1])


def test_relu6_clips_both_sides():
    assert np.array_equal(tc.relu6([-1.0, 3.0, 9.0]), [0.0, 3.0, 6.0])


def test_add_requires_matching_shapes():
    with pytest.raises(ShapeError):
        tc.add(np.ones(3), np.ones(4))


def test_maxpool_pads_with_neg_inf():
    # all-negative input: zero padding would fake a 0 maximum
    x = np.full((1, 1, 2, 2), -5.0)
    y = tc.maxpool(x, kernel=2, stride=2, padding=1)
    assert y.max() == -5.0


def test_avgpool_counts_padding():
    x = np.full((1, 1, 2, 2), 4.0)
    y = tc.avgpool(x, kernel=2, stride=2, padding=1)
    # corner windows hold one real value and three zero pads
    assert y[0, 0, 0, 0] == 1.0


def test_concat_axis():
    a, b = np.ones((1, 2, 2, 2)), np.zeros((1, 3, 2, 2))
    assert tc.concat([a, b], axis=1).shape == (1, 5, 2, 2)


@settings(max_examples=50, deadline=None)
@given(
    n=st.integers(1, 4),
    cin=st.integers(1, 3),
    h=st.integers(3, 6),
    data=st.data(),
)
def test_conv2d_linearity(n, cin, h, data):
    """conv(a*x1 + x2) == a*conv(x1) + conv(x2) with zero bias."""
    seed = data.draw(st.integers(0, 2**31))
    rng = np.random.default_rng(seed)
    x1 = rng.normal(size=(n, cin, h, h))
    x2 = rng.normal(size=(n, cin, h, h))
    w = rng.normal(size=(2, cin, 3, 3))
    a = float(rng.normal())
    zeros = np.zeros(2)
    lhs = tc.conv2d(a * x1 + x2, w, zeros, padding=1)
    rhs = a * tc.conv2d(x1, w, zeros, padding=1) + tc.conv2d(x2, w, zeros, padding=1)
    assert np.allclose(lhs, rhs, atol=1e-9)
