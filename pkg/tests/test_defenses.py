import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.fft import dctn
from scipy.ndimage import correlate

from orthodefense.defenses import (
    DefenseSpec,
    apply_defense,
    bilateral,
    bit_reduce,
    jpeg_coefficients,
    jpeg_like,
    jpeg_quant_table,
    tv_energy,
    tv_minimize,
)
from orthodefense.defenses import LUMINANCE_TABLE, _DCT


def test_bit_reduce_examples():
    assert bit_reduce(np.array([0.7]), 1)[0] == 1.0
    assert bit_reduce(np.array([0.5]), 1)[0] == 1.0  # half rounds up
    assert bit_reduce(np.array([0.49]), 1)[0] == 0.0
    with pytest.raises(ValueError):
        bit_reduce(np.zeros(2), 0)


def test_bit_reduce_identity_on_8bit(rng):
    x = rng.integers(0, 256, size=(3, 1, 5, 5)) / 255.0
    np.testing.assert_array_equal(bit_reduce(x, 8), x)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 8), st.integers(0, 2**31 - 1))
def test_bit_reduce_idempotent(depth, seed):
    x = np.random.default_rng(seed).uniform(size=(2, 1, 4, 4))
    once = bit_reduce(x, depth)
    np.testing.assert_array_equal(bit_reduce(once, depth), once)


def test_tv_constant_fixed_point():
    x = np.full((2, 1, 6, 6), 0.37)
    np.testing.assert_array_equal(tv_minimize(x, weight=3.0, iters=10, step=0.05), x)


@pytest.mark.parametrize("step", [0.001, 0.01, 0.1])
def test_tv_energy_monotone(rng, step):
    x = rng.uniform(size=(3, 2, 8, 8))
    _, energy = tv_minimize(x, weight=0.5, iters=25, step=step, return_energy=True)
    assert np.all(np.diff(energy, axis=0) <= 0)
    assert np.all(energy[-1] < energy[0])


def test_tv_gradient_matches_energy(rng):
    from orthodefense.defenses import _tv_energy_grad

    x = rng.uniform(size=(1, 1, 4, 5))
    u = rng.uniform(size=x.shape)
    g = _tv_energy_grad(u, x, 0.7)
    h = 1e-6
    num = np.zeros_like(u)
    for k in np.ndindex(u.shape):
        up, um = u.copy(), u.copy()
        up[k] += h
        um[k] -= h
        num[k] = (tv_energy(up, x, 0.7)[0] - tv_energy(um, x, 0.7)[0]) / (2 * h)
    np.testing.assert_allclose(g, num, atol=1e-5)


def test_tv_attenuates_impulse():
    x = np.zeros((1, 1, 9, 9))
    x[0, 0, 4, 4] = 1.0
    out = tv_minimize(x, weight=0.3, iters=50, step=0.05)
    assert out[0, 0, 4, 4] < 1.0
    assert out.min() >= 0 and out.max() <= 1


def test_tv_rejects_bad_weight():
    with pytest.raises(ValueError):
        tv_minimize(np.zeros((2, 2)), weight=0.0)


def test_bilateral_constant_fixed_point():
    x = np.full((1, 3, 7, 5), 0.6)
    np.testing.assert_allclose(bilateral(x, window=5), x, rtol=0, atol=1e-15)


def test_bilateral_large_range_sigma_is_gaussian_blur(rng):
    x = rng.uniform(size=(2, 2, 9, 8))
    window, sigma = 5, 1.2
    r = window // 2
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    kernel = np.exp(-(xx ** 2 + yy ** 2) / (2 * sigma ** 2))
    kernel /= kernel.sum()
    expected = np.stack([np.stack([correlate(ch, kernel, mode="nearest") for ch in img]) for img in x])
    got = bilateral(x, window=window, sigma_spatial=sigma, sigma_range=1e6)
    assert np.max(np.abs(got - expected)) < 1e-6


def test_bilateral_output_range(rng):
    x = rng.uniform(0.2, 0.7, size=(1, 1, 6, 6))
    out = bilateral(x, window=3)
    assert out.min() >= x.min() - 1e-15 and out.max() <= x.max() + 1e-15


def test_bilateral_rejects_even_window():
    with pytest.raises(ValueError):
        bilateral(np.zeros((4, 4)), window=4)


def test_dct_matrix_is_orthonormal_dct2():
    np.testing.assert_allclose(_DCT @ _DCT.T, np.eye(8), atol=1e-14)
    block = np.random.default_rng(0).normal(size=(8, 8))
    np.testing.assert_allclose(_DCT @ block @ _DCT.T, dctn(block, type=2, norm="ortho"), atol=1e-12)


def test_quant_table_scaling():
    np.testing.assert_array_equal(jpeg_quant_table(50), LUMINANCE_TABLE)
    assert np.all(jpeg_quant_table(100) == 1)
    assert jpeg_quant_table(10)[0, 0] == 80  # 16 * 500 / 100
    with pytest.raises(ValueError):
        jpeg_quant_table(0)


def test_jpeg_quality_100_smooth_block():
    yy, xx = np.mgrid[0:8, 0:8]
    x = (0.2 + 0.05 * xx + 0.03 * yy)[None, None]
    assert np.max(np.abs(jpeg_like(x, 100) - x)) < 1 / 255


@pytest.mark.parametrize("quality", [100, 75])
def test_jpeg_constant_block_exact(quality):
    # DC of a constant 8-bit block is 8 * (v - 128); quantizers 1 and 8 divide it
    x = np.full((1, 1, 8, 8), 77 / 255)
    np.testing.assert_allclose(jpeg_like(x, quality), x, atol=1e-12)


def test_jpeg_lower_quality_retains_fewer_ac_coefficients(rng):
    # quantizer entries never shrink as quality drops, so a coefficient zeroed
    # at one quality stays zeroed at every lower one
    x = rng.uniform(size=(2, 1, 16, 16))
    counts = []
    for q in (95, 90, 85, 80, 50, 20):
        c = jpeg_coefficients(x, q).copy()
        c[..., 0, 0] = 0
        counts.append(np.count_nonzero(c))
    assert all(a >= b for a, b in zip(counts, counts[1:]))
    assert counts[-1] < counts[0]


def test_quant_table_monotone_in_quality():
    tables = [jpeg_quant_table(q) for q in range(1, 101)]
    assert all(np.all(a >= b) for a, b in zip(tables, tables[1:]))


def test_jpeg_handles_non_multiple_of_8(rng):
    x = rng.uniform(size=(2, 3, 10, 13))
    out = jpeg_like(x, 80)
    assert out.shape == x.shape and out.min() >= 0 and out.max() <= 1


@settings(max_examples=20, deadline=None)
@given(
    st.sampled_from(["jpeg:quality=85", "tvm:weight=0.3,iters=5", "bit:depth=3", "bilateral:window=3"]),
    st.integers(0, 2**31 - 1),
)
def test_defenses_preserve_shape_and_range(text, seed):
    x = np.random.default_rng(seed).uniform(size=(2, 1, 9, 9))
    out = apply_defense(x, DefenseSpec.parse(text))
    assert out.shape == x.shape
    assert out.min() >= 0 and out.max() <= 1
    np.testing.assert_array_equal(out, apply_defense(x, DefenseSpec.parse(text)))


def test_spec_parsing():
    s = DefenseSpec.parse("bilateral:window=5,sigma_range=0.2")
    assert s.kwargs() == {"window": 5, "sigma_range": 0.2}
    assert s.name == "bilateral:window=5,sigma_range=0.2"
    assert DefenseSpec.parse("jpeg:90").kwargs() == {"quality": 90}
    assert DefenseSpec.parse("bit").name == "bit"
    for bad in ["gauss:3", "jpeg:quality=0", "bit:depth=9", "tvm:weight=-1", "bilateral:window=4", "jpeg:foo=1"]:
        with pytest.raises(ValueError):
            DefenseSpec.parse(bad)


def test_single_image_shapes(rng):
    img = rng.uniform(size=(9, 9))
    for fn in (lambda v: jpeg_like(v, 80), lambda v: bilateral(v, 3), lambda v: tv_minimize(v, 0.2, iters=3)):
        assert fn(img).shape == img.shape
