import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import operator_zoo, rand_in, rand_out
from pnpcm.operators import (
    BlurOperator,
    ComposedOperator,
    DenseOperator,
    DownsampleOperator,
    FourierSubsampleOperator,
    MaskOperator,
    bicubic_matrix,
    fft2c,
    gaussian_kernel_1d,
    ifft2c,
    random_line_mask,
    random_mask,
    synthesize_measurement,
    synthetic_coil_maps,
    to_dense,
)
from pnpcm.tensor import ShapeError, inner

ZOO = operator_zoo(16)


def adjoint_gap(op, x, y):
    return abs(inner(op.apply(x), y) - inner(x, op.adjoint(y)))


@pytest.mark.parametrize("name", sorted(ZOO))
def test_adjoint_identity(name, rng):
    op = ZOO[name]
    for _ in range(10):
        x, y = rand_in(op, rng), rand_out(op, rng)
        scale = np.linalg.norm(op.apply(x)) * np.linalg.norm(y) + 1
        assert adjoint_gap(op, x, y) <= 1e-10 * scale


@pytest.mark.parametrize("name", sorted(ZOO))
def test_dense_matrix_reproduces_apply_and_adjoint(name, rng):
    op = ZOO[name]
    M = to_dense(op)
    x, y = rand_in(op, rng), rand_out(op, rng)
    assert np.allclose(M @ x.ravel(), op.apply(x).ravel(), atol=1e-12)
    assert np.allclose(M.conj().T @ y.ravel(), op.adjoint(y).ravel(), atol=1e-12)


@pytest.mark.parametrize("name", sorted(ZOO))
def test_gram_matches_adjoint_of_apply(name, rng):
    op = ZOO[name]
    x = rand_in(op, rng)
    assert np.allclose(op.gram(x), op.adjoint(op.apply(x)), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(
    h=st.integers(4, 12),
    w=st.integers(4, 12),
    channels=st.sampled_from([0, 1, 3]),
    size=st.sampled_from([1, 3, 5]),
    boundary=st.sampled_from(["circular", "reflect"]),
    seed=st.integers(0, 2**32 - 1),
)
def test_blur_adjoint_any_shape(h, w, channels, size, boundary, seed):
    shape = (h, w) + ((channels,) if channels else ())
    op = BlurOperator(shape, gaussian_kernel_1d(size, 1.3), boundary)
    g = np.random.default_rng(seed)
    x, y = g.standard_normal(shape), g.standard_normal(shape)
    assert adjoint_gap(op, x, y) <= 1e-10 * (np.linalg.norm(op.apply(x)) * np.linalg.norm(y) + 1)


@settings(max_examples=20, deadline=None)
@given(factor=st.sampled_from([1, 2, 4]), blocks=st.integers(1, 5), seed=st.integers(0, 2**32 - 1))
def test_downsample_adjoint_any_factor(factor, blocks, seed):
    n = factor * blocks * 2
    g = np.random.default_rng(seed)
    for method in ("block_average", "bicubic"):
        op = DownsampleOperator((n, n, 2), factor, method)
        x, y = g.standard_normal(op.input_shape), g.standard_normal(op.output_shape)
        assert adjoint_gap(op, x, y) <= 1e-10 * (np.linalg.norm(op.apply(x)) * np.linalg.norm(y) + 1)


def test_wrong_shape_or_dtype_is_rejected():
    op = ZOO["mask"]
    with pytest.raises(ShapeError):
        op.apply(np.zeros((16, 15)))
    with pytest.raises(ShapeError):
        op.apply(np.zeros((16, 16), complex))
    with pytest.raises(ShapeError):
        ZOO["fourier_1coil"].apply(np.zeros((16, 16)))


def test_mask_replicates_over_channels(rng):
    keep = random_mask((8, 8), 0.5, rng)
    op = MaskOperator(keep, input_shape=(8, 8, 3))
    x = rng.standard_normal((8, 8, 3))
    out = op.apply(x)
    for c in range(3):
        assert np.array_equal(out[:, :, c], x[:, :, c] * keep)
    assert keep.sum() == 32


def test_circular_blur_matches_fft_convolution(rng):
    k = gaussian_kernel_1d(5, 10.0)
    op = BlurOperator((12, 10), k, "circular")
    x = rng.standard_normal((12, 10))
    via_fft = np.fft.ifft2(np.fft.fft2(x) * op.transfer_function()).real
    assert np.allclose(op.apply(x), via_fft, atol=1e-12)


def test_blur_preserves_constants_under_reflect():
    op = BlurOperator((9, 9), gaussian_kernel_1d(5, 2.0), "reflect")
    assert np.allclose(op.apply(np.full((9, 9), 0.7)), 0.7)


def test_kernel_taps():
    k = gaussian_kernel_1d(5, 10.0)
    assert k.sum() == pytest.approx(1.0)
    assert np.allclose(k, k[::-1])
    # sigma much larger than the support: almost a box filter
    assert k.max() / k.min() < 1.05
    with pytest.raises(ValueError):
        gaussian_kernel_1d(4, 1.0)


def test_block_average_and_bicubic_rows():
    x = np.arange(64.0).reshape(8, 8)
    op = DownsampleOperator((8, 8), 2)
    assert op.apply(x)[0, 0] == pytest.approx(np.mean([0, 1, 8, 9]))
    M = bicubic_matrix(16, 4)
    assert M.shape == (4, 16)
    assert np.allclose(M.sum(axis=1), 1.0)
    with pytest.raises(ShapeError):
        DownsampleOperator((10, 10), 4)


def test_centered_fft_is_unitary(rng):
    x = rng.standard_normal((6, 8)) + 1j * rng.standard_normal((6, 8))
    k = fft2c(x)
    assert np.linalg.norm(k) == pytest.approx(np.linalg.norm(x))
    assert np.allclose(ifft2c(k), x)
    # DC of a centred transform sits in the middle
    assert abs(fft2c(np.ones((8, 8)))[4, 4]) == pytest.approx(8.0)


def test_line_mask_counts_and_acs(rng):
    m = random_line_mask(320, 4, 24, rng)
    assert m.sum() == 80
    assert m[148:172].all()
    m8 = random_line_mask(320, 8, 12, rng)
    assert m8.sum() == 40


def test_fourier_full_sampling_is_unitary(rng):
    n = 8
    op = FourierSubsampleOperator((n, n), np.ones(n, bool))
    x = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    assert np.allclose(op.gram(x), x)
    maps = synthetic_coil_maps((n, n), 3)
    assert np.allclose(np.sum(np.abs(maps) ** 2, axis=0), 1.0)
    multi = FourierSubsampleOperator((n, n), np.ones(n, bool), maps)
    assert np.allclose(multi.gram(x), x)


def test_fourier_rejects_bad_setup():
    with pytest.raises(ValueError):
        FourierSubsampleOperator((8, 8), np.zeros(8, bool), acs_lines=2)
    with pytest.raises(ValueError):
        FourierSubsampleOperator((8, 8), np.ones(8, bool), 2 * synthetic_coil_maps((8, 8), 2))


def test_composed_and_dense_operators(rng):
    blur = BlurOperator((8, 8), gaussian_kernel_1d(3, 1.0))
    mask = MaskOperator(random_mask((8, 8), 0.5, rng))
    comp = ComposedOperator(mask, blur)
    x, y = rng.standard_normal((8, 8)), rng.standard_normal((8, 8))
    assert np.allclose(comp.apply(x), mask.apply(blur.apply(x)))
    assert adjoint_gap(comp, x, y) < 1e-12
    A = rng.standard_normal((5, 64))
    dense = DenseOperator(A, (8, 8), (5,))
    assert np.allclose(to_dense(dense), A)


def test_to_dense_refuses_large_inputs():
    with pytest.raises(ValueError):
        to_dense(MaskOperator(np.ones((65, 64), bool)))


def test_measurement_noise_only_on_support(rng):
    keep = random_mask((16, 16), 0.3, rng)
    op = MaskOperator(keep)
    y = synthesize_measurement(op, np.ones((16, 16)), 0.1, rng)
    assert np.all(y[~keep] == 0)
    assert np.std(y[keep] - 1.0) == pytest.approx(0.1, rel=0.3)
    lines = random_line_mask(16, 4, 2, rng)
    fop = FourierSubsampleOperator((16, 16), lines, acs_lines=2)
    k = synthesize_measurement(fop, np.ones((16, 16), complex), 0.1, rng)
    assert np.all(k[:, ~lines] == 0)


def test_adjoint_wrapper(rng):
    op = ZOO["downsample_block"]
    y = rand_out(op, rng)
    assert np.array_equal(op.H.apply(y), op.adjoint(y))
    assert op.H.H is op
    assert math.prod(op.H.output_shape) == 256
