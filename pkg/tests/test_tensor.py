import numpy as np
import pytest

from pnpcm.tensor import (
    COMPLEX,
    REAL,
    ShapeError,
    as_tensor,
    axpy,
    gaussian_sample,
    inner,
    make_rng,
    norm2,
    standard_normal,
)


def test_as_tensor_promotes_and_refuses_lossy():
    assert as_tensor([1, 2, 3]).dtype == REAL
    assert as_tensor(np.ones(3, np.complex64)).dtype == COMPLEX
    with pytest.raises(TypeError):
        as_tensor(np.ones(2, complex), REAL)
    with pytest.raises(TypeError):
        as_tensor(np.ones(2), np.float32)


def test_no_broadcasting():
    with pytest.raises(ShapeError):
        axpy(2.0, np.ones((3, 1)), np.ones((3, 3)))
    with pytest.raises(ShapeError):
        inner(np.ones(3), np.ones(3, complex))


def test_inner_is_conjugate_linear_in_first_argument():
    a = np.array([1 + 2j, 3 - 1j])
    b = np.array([2 - 1j, 1j])
    assert inner(a, b) == pytest.approx(np.sum(np.conj(a) * b))
    assert inner(1j * a, b) == pytest.approx(-1j * inner(a, b))
    assert isinstance(inner(np.ones(2), np.ones(2)), float)


def test_norm2_counts_every_entry():
    x = np.full((2, 3, 4), 2.0)
    assert norm2(x) == pytest.approx(2.0 * np.sqrt(24))


def test_rng_is_reproducible_and_validates_seed():
    a = make_rng(7).standard_normal(5)
    b = make_rng(7).standard_normal(5)
    assert np.array_equal(a, b)
    with pytest.raises(ValueError):
        make_rng(-1)
    with pytest.raises(ValueError):
        make_rng(2**64)


def test_complex_draws_have_unit_variance_per_component():
    z = standard_normal((200_000,), COMPLEX, make_rng(0))
    assert np.var(z.real) == pytest.approx(1.0, rel=0.02)
    assert np.var(z.imag) == pytest.approx(1.0, rel=0.02)
    assert abs(np.mean(z.real * z.imag)) < 0.01


def test_zero_std_sample_is_mean_and_consumes_nothing():
    g = make_rng(3)
    mean = np.arange(4.0)
    out = gaussian_sample(mean.shape, mean, 0.0, g)
    assert np.array_equal(out, mean) and out is not mean
    assert g.standard_normal() == make_rng(3).standard_normal()
    with pytest.raises(ValueError):
        gaussian_sample(mean.shape, mean, -1.0, g)
