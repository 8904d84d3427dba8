"""Dense real/complex tensor helpers shared by every other module.

Tensors are plain :class:`numpy.ndarray` values restricted to ``float64`` and
``complex128``. numpy already stores complex data as interleaved
``(re, im)`` pairs in row-major order, which is also the on-disk layout used
by :mod:`pnpcm.io`. None of the helpers here broadcast: mismatched shapes or
dtypes raise :class:`ShapeError`.
"""

from __future__ import annotations

import numpy as np

REAL = np.dtype(np.float64)
COMPLEX = np.dtype(np.complex128)
DTYPES = (REAL, COMPLEX)


class ShapeError(ValueError):
    """Raised when two tensors that must agree in shape or dtype do not."""


def as_tensor(x, dtype=None) -> np.ndarray:
    """Return ``x`` as a C-contiguous float64 or complex128 array.

    Integer and float32 input is promoted to float64; complex64 to complex128.
    """
    arr = np.asarray(x)
    if dtype is None:
        dtype = COMPLEX if np.iscomplexobj(arr) else REAL
    dtype = np.dtype(dtype)
    if dtype not in DTYPES:
        raise TypeError(f"unsupported dtype {dtype}; expected float64 or complex128")
    if np.iscomplexobj(arr) and dtype == REAL:
        raise TypeError("refusing to silently drop the imaginary part")
    return np.ascontiguousarray(arr, dtype=dtype)


def check_same(x: np.ndarray, y: np.ndarray, what: str = "operands") -> None:
    if x.shape != y.shape:
        raise ShapeError(f"{what}: shape {x.shape} != {y.shape}")
    if x.dtype != y.dtype:
        raise ShapeError(f"{what}: dtype {x.dtype} != {y.dtype}")


def axpy(alpha, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Return ``alpha * x + y`` as a new tensor."""
    check_same(x, y, "axpy")
    return alpha * x + y


def inner(x: np.ndarray, y: np.ndarray):
    """Hermitian inner product ``sum(conj(x) * y)``.

    Real tensors give a Python float, complex tensors a Python complex.
    """
    check_same(x, y, "inner")
    val = np.vdot(x, y)
    if x.dtype == REAL:
        return float(val)
    return complex(val)


def norm2(x: np.ndarray) -> float:
    """Euclidean norm over every scalar entry."""
    return float(np.linalg.norm(x.ravel()))


def make_rng(seed: int) -> np.random.Generator:
    """Create an independent generator from a 64-bit unsigned seed."""
    seed = int(seed)
    if not 0 <= seed < 2**64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return np.random.Generator(np.random.PCG64(seed))


def standard_normal(shape, dtype, rng: np.random.Generator) -> np.ndarray:
    """Standard normal draws; complex dtype draws re and im independently, each N(0, 1)."""
    dtype = np.dtype(dtype)
    if dtype == COMPLEX:
        re = rng.standard_normal(shape)
        im = rng.standard_normal(shape)
        return re + 1j * im
    if dtype == REAL:
        return rng.standard_normal(shape)
    raise TypeError(f"unsupported dtype {dtype}")


def gaussian_sample(shape, mean: np.ndarray, std: float, rng: np.random.Generator) -> np.ndarray:
    """Draw ``mean + std * eps`` with ``eps`` i.i.d. standard normal.

    For complex means each of the real and imaginary components gets
    variance ``std**2``. With ``std == 0`` the mean is returned unchanged
    (a copy), and no random numbers are consumed.
    """
    if std < 0:
        raise ValueError(f"std must be non-negative, got {std}")
    shape = tuple(shape)
    if mean.shape != shape:
        raise ShapeError(f"gaussian_sample: mean shape {mean.shape} != {shape}")
    if std == 0:
        return mean.copy()
    return mean + std * standard_normal(shape, mean.dtype, rng)
