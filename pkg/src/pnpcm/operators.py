"""Linear forward operators with exact adjoints.

Images are ``(H, W)`` or ``(H, W, C)`` arrays; spatial operators act on the
first two axes. Every operator validates its input shape and dtype and never
broadcasts.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from .tensor import COMPLEX, REAL, ShapeError, as_tensor, standard_normal

MAX_DENSE_SIZE = 4096


class LinearOperator:
    """Base class. Subclasses implement ``_apply`` and ``_adjoint``.

    Attributes:
        kind: one of ``mask``, ``blur``, ``downsample``, ``fourier_subsample``,
            ``composite``, ``dense`` (or ``adjoint`` for wrapped adjoints).
        input_shape: shape of the signal domain.
        output_shape: shape of the measurement domain.
        dtype: input dtype.
        output_dtype: dtype produced by :meth:`apply`.
    """

    kind = "abstract"

    def __init__(self, input_shape, output_shape, dtype=REAL, output_dtype=None):
        self.input_shape = tuple(int(s) for s in input_shape)
        self.output_shape = tuple(int(s) for s in output_shape)
        self.dtype = np.dtype(dtype)
        self.output_dtype = np.dtype(output_dtype if output_dtype is not None else dtype)

    def _check(self, x, shape, dtype, what):
        if not isinstance(x, np.ndarray):
            raise TypeError(f"{self.kind}.{what}: expected ndarray, got {type(x).__name__}")
        if x.shape != shape:
            raise ShapeError(f"{self.kind}.{what}: expected shape {shape}, got {x.shape}")
        if x.dtype != dtype:
            raise ShapeError(f"{self.kind}.{what}: expected dtype {dtype}, got {x.dtype}")

    def apply(self, x: np.ndarray) -> np.ndarray:
        self._check(x, self.input_shape, self.dtype, "apply")
        return self._apply(x)

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        self._check(y, self.output_shape, self.output_dtype, "adjoint")
        return self._adjoint(y)

    def gram(self, x: np.ndarray) -> np.ndarray:
        """``A^H A x``; subclasses may fuse."""
        self._check(x, self.input_shape, self.dtype, "gram")
        return self._gram(x)

    def _gram(self, x):
        return self._adjoint(self._apply(x))

    def measurement_support(self) -> Optional[np.ndarray]:
        """Boolean mask of measurement entries that carry data, or None if all do."""
        return None

    @property
    def H(self) -> "LinearOperator":
        return AdjointOperator(self)

    def __call__(self, x):
        return self.apply(x)

    def __repr__(self):
        return f"<{type(self).__name__} {self.input_shape} -> {self.output_shape}>"


class AdjointOperator(LinearOperator):
    kind = "adjoint"

    def __init__(self, op: LinearOperator):
        super().__init__(op.output_shape, op.input_shape, op.output_dtype, op.dtype)
        self.op = op

    def _apply(self, x):
        return self.op._adjoint(x)

    def _adjoint(self, y):
        return self.op._apply(y)

    @property
    def H(self):
        return self.op


class MaskOperator(LinearOperator):
    """Pixel mask with zero-fill measurements: ``y = keep * x``.

    ``keep`` may cover only the pixel grid ``(H, W)``; it is then replicated
    across trailing channel axes at construction.
    """

    kind = "mask"

    def __init__(self, keep, input_shape=None, dtype=REAL):
        keep = np.asarray(keep, dtype=bool)
        if input_shape is None:
            input_shape = keep.shape
        input_shape = tuple(input_shape)
        if keep.shape != input_shape:
            if keep.shape != input_shape[: keep.ndim]:
                raise ShapeError(f"mask shape {keep.shape} does not cover input {input_shape}")
            extra = input_shape[keep.ndim :]
            keep = np.repeat(keep.reshape(keep.shape + (1,) * len(extra)), math.prod(extra), axis=-1)
            keep = keep.reshape(input_shape)
        super().__init__(input_shape, input_shape, dtype)
        self.keep = keep
        self._weights = keep.astype(np.float64)

    @property
    def keep_fraction(self) -> float:
        return float(self.keep.mean())

    def _apply(self, x):
        return x * self._weights

    _adjoint = _apply
    _gram = _apply

    def measurement_support(self):
        return self.keep


def identity_operator(shape, dtype=REAL) -> MaskOperator:
    return MaskOperator(np.ones(shape, dtype=bool), dtype=dtype)


def random_mask(shape, keep_fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Boolean pixel mask keeping exactly ``round(keep_fraction * n)`` pixels."""
    if not 0.0 <= keep_fraction <= 1.0:
        raise ValueError(f"keep_fraction must be in [0, 1], got {keep_fraction}")
    n = math.prod(shape)
    n_keep = int(round(keep_fraction * n))
    keep = np.zeros(n, dtype=bool)
    keep[rng.choice(n, size=n_keep, replace=False)] = True
    return keep.reshape(shape)


def gaussian_kernel_1d(size: int = 5, sigma: float = 10.0) -> np.ndarray:
    """Sampled, unit-sum Gaussian taps at integer offsets ``-size//2 .. size//2``."""
    if size < 1 or size % 2 == 0:
        raise ValueError(f"kernel size must be odd and positive, got {size}")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    offsets = np.arange(size) - size // 2
    taps = np.exp(-(offsets**2) / (2.0 * sigma**2))
    return taps / taps.sum()


def _pad_indices(n: int, half: int, boundary: str) -> np.ndarray:
    mode = {"circular": "wrap", "reflect": "symmetric"}[boundary]
    return np.pad(np.arange(n), half, mode=mode)


def _conv_axis(x, kernel, idx, axis):
    # out[i] = sum_j k[j] * padded[i + K-1-j]
    K = len(kernel)
    n = x.shape[axis]
    padded = np.take(x, idx, axis=axis)
    padded = np.moveaxis(padded, axis, 0)
    out = np.zeros((n,) + padded.shape[1:], dtype=x.dtype)
    for j, tap in enumerate(kernel):
        s = K - 1 - j
        out += tap * padded[s : s + n]
    return np.moveaxis(out, 0, axis)


def _conv_axis_adjoint(y, kernel, idx, axis):
    K = len(kernel)
    n = y.shape[axis]
    yy = np.moveaxis(y, axis, 0)
    padded = np.zeros((n + K - 1,) + yy.shape[1:], dtype=y.dtype)
    for j, tap in enumerate(kernel):
        s = K - 1 - j
        padded[s : s + n] += tap * yy
    out = np.zeros_like(yy)
    np.add.at(out, idx, padded)
    return np.moveaxis(out, 0, axis)


class BlurOperator(LinearOperator):
    """Separable convolution with the same 1D kernel along both image axes.

    Args:
        shape: image shape ``(H, W)`` or ``(H, W, C)``.
        kernel_1d: odd-length taps summing to one.
        boundary: ``circular`` (default) or ``reflect`` (half-sample symmetric).
    """

    kind = "blur"

    def __init__(self, shape, kernel_1d, boundary: str = "circular", dtype=REAL):
        kernel = np.asarray(kernel_1d, dtype=np.float64).ravel()
        if len(kernel) % 2 == 0:
            raise ValueError("blur kernel length must be odd")
        if not np.isclose(kernel.sum(), 1.0, rtol=0, atol=1e-12):
            raise ValueError(f"blur kernel taps must sum to 1, got {kernel.sum()}")
        if boundary not in ("circular", "reflect"):
            raise ValueError(f"unknown boundary {boundary!r}")
        super().__init__(shape, shape, dtype)
        self.kernel_1d = kernel
        self.boundary = boundary
        half = len(kernel) // 2
        self._idx = [_pad_indices(self.input_shape[a], half, boundary) for a in (0, 1)]

    def _apply(self, x):
        out = _conv_axis(x, self.kernel_1d, self._idx[0], 0)
        return _conv_axis(out, self.kernel_1d, self._idx[1], 1)

    def _adjoint(self, y):
        out = _conv_axis_adjoint(y, self.kernel_1d, self._idx[1], 1)
        return _conv_axis_adjoint(out, self.kernel_1d, self._idx[0], 0)

    def transfer_function(self) -> np.ndarray:
        """2D DFT of the circular point-spread function over the ``(H, W)`` grid."""
        if self.boundary != "circular":
            raise ValueError("transfer function only defined for circular boundary")
        H, W = self.input_shape[:2]
        delta = np.zeros((H, W))
        delta[0, 0] = 1.0
        psf = BlurOperator((H, W), self.kernel_1d, "circular")._apply(delta)
        return np.fft.fft2(psf)


def _cubic(x, a=-0.5):
    x = np.abs(x)
    return np.where(
        x <= 1,
        (a + 2) * x**3 - (a + 3) * x**2 + 1,
        np.where(x < 2, a * x**3 - 5 * a * x**2 + 8 * a * x - 4 * a, 0.0),
    )


def bicubic_matrix(n: int, factor: int) -> np.ndarray:
    """Row-normalized antialiased bicubic decimation matrix of shape ``(n // factor, n)``.

    Follows the usual imresize construction: the Keys kernel is stretched by
    ``factor`` and mirrored at the borders.
    """
    m = n // factor
    scale = 1.0 / factor
    centers = (np.arange(m) + 0.5) / scale - 0.5
    support = 2.0 / scale
    mat = np.zeros((m, n))
    for i, c in enumerate(centers):
        lo = int(math.floor(c - support))
        hi = int(math.ceil(c + support))
        for j in range(lo, hi + 1):
            w = scale * float(_cubic(scale * (c - j)))
            if w == 0.0:
                continue
            jj = j
            if jj < 0:
                jj = -jj - 1
            if jj >= n:
                jj = 2 * n - jj - 1
            mat[i, jj] += w
        mat[i] /= mat[i].sum()
    return mat


class DownsampleOperator(LinearOperator):
    """Downsample both image axes by an integer factor.

    ``method="block_average"`` averages ``factor x factor`` blocks;
    ``method="bicubic"`` applies a separable dense bicubic decimation matrix.
    """

    kind = "downsample"

    def __init__(self, shape, factor: int, method: str = "block_average", dtype=REAL):
        shape = tuple(int(s) for s in shape)
        factor = int(factor)
        if factor < 1:
            raise ValueError("factor must be a positive integer")
        H, W = shape[:2]
        if H % factor or W % factor:
            raise ShapeError(f"image dims {(H, W)} not divisible by factor {factor}")
        if method not in ("block_average", "bicubic"):
            raise ValueError(f"unknown downsampling method {method!r}")
        out_shape = (H // factor, W // factor) + shape[2:]
        super().__init__(shape, out_shape, dtype)
        self.factor = factor
        self.method = method
        if method == "bicubic":
            self._rows = bicubic_matrix(H, factor)
            self._cols = bicubic_matrix(W, factor)

    def _apply(self, x):
        f = self.factor
        if self.method == "bicubic":
            return np.einsum("ai,ij...,bj->ab...", self._rows, x, self._cols)
        H, W = self.input_shape[:2]
        blocks = x.reshape((H // f, f, W // f, f) + x.shape[2:])
        return blocks.mean(axis=(1, 3))

    def _adjoint(self, y):
        f = self.factor
        if self.method == "bicubic":
            return np.einsum("ai,ab...,bj->ij...", self._rows, y, self._cols)
        up = np.repeat(np.repeat(y, f, axis=0), f, axis=1)
        return up / (f * f)


def fft2c(x: np.ndarray) -> np.ndarray:
    """Centered unitary 2D FFT over the last two axes."""
    axes = (-2, -1)
    return np.fft.fftshift(np.fft.fft2(np.fft.ifftshift(x, axes=axes), norm="ortho"), axes=axes)


def ifft2c(k: np.ndarray) -> np.ndarray:
    axes = (-2, -1)
    return np.fft.fftshift(np.fft.ifft2(np.fft.ifftshift(k, axes=axes), norm="ortho"), axes=axes)


def acs_slice(width: int, acs_lines: int) -> slice:
    start = width // 2 - acs_lines // 2
    return slice(start, start + acs_lines)


def random_line_mask(width: int, acceleration: int, acs_lines: int, rng: np.random.Generator) -> np.ndarray:
    """1D random k-space line selection with a fully sampled centre.

    Keeps ``width // acceleration`` lines in total: the ``acs_lines`` central
    lines plus lines drawn uniformly without replacement from the rest.
    """
    if acceleration < 1:
        raise ValueError("acceleration must be >= 1")
    if not 0 <= acs_lines <= width:
        raise ValueError("acs_lines out of range")
    total = max(width // acceleration, acs_lines)
    mask = np.zeros(width, dtype=bool)
    mask[acs_slice(width, acs_lines)] = True
    others = np.flatnonzero(~mask)
    extra = total - acs_lines
    if extra > 0:
        mask[rng.choice(others, size=extra, replace=False)] = True
    return mask


def synthetic_coil_maps(shape, n_coils: int) -> np.ndarray:
    """Smooth complex sensitivities normalized so that ``sum_c |S_c|^2 == 1``.

    Coil ``c`` is a broad Gaussian centred on a circle around the image centre
    with a gentle linear phase ramp.
    """
    H, W = shape
    yy, xx = np.meshgrid(np.arange(H) - H / 2, np.arange(W) - W / 2, indexing="ij")
    radius = 0.5 * min(H, W)
    width = 0.6 * min(H, W)
    maps = np.empty((n_coils, H, W), dtype=COMPLEX)
    for c in range(n_coils):
        ang = 2 * np.pi * c / n_coils
        cy, cx = radius * np.sin(ang), radius * np.cos(ang)
        mag = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width**2))
        phase = np.exp(1j * np.pi * (np.cos(ang) * xx / W + np.sin(ang) * yy / H))
        maps[c] = mag * phase
    rss = np.sqrt(np.sum(np.abs(maps) ** 2, axis=0))
    return maps / rss


class FourierSubsampleOperator(LinearOperator):
    """Cartesian undersampled (optionally multi-coil) Fourier sampling.

    ``apply``: multiply by each coil map, centered unitary FFT, zero the
    unsampled phase-encode columns. Output is ``(H, W)`` for a single uniform
    coil, ``(n_coils, H, W)`` otherwise.
    """

    kind = "fourier_subsample"

    def __init__(
        self,
        shape,
        sample_mask,
        coil_sensitivities: Optional[np.ndarray] = None,
        acs_lines: int = 0,
        acceleration: int = 1,
    ):
        H, W = (int(s) for s in shape)
        sample_mask = np.asarray(sample_mask, dtype=bool).ravel()
        if sample_mask.shape != (W,):
            raise ShapeError(f"sample_mask must have length {W}, got {sample_mask.shape}")
        if acs_lines and not sample_mask[acs_slice(W, acs_lines)].all():
            raise ValueError("all ACS lines must be sampled")
        if coil_sensitivities is not None:
            maps = as_tensor(coil_sensitivities, COMPLEX)
            if maps.ndim != 3 or maps.shape[1:] != (H, W):
                raise ShapeError(f"coil maps must be (C, {H}, {W}), got {maps.shape}")
            rss = np.sum(np.abs(maps) ** 2, axis=0)
            if np.max(np.abs(rss - 1.0)) > 1e-6:
                raise ValueError("coil sensitivities must satisfy sum_c |S_c|^2 = 1")
            out_shape = maps.shape
        else:
            maps = None
            out_shape = (H, W)
        super().__init__((H, W), out_shape, COMPLEX, COMPLEX)
        self.sample_mask = sample_mask
        self.coil_sensitivities = maps
        self.acs_lines = int(acs_lines)
        self.acceleration = int(acceleration)
        self._kmask = np.broadcast_to(sample_mask.astype(np.float64), (H, W)).copy()

    @property
    def n_coils(self) -> int:
        return 1 if self.coil_sensitivities is None else self.coil_sensitivities.shape[0]

    def _apply(self, x):
        if self.coil_sensitivities is None:
            return fft2c(x) * self._kmask
        return fft2c(self.coil_sensitivities * x[None]) * self._kmask[None]

    def _adjoint(self, y):
        if self.coil_sensitivities is None:
            return ifft2c(y * self._kmask)
        img = ifft2c(y * self._kmask[None])
        return np.sum(np.conj(self.coil_sensitivities) * img, axis=0)

    def _gram(self, x):
        if self.coil_sensitivities is None:
            return ifft2c(fft2c(x) * self._kmask)
        return self._adjoint(self._apply(x))

    def measurement_support(self):
        return np.broadcast_to(self.sample_mask, self.output_shape).copy()


class ComposedOperator(LinearOperator):
    """``outer(inner(x))``, e.g. blur followed by a mask."""

    kind = "composite"

    def __init__(self, outer: LinearOperator, inner: LinearOperator):
        if outer.input_shape != inner.output_shape or outer.dtype != inner.output_dtype:
            raise ShapeError("composed operators do not chain")
        super().__init__(inner.input_shape, outer.output_shape, inner.dtype, outer.output_dtype)
        self.outer = outer
        self.inner = inner

    def _apply(self, x):
        return self.outer._apply(self.inner._apply(x))

    def _adjoint(self, y):
        return self.inner._adjoint(self.outer._adjoint(y))

    def measurement_support(self):
        return self.outer.measurement_support()


class DenseOperator(LinearOperator):
    """Explicit matrix acting on the flattened input."""

    kind = "dense"

    def __init__(self, matrix, input_shape, output_shape, dtype=None):
        matrix = np.asarray(matrix)
        if dtype is None:
            dtype = COMPLEX if np.iscomplexobj(matrix) else REAL
        super().__init__(input_shape, output_shape, dtype)
        if matrix.shape != (math.prod(self.output_shape), math.prod(self.input_shape)):
            raise ShapeError(f"matrix shape {matrix.shape} inconsistent with operator shapes")
        self.matrix = matrix.astype(self.dtype)

    def _apply(self, x):
        return (self.matrix @ x.ravel()).reshape(self.output_shape)

    def _adjoint(self, y):
        return (self.matrix.conj().T @ y.ravel()).reshape(self.input_shape)


def apply(op: LinearOperator, x: np.ndarray) -> np.ndarray:
    return op.apply(x)


def adjoint(op: LinearOperator, y: np.ndarray) -> np.ndarray:
    return op.adjoint(y)


def gram_apply(op: LinearOperator, x: np.ndarray) -> np.ndarray:
    return op.gram(x)


def to_dense(op: LinearOperator) -> np.ndarray:
    """Explicit ``m x n`` matrix of ``op`` built column by column from basis vectors."""
    n = math.prod(op.input_shape)
    if n > MAX_DENSE_SIZE:
        raise ValueError(f"to_dense refuses inputs larger than {MAX_DENSE_SIZE} entries (got {n})")
    m = math.prod(op.output_shape)
    out_dtype = np.result_type(op.dtype, op.output_dtype)
    mat = np.zeros((m, n), dtype=out_dtype)
    e = np.zeros(n, dtype=op.dtype)
    for j in range(n):
        e[j] = 1
        mat[:, j] = op.apply(e.reshape(op.input_shape)).ravel()
        e[j] = 0
    return mat


def synthesize_measurement(op: LinearOperator, x_true: np.ndarray, sigma_y: float, rng: np.random.Generator) -> np.ndarray:
    """``A x_true + sigma_y * eps`` with noise only on entries the operator measures.

    Zero-filled entries (dropped pixels, unsampled k-space lines) stay zero.
    """
    if sigma_y < 0:
        raise ValueError(f"sigma_y must be non-negative, got {sigma_y}")
    y = op.apply(x_true)
    if sigma_y == 0:
        return y
    noise = sigma_y * standard_normal(op.output_shape, op.output_dtype, rng)
    support = op.measurement_support()
    if support is not None:
        noise = noise * support
    return y + noise


def is_single_uniform_coil(op: LinearOperator) -> bool:
    return isinstance(op, FourierSubsampleOperator) and op.coil_sensitivities is None

