import numpy as np
import pytest

from pnpcm.operators import (
    BlurOperator,
    DownsampleOperator,
    FourierSubsampleOperator,
    MaskOperator,
    gaussian_kernel_1d,
    random_line_mask,
    random_mask,
    synthetic_coil_maps,
)
from pnpcm.tensor import standard_normal

ACCEPTANCE_LINES = []


def operator_zoo(n: int, seed: int = 0):
    """One instance of every operator kind on an ``n x n`` grid."""
    rng = np.random.default_rng(seed)
    acs = max(2, n // 8)
    lines = random_line_mask(n, 4, acs, rng)
    return {
        "mask": MaskOperator(random_mask((n, n), 0.3, rng)),
        "blur_circular": BlurOperator((n, n), gaussian_kernel_1d(5, 10.0), "circular"),
        "blur_reflect": BlurOperator((n, n), gaussian_kernel_1d(5, 10.0), "reflect"),
        "downsample_block": DownsampleOperator((n, n), 4, "block_average"),
        "downsample_bicubic": DownsampleOperator((n, n), 4, "bicubic"),
        "fourier_1coil": FourierSubsampleOperator((n, n), lines, acs_lines=acs, acceleration=4),
        "fourier_3coil": FourierSubsampleOperator(
            (n, n), lines, synthetic_coil_maps((n, n), 3), acs_lines=acs, acceleration=4
        ),
    }


DIAGONALIZABLE = ("mask", "blur_circular", "fourier_1coil")


def rand_in(op, rng):
    return standard_normal(op.input_shape, op.dtype, rng)


def rand_out(op, rng):
    return standard_normal(op.output_shape, op.output_dtype, rng)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
