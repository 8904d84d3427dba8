"""Solvers for the regularized normal equations ``(A^H A + rho I) z = rhs``."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

from .operators import BlurOperator, FourierSubsampleOperator, LinearOperator, MaskOperator, fft2c, ifft2c
from .tensor import ShapeError


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared in an iterate; usually an operator bug."""


@dataclass(frozen=True)
class CgConfig:
    max_iters: int = 30
    rel_tol: float = 1e-8
    abs_tol: float = 1e-12

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.rel_tol <= 0 or self.abs_tol <= 0:
            raise ValueError("CG tolerances must be positive")


@dataclass
class CgReport:
    iterations_used: int
    final_residual_norm: float
    converged: bool
    residual_history: List[float] = field(default_factory=list)


def _check_rho(rho):
    if not rho > 0:
        raise ValueError(f"rho must be positive, got {rho}")


def _check_signal(op: LinearOperator, v: np.ndarray, name: str):
    if v.shape != op.input_shape or v.dtype != op.dtype:
        raise ShapeError(f"{name}: expected {op.input_shape}/{op.dtype}, got {v.shape}/{v.dtype}")


def cg_solve(
    op: LinearOperator, rho: float, rhs: np.ndarray, x0: np.ndarray, cfg: CgConfig = CgConfig()
) -> Tuple[np.ndarray, CgReport]:
    """Conjugate gradient on ``(A^H A + rho I) z = rhs``, warm-started at ``x0``.

    The system is Hermitian positive definite for any ``rho > 0``, so plain CG
    with the conjugating inner product applies to real and complex operators
    alike. Stops once ``||r|| <= max(rel_tol * ||rhs||, abs_tol)``.

    Returns:
        The approximate solution and a :class:`CgReport`. ``converged`` is
        False when ``max_iters`` ran out first.
    """
    _check_rho(rho)
    _check_signal(op, rhs, "rhs")
    _check_signal(op, x0, "x0")

    def normal(v):
        return op.gram(v) + rho * v

    target = max(cfg.rel_tol * float(np.linalg.norm(rhs)), cfg.abs_tol)
    z = x0.copy()
    r = rhs - normal(z)
    p = r.copy()
    rr = float(np.vdot(r, r).real)
    if not np.isfinite(rr):
        raise NonFiniteError("non-finite initial CG residual")
    res = np.sqrt(rr)
    history = [res]
    k = 0
    while res > target and k < cfg.max_iters:
        q = normal(p)
        pq = float(np.vdot(p, q).real)
        if not np.isfinite(pq) or pq <= 0:
            raise NonFiniteError(f"CG breakdown at iteration {k}: <p, Ap> = {pq}")
        alpha = rr / pq
        z += alpha * p
        r -= alpha * q
        rr_new = float(np.vdot(r, r).real)
        if not np.isfinite(rr_new):
            raise NonFiniteError(f"non-finite CG residual at iteration {k}")
        p = r + (rr_new / rr) * p
        rr = rr_new
        res = np.sqrt(rr)
        history.append(res)
        k += 1
    if not np.all(np.isfinite(z)):
        raise NonFiniteError("non-finite CG solution")
    return z, CgReport(k, float(res), bool(res <= target), history)


def direct_solve_diagonalizable(op: LinearOperator, rho: float, rhs: np.ndarray) -> np.ndarray:
    """Exact solve for operators whose Gram matrix is diagonal in a known basis.

    Supported: masks (pixel domain), circular blurs (2D DFT domain) and
    single-coil Fourier subsampling (k-space).
    """
    _check_rho(rho)
    _check_signal(op, rhs, "rhs")
    if isinstance(op, MaskOperator):
        return rhs / (op.keep.astype(np.float64) + rho)
    if isinstance(op, BlurOperator) and op.boundary == "circular":
        khat = op.transfer_function()
        denom = np.abs(khat) ** 2 + rho
        if rhs.ndim == 3:
            denom = denom[:, :, None]
        zhat = np.fft.fft2(rhs, axes=(0, 1)) / denom
        z = np.fft.ifft2(zhat, axes=(0, 1))
        return z.real.copy() if rhs.dtype == np.float64 else z
    if isinstance(op, FourierSubsampleOperator) and op.coil_sensitivities is None:
        return ifft2c(fft2c(rhs) / (op._kmask + rho))
    raise TypeError(f"no diagonalizing solve for operator kind {op.kind!r}")


def build_zupdate_rhs(op: LinearOperator, y: np.ndarray, rho: float, xhat: np.ndarray, uhat: np.ndarray) -> np.ndarray:
    """``A^H y + rho (xhat - uhat)``."""
    _check_rho(rho)
    _check_signal(op, xhat, "xhat")
    _check_signal(op, uhat, "uhat")
    return op.adjoint(y) + rho * (xhat - uhat)
