"""Plug-and-play ADMM with noise injection and Nesterov momentum.

Iterations are counted down, ``n = N-1, ..., 0``. Per-iteration parameters
use the index ``n + 1``: ``rho_{n+1}``, ``beta_{n+1}``, ``t_{n+1}`` and the
injected noise std ``s_{n+1}``. One iteration:

1. ``z_n  = (A^H A + rho I)^{-1} (A^H y + rho (xhat_{n+1} - uhat_{n+1}))``
2. ``nu_n ~ N(z_n + uhat_{n+1}, s^2 I)``
3. ``x_n  = D(nu_n, t_{n+1})``
4. ``u_n  = uhat_{n+1} + z_n - x_n``
5. ``xhat_n = x_n + beta (x_n - x_{n+1})``, ``uhat_n = u_n + beta (u_n - u_{n+1})``

All state starts at zero. The final ``x_0`` is the reconstruction.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import metrics
from .denoisers import Denoiser
from .linsolve import CgConfig, build_zupdate_rhs, cg_solve, direct_solve_diagonalizable
from .operators import LinearOperator
from .tensor import gaussian_sample, make_rng

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    """A non-finite value appeared in an iterate."""


@dataclass
class Schedule:
    """Per-iteration parameters.

    ``time_points`` holds ``t_0 .. t_N``; ``rho``, ``beta`` and
    ``injected_noise_std`` hold the values for ``n = 1 .. N`` (so ``rho[n-1]``
    is ``rho_n``). The injected noise std defaults to ``t_n``.
    """

    n_steps: int
    time_points: Sequence[float]
    rho: Sequence[float]
    beta: Sequence[float]
    injected_noise_std: Optional[Sequence[float]] = None

    def __post_init__(self):
        N = int(self.n_steps)
        if N < 1:
            raise ValueError("n_steps must be >= 1")
        self.n_steps = N
        self.time_points = np.asarray(self.time_points, dtype=np.float64)
        self.rho = np.asarray(self.rho, dtype=np.float64)
        self.beta = np.asarray(self.beta, dtype=np.float64)
        if self.injected_noise_std is None:
            self.injected_noise_std = self.time_points[1:].copy()
        self.injected_noise_std = np.asarray(self.injected_noise_std, dtype=np.float64)
        if self.time_points.shape != (N + 1,):
            raise ValueError(f"need {N + 1} time points, got {self.time_points.shape[0]}")
        for name in ("rho", "beta", "injected_noise_std"):
            if getattr(self, name).shape != (N,):
                raise ValueError(f"{name} needs {N} entries, got {getattr(self, name).shape[0]}")
        if np.any(self.time_points < 0):
            raise ValueError("time points must be non-negative")
        if not np.all(self.rho > 0):
            raise ValueError("all penalty parameters rho_n must be > 0")
        if np.any(self.beta < 0):
            raise ValueError("momentum coefficients must be >= 0")
        if np.any(self.injected_noise_std < 0):
            raise ValueError("injected noise stds must be >= 0")

    def t(self, n: int) -> float:
        return float(self.time_points[n])

    def rho_at(self, n: int) -> float:
        return float(self.rho[n - 1])

    def beta_at(self, n: int) -> float:
        return float(self.beta[n - 1])

    def noise_at(self, n: int) -> float:
        return float(self.injected_noise_std[n - 1])

    def noise_in_iteration_order(self) -> np.ndarray:
        """Injected stds in the order they are used: ``s_N, s_{N-1}, ..., s_1``."""
        return self.injected_noise_std[::-1].copy()

    @classmethod
    def geometric(cls, n_steps, t_max, decay, rho, beta, noise_max=None, noise_decay=None):
        """``t_n = t_max * decay**(N - n)``; constant ``rho`` and ``beta``.

        Optional injected noise ``s_n = noise_max * noise_decay**(N - n)``.
        """
        N = int(n_steps)
        n = np.arange(N + 1)
        t = t_max * decay ** (N - n)
        s = None
        if noise_max is not None:
            s = noise_max * (decay if noise_decay is None else noise_decay) ** (N - n[1:])
        return cls(N, t, np.full(N, float(rho)), np.full(N, float(beta)), s)


@dataclass
class RunConfig:
    operator: LinearOperator
    denoiser: Denoiser
    schedule: Schedule
    cg: CgConfig = field(default_factory=CgConfig)
    seed: int = 0
    enable_noise_injection: bool = True
    enable_momentum: bool = True
    divergence_guard: bool = False
    linear_solver: str = "cg"
    history: str = "full"
    record_clean_branch: bool = False

    def __post_init__(self):
        if self.linear_solver not in ("cg", "direct"):
            raise ValueError(f"linear_solver must be 'cg' or 'direct', got {self.linear_solver!r}")
        if self.history not in ("full", "scalars"):
            raise ValueError(f"history must be 'full' or 'scalars', got {self.history!r}")


@dataclass
class IterationRecord:
    n: int
    dz: float
    dx: float
    du: float
    delta: float
    eta_norm: float
    noise_std: float
    beta: float
    objective: float
    cg_iterations: int
    cg_converged: bool
    dx_clean: Optional[float] = None
    du_clean: Optional[float] = None


@dataclass
class SolverState:
    x: np.ndarray
    z: np.ndarray
    u: np.ndarray
    x_hat: np.ndarray
    u_hat: np.ndarray
    x_prev: np.ndarray
    u_prev: np.ndarray
    n: int
    history: List[IterationRecord] = field(default_factory=list)
    iterates: Optional[List[dict]] = None
    denoiser_calls: int = 0
    linear_solves: int = 0
    signal_size: int = 0
    fingerprint: tuple = ()

    @property
    def nfe(self) -> int:
        return self.denoiser_calls


def _finite(arr, what, n):
    if not np.all(np.isfinite(arr)):
        raise DivergenceError(f"non-finite value in {what} at iteration n={n}")


def _fingerprint(cfg: RunConfig) -> tuple:
    s = cfg.schedule
    return (
        id(cfg.operator),
        id(cfg.denoiser),
        s.n_steps,
        tuple(s.time_points),
        tuple(s.rho),
        tuple(s.beta),
        cfg.enable_momentum,
        cfg.linear_solver,
    )


def run(cfg: RunConfig, y: np.ndarray):
    """Run the solver on measurement ``y``; returns ``(x_0, state)``."""
    op, D, sched = cfg.operator, cfg.denoiser, cfg.schedule
    if y.shape != op.output_shape or y.dtype != op.output_dtype:
        raise ValueError(f"measurement must be {op.output_shape}/{op.output_dtype}, got {y.shape}/{y.dtype}")
    rng = make_rng(cfg.seed)
    zero = np.zeros(op.input_shape, dtype=op.dtype)
    x, u, z = zero.copy(), zero.copy(), zero.copy()
    x_hat, u_hat = zero.copy(), zero.copy()
    P = zero.size
    sqrtP = math.sqrt(P)
    full = cfg.history == "full"
    state = SolverState(
        x, z, u, x_hat, u_hat, x.copy(), u.copy(), sched.n_steps,
        iterates=[] if full else None, signal_size=P, fingerprint=_fingerprint(cfg),
    )
    prev_delta = None
    zero_momentum_next = False

    for n in range(sched.n_steps - 1, -1, -1):
        rho = sched.rho_at(n + 1)
        t = sched.t(n + 1)
        s = sched.noise_at(n + 1) if cfg.enable_noise_injection else 0.0
        beta = sched.beta_at(n + 1) if cfg.enable_momentum else 0.0
        if zero_momentum_next:
            beta = 0.0
            zero_momentum_next = False

        rhs = build_zupdate_rhs(op, y, rho, x_hat, u_hat)
        if cfg.linear_solver == "direct":
            z_new = direct_solve_diagonalizable(op, rho, rhs)
            cg_iters, cg_ok = 0, True
        else:
            z_new, rep = cg_solve(op, rho, rhs, z, cfg.cg)
            cg_iters, cg_ok = rep.iterations_used, rep.converged
        state.linear_solves += 1
        _finite(z_new, "data-fidelity update (z)", n)

        mean = z_new + u_hat
        nu = gaussian_sample(mean.shape, mean, s, rng)
        eta = nu - mean
        x_new = D(nu, t)
        state.denoiser_calls += 1
        _finite(x_new, "denoiser output (x)", n)

        u_hat_in = u_hat
        u_new = u_hat_in + z_new - x_new
        _finite(u_new, "dual update (u)", n)
        x_hat = x_new + beta * (x_new - x)
        u_hat = u_new + beta * (u_new - u)
        _finite(x_hat, "primal momentum (xhat)", n)
        _finite(u_hat, "dual momentum (uhat)", n)

        dz = float(np.linalg.norm(z_new - z))
        dx = float(np.linalg.norm(x_new - x))
        du = float(np.linalg.norm(u_new - u))
        delta = (dz + dx + du) / sqrtP
        rec = IterationRecord(
            n=n, dz=dz, dx=dx, du=du, delta=delta,
            eta_norm=float(np.linalg.norm(eta)), noise_std=s, beta=beta,
            objective=0.5 * float(np.linalg.norm(y - op.apply(x_new)) ** 2),
            cg_iterations=cg_iters, cg_converged=cg_ok,
        )
        if cfg.record_clean_branch:
            # diagnostic evaluation without the injected noise; not counted as an NFE
            x_clean = x_new if s == 0 else D(mean, t)
            u_clean = u_hat_in + z_new - x_clean
            rec.dx_clean = float(np.linalg.norm(x_clean - x))
            rec.du_clean = float(np.linalg.norm(u_clean - u))
        state.history.append(rec)
        if full:
            state.iterates.append({"n": n, "z": z_new, "x": x_new, "u": u_new, "nu": nu, "eta": eta})

        if cfg.divergence_guard and prev_delta is not None and delta > 10.0 * prev_delta:
            log.info("divergence guard: momentum zeroed after n=%d (delta %.3g > 10 x %.3g)", n, delta, prev_delta)
            zero_momentum_next = True
        prev_delta = delta

        state.x_prev, state.u_prev = x, u
        x, u, z = x_new, u_new, z_new
        state.x, state.u, state.z = x, u, z
        state.x_hat, state.u_hat = x_hat, u_hat
        state.n = n

    return x, state


def residual_trace(state: SolverState) -> np.ndarray:
    """Combined residuals ``Delta_k = (|dz| + |dx| + |du|) / sqrt(P)`` in iteration order."""
    if not state.history:
        raise ValueError("run has no recorded history")
    return np.array([r.delta for r in state.history])


def recompute_residuals(state: SolverState) -> np.ndarray:
    """Recompute ``Delta_k`` from stored iterates (requires full history)."""
    if not state.iterates:
        raise ValueError("run was not recorded with full history")
    prev = {k: np.zeros_like(state.iterates[0]["x"]) for k in ("z", "x", "u")}
    out = []
    for it in state.iterates:
        total = sum(float(np.linalg.norm(it[k] - prev[k])) for k in ("z", "x", "u"))
        out.append(total / math.sqrt(state.signal_size))
        prev = {k: it[k] for k in ("z", "x", "u")}
    return np.array(out)


def is_diminishing(stds: Sequence[float]) -> bool:
    """Non-increasing in iteration order, and either all zero or actually decaying."""
    s = np.asarray(stds, dtype=np.float64)
    if s.size == 0 or not np.any(s):
        return True
    return bool(np.all(np.diff(s) <= 0) and s[-1] < s[0])


@dataclass
class BoundReport:
    lhs: float
    rhs: float
    satisfied: bool
    eta_sum: float
    eta_sum_finite: bool
    diminishing: bool
    lipschitz: float
    strict_lhs: Optional[float] = None
    strict_satisfied: Optional[bool] = None
    per_step_satisfied: Optional[bool] = None


def theorem1_check(
    run_with_noise: SolverState,
    run_without_noise: SolverState,
    l_hat: float,
    lipschitz_inflation: float = 1.0,
    tolerance: float = 1e-12,
) -> BoundReport:
    """Check ``sum Delta^eta - sum Delta^0 <= (2 L / sqrt(P)) sum ||eta_k||``.

    Paired mode compares the two independent runs. If the noisy run recorded
    its noise-free branch (``record_clean_branch``), strict mode also checks
    the per-step bounds ``dx^eta <= L ||eta|| + dx^0`` and
    ``du^eta <= L ||eta|| + du^0`` along the noisy trajectory, where the
    noise-free quantities come from evaluating the denoiser at the same
    point without noise.
    """
    a, b = run_with_noise, run_without_noise
    if a.fingerprint != b.fingerprint or a.signal_size != b.signal_size:
        raise ValueError("theorem check needs two runs of the same configuration (only injection may differ)")
    if len(a.history) != len(b.history):
        raise ValueError("runs have different lengths")
    if any(r.eta_norm != 0 for r in b.history):
        raise ValueError("the reference run injected noise")
    L = l_hat * lipschitz_inflation
    sqrtP = math.sqrt(a.signal_size)
    eta = np.array([r.eta_norm for r in a.history])
    eta_sum = float(eta.sum())
    lhs = float(sum(r.delta for r in a.history) - sum(r.delta for r in b.history))
    rhs = 2.0 * L / sqrtP * eta_sum
    report = BoundReport(
        lhs=lhs,
        rhs=rhs,
        satisfied=bool(lhs <= rhs + tolerance),
        eta_sum=eta_sum,
        eta_sum_finite=bool(np.isfinite(eta_sum)),
        diminishing=is_diminishing([r.noise_std for r in a.history]),
        lipschitz=L,
    )
    if all(r.dx_clean is not None for r in a.history):
        clean = sum(r.dz + r.dx_clean + r.du_clean for r in a.history) / sqrtP
        report.strict_lhs = float(sum(r.delta for r in a.history) - clean)
        report.strict_satisfied = bool(report.strict_lhs <= rhs + tolerance)
        report.per_step_satisfied = bool(all(
            r.dx <= L * r.eta_norm + r.dx_clean + tolerance and r.du <= L * r.eta_norm + r.du_clean + tolerance
            for r in a.history
        ))
    return report


VARIANTS = ((False, False), (True, False), (False, True), (True, True))


@dataclass
class AblationRow:
    noise_injection: bool
    momentum: bool
    psnr: float
    ssim: float
    nfe: int
    linear_solves: int
    output: np.ndarray = field(repr=False, default=None)
    first_z: np.ndarray = field(repr=False, default=None)


def ablation_grid(base_cfg: RunConfig, y: np.ndarray, x_true: np.ndarray, peak=None, workers: int = 1) -> List[AblationRow]:
    """Run the (noise injection x momentum) grid in the order
    (off, off), (on, off), (off, on), (on, on)."""

    def one(variant):
        noise, mom = variant
        cfg = dataclasses.replace(base_cfg, enable_noise_injection=noise, enable_momentum=mom)
        x, st = run(cfg, y)
        rep = metrics.evaluate(x, x_true, peak)
        first_z = st.iterates[0]["z"] if st.iterates else None
        return AblationRow(
            noise, mom, rep.psnr_db, rep.ssim,
            st.denoiser_calls, st.linear_solves, x, first_z,
        )

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(one, VARIANTS))
    return [one(v) for v in VARIANTS]
