import dataclasses
import math

import numpy as np
import pytest

from pnpcm.denoisers import make_denoiser
from pnpcm.engine import (
    DivergenceError,
    RunConfig,
    Schedule,
    ablation_grid,
    is_diminishing,
    recompute_residuals,
    residual_trace,
    run,
    theorem1_check,
)
from pnpcm.operators import MaskOperator, identity_operator, random_mask, synthesize_measurement
from pnpcm.phantoms import make_phantom


def small_problem(seed=0, n=16, N=4, beta=0.5, noise=0.1, denoiser="tv_prox"):
    g = np.random.default_rng(seed)
    op = MaskOperator(random_mask((n, n), 0.5, g))
    x_true = make_phantom(seed, n)
    y = synthesize_measurement(op, x_true, 0.02, g)
    sched = Schedule.geometric(N, 1.0, 0.7, rho=1.0, beta=beta, noise_max=noise)
    cfg = RunConfig(op, make_denoiser(denoiser, strength_scale=0.1), sched, seed=seed)
    return cfg, y, x_true


def test_single_step_by_hand():
    y = np.array([[2.0, -4.0], [6.0, 0.0]])
    op = identity_operator((2, 2))
    sched = Schedule(1, [0.0, 0.5], [1.0], [0.0], [0.0])
    x, st = run(RunConfig(op, make_denoiser("identity"), sched), y)
    # z = (y + 0) / (1 + 1); x = z; u = 0
    assert np.allclose(st.z, y / 2)
    assert np.allclose(x, y / 2)
    assert np.allclose(st.u, 0)
    rec = st.history[0]
    assert rec.n == 0
    assert rec.delta == pytest.approx(2 * np.linalg.norm(y / 2) / 2.0)


def test_counts_and_history(rng):
    cfg, y, _ = small_problem(N=5)
    x, st = run(cfg, y)
    assert st.denoiser_calls == st.nfe == 5
    assert st.linear_solves == 5
    assert [r.n for r in st.history] == [4, 3, 2, 1, 0]
    assert st.n == 0 and np.array_equal(x, st.x)
    assert np.allclose(residual_trace(st), recompute_residuals(st))


def test_scalar_history_skips_iterates():
    cfg, y, _ = small_problem()
    _, st = run(dataclasses.replace(cfg, history="scalars"), y)
    assert st.iterates is None
    assert len(st.history) == 4
    with pytest.raises(ValueError):
        recompute_residuals(st)


def test_same_seed_same_output():
    cfg, y, _ = small_problem()
    a, _ = run(cfg, y)
    b, _ = run(cfg, y)
    c, _ = run(dataclasses.replace(cfg, seed=cfg.seed + 1), y)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_injected_noise_statistics():
    cfg, y, _ = small_problem(noise=0.3, N=3)
    _, st = run(cfg, y)
    for it, rec in zip(st.iterates, st.history):
        assert np.std(it["eta"]) == pytest.approx(rec.noise_std, rel=0.25)
    first = st.iterates[0]
    # uhat starts at zero, so the first denoiser input is z plus noise
    assert np.allclose(first["nu"] - first["eta"], first["z"])
    assert [r.noise_std for r in st.history] == list(cfg.schedule.noise_in_iteration_order())


def test_disabled_features_zero_noise_and_beta():
    cfg, y, _ = small_problem()
    _, st = run(dataclasses.replace(cfg, enable_noise_injection=False, enable_momentum=False), y)
    assert all(r.eta_norm == 0 and r.noise_std == 0 and r.beta == 0 for r in st.history)


def test_direct_and_cg_agree():
    cfg, y, _ = small_problem()
    a, _ = run(cfg, y)
    b, _ = run(dataclasses.replace(cfg, linear_solver="direct"), y)
    assert np.allclose(a, b, atol=1e-9)


def test_bad_measurement_and_config():
    cfg, y, _ = small_problem()
    with pytest.raises(ValueError):
        run(cfg, y[:-1])
    with pytest.raises(ValueError):
        dataclasses.replace(cfg, linear_solver="lu")
    with pytest.raises(ValueError):
        Schedule(2, [0, 1], [1, 1], [0, 0])
    with pytest.raises(ValueError):
        Schedule(1, [0, 1], [0.0], [0.0])
    with pytest.raises(ValueError):
        Schedule(1, [0, 1], [1.0], [-0.1])


def test_schedule_indexing():
    s = Schedule.geometric(3, 2.0, 0.5, rho=1.5, beta=0.2, noise_max=0.1, noise_decay=0.9)
    assert s.t(3) == 2.0 and s.t(0) == pytest.approx(0.25)
    assert s.noise_at(3) == pytest.approx(0.1)
    assert s.noise_at(1) == pytest.approx(0.1 * 0.81)
    assert s.rho_at(2) == 1.5 and s.beta_at(1) == 0.2
    default = Schedule(2, [0, 1, 2], [1, 1], [0, 0])
    assert np.array_equal(default.injected_noise_std, [1, 2])


class Exploding:
    kind = "exploding"

    def __init__(self, at):
        self.at = at
        self.calls = 0

    def __call__(self, v, t):
        self.calls += 1
        return v * (np.inf if self.calls == self.at else 1.0)


def test_nonfinite_iterate_raises_divergence():
    cfg, y, _ = small_problem()
    with pytest.raises(DivergenceError, match="n=2"):
        run(dataclasses.replace(cfg, denoiser=Exploding(2)), y)


class Amplifier:
    """Identity except a large kick on one call."""

    def __init__(self, at):
        self.at = at
        self.calls = 0

    def __call__(self, v, t):
        self.calls += 1
        return v * 50.0 if self.calls == self.at else v.copy()


def test_divergence_guard_zeros_next_beta():
    cfg, y, _ = small_problem(N=5, beta=0.5, noise=0.0)
    cfg = dataclasses.replace(cfg, denoiser=Amplifier(3), divergence_guard=True)
    _, st = run(cfg, y)
    betas = [r.beta for r in st.history]
    assert betas[3] == 0.0
    assert betas[0] == betas[1] == betas[2] == 0.5
    _, st_off = run(dataclasses.replace(cfg, denoiser=Amplifier(3), divergence_guard=False), y)
    assert all(r.beta == 0.5 for r in st_off.history)


def test_is_diminishing():
    assert is_diminishing([0.5, 0.3, 0.1])
    assert is_diminishing([0, 0, 0])
    assert not is_diminishing([0.3, 0.3, 0.3])
    assert not is_diminishing([0.1, 0.2])


def test_theorem_check_strict_and_paired():
    cfg, y, _ = small_problem(denoiser="identity", beta=0.0, noise=0.2, N=6)
    noisy = dataclasses.replace(cfg, record_clean_branch=True)
    clean = dataclasses.replace(cfg, enable_noise_injection=False)
    _, a = run(noisy, y)
    _, b = run(clean, y)
    rep = theorem1_check(a, b, l_hat=1.0, lipschitz_inflation=1.1)
    assert rep.lipschitz == pytest.approx(1.1)
    assert rep.eta_sum == pytest.approx(sum(r.eta_norm for r in a.history))
    assert rep.rhs == pytest.approx(2 * 1.1 * rep.eta_sum / math.sqrt(a.signal_size))
    assert rep.strict_satisfied and rep.per_step_satisfied
    assert rep.eta_sum_finite and rep.diminishing
    # the clean branch costs no extra NFE
    assert a.denoiser_calls == 6


def test_theorem_check_refuses_mismatched_runs():
    cfg, y, _ = small_problem()
    _, a = run(cfg, y)
    other = dataclasses.replace(cfg, schedule=Schedule.geometric(4, 1.0, 0.5, 1.0, 0.5))
    _, b = run(dataclasses.replace(other, enable_noise_injection=False), y)
    with pytest.raises(ValueError):
        theorem1_check(a, b, 1.0)
    with pytest.raises(ValueError, match="injected"):
        theorem1_check(a, a, 1.0)


def test_ablation_grid_order_and_threads():
    cfg, y, x_true = small_problem()
    rows = ablation_grid(cfg, y, x_true)
    assert [(r.noise_injection, r.momentum) for r in rows] == [
        (False, False), (True, False), (False, True), (True, True)
    ]
    assert all(r.nfe == 4 and r.linear_solves == 4 for r in rows)
    threaded = ablation_grid(cfg, y, x_true, workers=4)
    assert [r.psnr for r in threaded] == [r.psnr for r in rows]
