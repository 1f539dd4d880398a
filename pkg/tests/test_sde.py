import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from flaglab.errors import ContractError, SamplerDivergenceError, TrainingError
from flaglab.sde import (DiffusionBatch, NoiseSchedule, dsm_loss, eps_dsm_loss,
                         heun_integrate, make_batch, perturb, sample_t,
                         true_perturbation_score, tweedie_denoise,
                         uniform_time_grid)

SCHED = NoiseSchedule(0.01, 10.0)
UNIT = NoiseSchedule(0.5, 2.0)  # sigma(0.5) = 1 exactly


def test_sigma_endpoints():
    assert SCHED.sigma(0.0) == pytest.approx(0.01, rel=1e-12)
    assert SCHED.sigma(1.0) == pytest.approx(10.0, rel=1e-12)
    assert SCHED.sigma(0.5) == pytest.approx(math.sqrt(0.1), rel=1e-12)


def test_sigma_domain_error():
    with pytest.raises(ContractError):
        SCHED.sigma(-0.01)
    with pytest.raises(ContractError):
        SCHED.sigma(1.01)
    with pytest.raises(ContractError):
        SCHED.sigma(np.array([0.5, 1.5]))


def test_schedule_invalid_limits():
    with pytest.raises(ContractError):
        NoiseSchedule(0.0, 1.0)
    with pytest.raises(ContractError):
        NoiseSchedule(2.0, 1.0)


def test_log_sigma_affine_in_t():
    # frozen from the geometric form: log sigma = log s_min + t log(s_max/s_min)
    ts = np.linspace(0.0, 1.0, 10)
    logs = np.log(SCHED.sigma(ts))
    expected = math.log(0.01) + ts * math.log(1000.0)
    assert np.abs(logs - expected).max() < 1e-12


@given(st.floats(1e-4, 1.0), st.floats(1.5, 100.0), st.floats(0.0, 1.0))
@settings(max_examples=100, deadline=None)
def test_sigma_monotone_and_bounded(sigma_min, ratio, t):
    sched = NoiseSchedule(sigma_min, sigma_min * ratio)
    s = sched.sigma(t)
    assert sched.sigma_min <= s <= sched.sigma_max * (1 + 1e-12)
    assert sched.sigma(min(1.0, t + 0.01)) >= s


def test_g_squared_frozen_values():
    # d sigma^2/dt = 2 ln(1000) sigma(t)^2
    assert SCHED.g_squared(1.0) == pytest.approx(1381.5510557964274, rel=1e-12)
    assert SCHED.g_squared(0.0) == pytest.approx(1.3815510557964274e-3, rel=1e-12)


def test_g_squared_matches_finite_differences():
    rng = np.random.default_rng(1)
    h = 1e-6
    for t in rng.uniform(h, 1 - h, size=20):
        numeric = (SCHED.sigma(t + h) ** 2 - SCHED.sigma(t - h) ** 2) / (2 * h)
        assert SCHED.g_squared(t) == pytest.approx(numeric, rel=1e-6)


def test_perturb_zero_noise_identity():
    x0 = np.ones((3, 4))
    z = np.zeros((3, 4))
    t = np.array([0.2, 0.5, 0.9])
    assert np.array_equal(perturb(x0, t, z, SCHED), x0)


def test_perturb_frozen_values():
    # sigma(1) = 10: 1 + 10 * 0.5 = 6
    out = perturb(np.array([[1.0]]), np.array([1.0]), np.array([[0.5]]), SCHED)
    assert out[0, 0] == pytest.approx(6.0, rel=1e-12)
    # sigma(0) = 0.01: 0 + 0.01 * 1
    out = perturb(np.array([[0.0]]), np.array([0.0]), np.array([[1.0]]), SCHED)
    assert out[0, 0] == pytest.approx(0.01, rel=1e-12)


def test_perturb_shape_mismatch():
    with pytest.raises(ContractError):
        perturb(np.zeros((2, 3)), np.zeros(2), np.zeros((3, 2)), SCHED)
    with pytest.raises(ContractError):
        perturb(np.zeros((2, 3)), np.zeros(3), np.zeros((2, 3)), SCHED)


def test_true_score_zero_at_mean():
    x = np.random.default_rng(0).normal(size=(4, 3))
    assert np.all(true_perturbation_score(x, x, 0.3, SCHED) == 0)


def test_true_score_gaussian_formula():
    # unit sigma at t=0.5 for the (0.5, 2) schedule
    score = true_perturbation_score(np.array([[2.0]]), np.array([[0.0]]), 0.5, UNIT)
    assert score[0, 0] == pytest.approx(-2.0, rel=1e-12)


def test_true_score_matches_log_density_gradient(rng):
    x0 = rng.normal(size=5)
    xt = rng.normal(size=5)
    t = 0.63
    sig2 = SCHED.sigma(t) ** 2

    def logp(x):
        return -0.5 * np.sum((x - x0) ** 2) / sig2

    h = 1e-6
    numeric = np.array([
        (logp(xt + h * e) - logp(xt - h * e)) / (2 * h)
        for e in np.eye(5)
    ])
    analytic = true_perturbation_score(xt, x0, t, SCHED)
    assert np.allclose(analytic, numeric, rtol=1e-4, atol=1e-8)


def _oracle_score_fn(x0, schedule):
    def fn(xt, t):
        return true_perturbation_score(xt, x0, t, schedule)
    return fn


def test_dsm_loss_zero_for_oracle(rng):
    x0 = rng.normal(size=(6, 3))
    t = rng.uniform(0.1, 1.0, size=6)
    z = rng.normal(size=(6, 3))
    batch = make_batch(x0, t, z, SCHED)
    assert dsm_loss(_oracle_score_fn(x0, SCHED), batch, SCHED) == pytest.approx(0.0, abs=1e-18)
    assert eps_dsm_loss(_oracle_score_fn(x0, SCHED), batch, SCHED) == pytest.approx(0.0, abs=1e-18)


def test_dsm_loss_hand_value():
    # x0=0, sigma=1, z=1: xt=1, true score=-1, zero prediction -> 1
    batch = make_batch(np.array([[0.0]]), np.array([0.5]), np.array([[1.0]]), UNIT)
    loss = dsm_loss(lambda xt, t: np.zeros_like(xt), batch, UNIT)
    assert loss == pytest.approx(1.0, rel=1e-12)
    assert eps_dsm_loss(lambda xt, t: np.zeros_like(xt), batch, UNIT) == pytest.approx(1.0, rel=1e-12)


def test_dsm_loss_batch_permutation_invariant(rng):
    x0 = rng.normal(size=(8, 4))
    t = rng.uniform(0.05, 1.0, size=8)
    z = rng.normal(size=(8, 4))
    perm = rng.permutation(8)
    loss = dsm_loss(lambda xt, tt: -xt, make_batch(x0, t, z, SCHED), SCHED)
    loss_p = dsm_loss(lambda xt, tt: -xt, make_batch(x0[perm], t[perm], z[perm], SCHED), SCHED)
    assert loss == pytest.approx(loss_p, rel=1e-12)


def test_eps_dsm_equals_sigma2_weighted_dsm(rng):
    x0 = rng.normal(size=(5, 3))
    t = rng.uniform(0.1, 1.0, size=5)
    z = rng.normal(size=(5, 3))
    batch = make_batch(x0, t, z, SCHED)

    def score_fn(xt, tt):
        return -0.3 * xt

    eps_form = eps_dsm_loss(score_fn, batch, SCHED)
    err = score_fn(batch.xt, t) - true_perturbation_score(batch.xt, x0, t, SCHED)
    weighted = ((err * SCHED.sigma(t)[:, None]) ** 2).mean()
    assert eps_form == pytest.approx(weighted, rel=1e-10)


def test_dsm_loss_nonfinite_model_output():
    batch = make_batch(np.zeros((2, 2)), np.array([0.5, 0.5]), np.ones((2, 2)), SCHED)
    with pytest.raises(TrainingError):
        dsm_loss(lambda xt, t: xt * np.inf, batch, SCHED)


def test_perturb_tweedie_roundtrip(rng):
    x0 = rng.normal(size=(5, 7))
    z = rng.normal(size=(5, 7))
    t = rng.uniform(0.0, 1.0, size=5)
    xt = perturb(x0, t, z, SCHED)
    score = true_perturbation_score(xt, x0, t, SCHED)
    back = tweedie_denoise(xt, score, t, SCHED)
    assert np.abs(back - x0).max() < 1e-12


def test_tweedie_zero_score_identity(rng):
    xt = rng.normal(size=(3, 3))
    assert np.array_equal(tweedie_denoise(xt, np.zeros_like(xt), 0.7, SCHED), xt)


def test_tweedie_small_sigma_bound(rng):
    xt = rng.normal(size=(3, 3))
    score = rng.normal(size=(3, 3))
    moved = tweedie_denoise(xt, score, 0.0, SCHED)
    assert np.abs(moved - xt).max() <= SCHED.sigma_min ** 2 * np.abs(score).max() + 1e-15


def test_sample_t_range(rng):
    t = sample_t(1000, rng)
    assert t.min() >= 1e-5 and t.max() <= 1.0


def test_heun_zero_score_returns_init(rng):
    x = rng.normal(size=(4, 3))
    out = heun_integrate(x, lambda xx, t: np.zeros_like(xx), SCHED, steps=7)
    assert np.array_equal(out, x)


def test_heun_rejects_bad_grid(rng):
    x = rng.normal(size=(2, 2))
    with pytest.raises(ContractError):
        heun_integrate(x, lambda xx, t: xx, SCHED, t_grid=[0.0, 0.5, 1.0])
    with pytest.raises(ContractError):
        heun_integrate(x, lambda xx, t: xx, SCHED, t_grid=[1.0, 1.0, 0.0])
    with pytest.raises(ContractError):
        heun_integrate(x, lambda xx, t: xx, SCHED)


def test_heun_divergence_carries_step_index(rng):
    x = rng.normal(size=(2, 2))
    calls = {"n": 0}

    def bad_score(xx, t):
        calls["n"] += 1
        return xx * (np.inf if calls["n"] > 3 else 1.0)

    with pytest.raises(SamplerDivergenceError) as err:
        heun_integrate(x, bad_score, SCHED, steps=10)
    assert err.value.step == 1  # second step: calls 3 and 4


def test_single_heun_step_is_average_of_stage_slopes(rng):
    x = rng.normal(size=(1, 3))

    def score_fn(xx, t):
        return -xx / (1.0 + SCHED.sigma(t) ** 2)

    grid = np.array([1.0, 0.6])
    out = heun_integrate(x, score_fn, SCHED, t_grid=grid, final_tweedie=False)
    dt = grid[1] - grid[0]
    d1 = -0.5 * SCHED.g_squared(1.0) * score_fn(x, 1.0)
    x_euler = x + d1 * dt
    d2 = -0.5 * SCHED.g_squared(0.6) * score_fn(x_euler, 0.6)
    expected = x + 0.5 * (d1 + d2) * dt
    assert np.allclose(out, expected, rtol=0, atol=0)


def _linear_field_exact(x_init, schedule):
    """Analytic PF-ODE solution for score(x,t) = -x/(1+sigma^2), then the
    terminal Tweedie projection with the same score."""
    shrink = math.sqrt((1 + schedule.sigma_min**2) / (1 + schedule.sigma_max**2))
    return x_init * shrink / (1 + schedule.sigma_min**2)


def _linear_field_error(x_init, schedule, steps):
    def score_fn(xx, t):
        return -xx / (1.0 + schedule.sigma(t) ** 2)

    out = heun_integrate(x_init, score_fn, schedule, steps=steps)
    return np.abs(out - _linear_field_exact(x_init, schedule)).max()


def test_heun_second_order_convergence(rng):
    x = rng.normal(size=(16, 2)) * SCHED.sigma_max
    err_k = _linear_field_error(x, SCHED, 40)
    err_2k = _linear_field_error(x, SCHED, 80)
    assert err_k / err_2k >= 3.5


def test_heun_works_on_torch_tensors():
    g = torch.Generator().manual_seed(0)
    x = torch.randn((5, 3), generator=g, dtype=torch.float64) * SCHED.sigma_max

    def score_fn(xx, t):
        return -xx / (1.0 + SCHED.sigma(t) ** 2)

    out = heun_integrate(x, score_fn, SCHED, steps=200)
    expected = _linear_field_exact(x.numpy(), SCHED)
    assert isinstance(out, torch.Tensor)
    assert np.allclose(out.numpy(), expected, rtol=0, atol=2e-3)


def test_uniform_time_grid():
    grid = uniform_time_grid(4)
    assert np.allclose(grid, [1.0, 0.75, 0.5, 0.25, 0.0])
    with pytest.raises(ContractError):
        uniform_time_grid(0)


def test_batch_invariant_consistency(rng):
    x0 = rng.normal(size=(4, 2))
    t = rng.uniform(0, 1, size=4)
    z = rng.normal(size=(4, 2))
    batch = make_batch(x0, t, z, SCHED)
    assert isinstance(batch, DiffusionBatch)
    assert np.allclose(batch.xt, x0 + SCHED.sigma(t)[:, None] * z)
