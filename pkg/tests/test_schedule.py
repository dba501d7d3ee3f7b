import math

import numpy as np
import pytest
import torch

from region_edit.errors import ScheduleRangeError, ShapeMismatchError
from region_edit.schedule import (
    forward_noise,
    make_linear_schedule,
    posterior_sigma,
    posterior_stats,
    predict_clean,
    schedule_from_json,
    stride_schedule,
)


def test_linear_schedule_hand_product():
    s = make_linear_schedule(2, 0.1, 0.2)
    np.testing.assert_allclose(s.betas, [0.1, 0.2], atol=1e-15)
    np.testing.assert_allclose(s.alphas, [0.9, 0.8], atol=1e-15)
    np.testing.assert_allclose(s.alpha_bars, [1.0, 0.9, 0.72], atol=1e-15)


def test_linear_schedule_single_step():
    s = make_linear_schedule(1, 0.5, 0.5)
    np.testing.assert_allclose(s.alpha_bars, [1.0, 0.5], atol=1e-15)


def test_linear_schedule_default_training_range():
    s = make_linear_schedule(1000, 1e-4, 0.02)
    assert np.all(np.diff(s.alpha_bars) < 0)
    # independent product oracle over plain Python floats
    prod = 1.0
    for b in np.linspace(1e-4, 0.02, 1000):
        prod *= 1.0 - b
    assert math.isclose(s.alpha_bars[-1], prod, rel_tol=1e-9)
    assert s.alpha_bars[-1] < 0.01


@pytest.mark.parametrize(
    "T,lo,hi",
    [(0, 0.1, 0.2), (10, 0.0, 0.2), (10, 0.2, 0.1), (10, 0.1, 1.0), (10, -0.1, 0.2)],
)
def test_linear_schedule_rejects_bad_ranges(T, lo, hi):
    with pytest.raises(ScheduleRangeError):
        make_linear_schedule(T, lo, hi)


def test_schedule_json_roundtrip():
    s = make_linear_schedule(37, 2e-4, 0.015)
    rec = s.to_json()
    assert rec == {"T": 37, "kind": "linear", "beta_start": 2e-4, "beta_end": 0.015}
    s2 = schedule_from_json(rec)
    np.testing.assert_array_equal(s.alpha_bars, s2.alpha_bars)


def test_forward_noise_identity_at_t0():
    s = make_linear_schedule(10, 0.1, 0.2)
    z0 = torch.randn(4, 4, 2, generator=torch.Generator().manual_seed(0))
    eps = torch.randn(4, 4, 2, generator=torch.Generator().manual_seed(1))
    assert torch.equal(forward_noise(z0, 0, eps, s), z0)


def test_forward_noise_zero_signal():
    s = make_linear_schedule(10, 0.1, 0.2)
    z0 = torch.zeros(3, 3, 1)
    eps = torch.randn(3, 3, 1, generator=torch.Generator().manual_seed(2))
    out = forward_noise(z0, s.T, eps, s)
    expected = math.sqrt(1.0 - s.alpha_bar(s.T)) * eps
    torch.testing.assert_close(out, expected)


def test_forward_noise_scalar_hand_case():
    # abar_1 = 0.81 via a one-step schedule with beta = 0.19
    s = make_linear_schedule(1, 0.19, 0.19)
    z0 = torch.full((1, 1, 1), 2.0, dtype=torch.float64)
    eps = torch.ones(1, 1, 1, dtype=torch.float64)
    out = float(forward_noise(z0, 1, eps, s))
    assert math.isclose(out, 0.9 * 2.0 + math.sqrt(0.19), rel_tol=1e-12)
    assert math.isclose(out, 2.23589, abs_tol=5e-6)


def test_forward_noise_shape_mismatch():
    s = make_linear_schedule(10, 0.1, 0.2)
    with pytest.raises(ShapeMismatchError):
        forward_noise(torch.zeros(2, 2, 1), 1, torch.zeros(2, 3, 1), s)


def test_forward_noise_out_of_range_t():
    s = make_linear_schedule(10, 0.1, 0.2)
    with pytest.raises(ScheduleRangeError):
        forward_noise(torch.zeros(1, 1, 1), 11, torch.zeros(1, 1, 1), s)


def test_perfect_denoiser_round_trip():
    s = make_linear_schedule(50, 1e-3, 0.05)
    gen = torch.Generator().manual_seed(3)
    z0 = torch.randn(4, 4, 3, generator=gen)
    for t in (1, 7, 25, 50):
        eps = torch.randn(4, 4, 3, generator=gen)
        z_t = forward_noise(z0, t, eps, s)
        torch.testing.assert_close(predict_clean(z_t, eps, t, s), z0, atol=1e-5, rtol=1e-5)


def test_posterior_sigma_zero_at_first_step():
    s = make_linear_schedule(30, 1e-3, 0.04)
    assert posterior_sigma(1, s) == 0.0
    assert posterior_sigma(2, s) > 0.0


def test_posterior_stats_out_of_range():
    s = make_linear_schedule(5, 0.1, 0.2)
    z = torch.zeros(2, 2, 1)
    with pytest.raises(ScheduleRangeError):
        posterior_stats(z, z, 0, s)
    with pytest.raises(ScheduleRangeError):
        posterior_stats(z, z, 6, s)


def test_posterior_mean_matches_textbook_formula():
    # independent oracle: the x0-parameterized posterior mean
    s = make_linear_schedule(40, 1e-3, 0.03)
    gen = torch.Generator().manual_seed(4)
    z_t = torch.randn(4, 4, 2, generator=gen, dtype=torch.float64)
    eps_hat = torch.randn(4, 4, 2, generator=gen, dtype=torch.float64)
    for t in (2, 17, 40):
        mu, sigma = posterior_stats(z_t, eps_hat, t, s)
        abar_t, abar_prev = s.alpha_bar(t), s.alpha_bar(t - 1)
        beta_t, alpha_t = s.beta(t), s.alpha(t)
        x0_hat = (z_t - math.sqrt(1 - abar_t) * eps_hat) / math.sqrt(abar_t)
        oracle = (
            math.sqrt(abar_prev) * beta_t / (1 - abar_t) * x0_hat
            + math.sqrt(alpha_t) * (1 - abar_prev) / (1 - abar_t) * z_t
        )
        torch.testing.assert_close(mu, oracle, atol=1e-6, rtol=1e-6)
        expected_var = (1 - abar_prev) / (1 - abar_t) * beta_t
        assert math.isclose(float(sigma.flatten()[0]) ** 2, expected_var, rel_tol=1e-9)


def test_round_trip_invariant_many_seeds():
    s = make_linear_schedule(100, 1e-4, 0.02)
    for seed in range(5):
        gen = torch.Generator().manual_seed(seed)
        z0 = torch.randn(8, 8, 4, generator=gen)
        eps = torch.randn(8, 8, 4, generator=gen)
        t = 1 + seed * 19
        recon = predict_clean(forward_noise(z0, t, eps, s), eps, t, s)
        torch.testing.assert_close(recon, z0, atol=1e-5, rtol=1e-5)


def test_forward_noise_statistical_mean():
    s = make_linear_schedule(100, 1e-4, 0.02)
    t = 60
    z0 = np.array([[[0.7, -0.3]]])
    rng = np.random.default_rng(5)
    n = 20000
    draws = rng.standard_normal((n, 1, 1, 2))
    noisy = np.stack([forward_noise(z0, t, e, s) for e in draws])
    sample_mean = noisy.mean(axis=0)
    se = math.sqrt((1.0 - s.alpha_bar(t)) / n)
    assert np.all(np.abs(sample_mean - math.sqrt(s.alpha_bar(t)) * z0) < 3 * se)


def test_stride_schedule_subsets_alpha_bars():
    base = make_linear_schedule(1000, 1e-4, 0.02)
    sub = stride_schedule(base, 100)
    assert sub.T == 100
    assert sub.alpha_bars[0] == 1.0
    assert sub.model_timestep(100) == 1000
    assert sub.model_timestep(1) == 10
    np.testing.assert_allclose(sub.alpha_bars, base.alpha_bars[np.arange(0, 1001, 10)])
    assert np.all(np.diff(sub.alpha_bars) < 0)
    assert np.all((sub.betas > 0) & (sub.betas < 1))


def test_stride_schedule_identity_when_steps_equal_T():
    base = make_linear_schedule(64, 1e-3, 0.02)
    sub = stride_schedule(base, 64)
    np.testing.assert_allclose(sub.alpha_bars, base.alpha_bars)
    assert [sub.model_timestep(t) for t in (1, 64)] == [1, 64]


def test_stride_schedule_rejects_bad_steps():
    base = make_linear_schedule(10, 1e-3, 0.02)
    with pytest.raises(ScheduleRangeError):
        stride_schedule(base, 0)
    with pytest.raises(ScheduleRangeError):
        stride_schedule(base, 11)
