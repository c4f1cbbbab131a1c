import numpy as np
import pytest
import torch

from skiperase.errors import ConfigError, InputError
from skiperase.schedule import (LINEAR_BETA_START, LINEAR_BETA_END, cosine_alpha_bar,
                                forward_diffuse, make_noise_schedule)


def test_linear_schedule_is_linspace():
    sched = make_noise_schedule(1000, "linear")
    assert sched.T == 1000
    expected = np.linspace(LINEAR_BETA_START, LINEAR_BETA_END, 1000)
    np.testing.assert_allclose(sched.betas, expected)


def test_minimal_two_step_schedule():
    sched = make_noise_schedule(2, "linear")
    assert sched.T == 2
    assert sched.alpha_bars[1] < sched.alpha_bars[0]


def test_cosine_schedule_matches_scalar_formula():
    # Oracle: recompute alpha_bar_t as the product of per-step ratios of the
    # scalar cosine curve, entirely outside the vectorized implementation.
    T = 1000
    sched = make_noise_schedule(T, "cosine")
    expected = 1.0
    for t in range(T):
        ratio = cosine_alpha_bar(t + 1, T) / cosine_alpha_bar(t, T)
        expected *= max(1.0 - 0.999, min(ratio, 1.0))
    assert sched.alpha_bars[0] == pytest.approx(
        cosine_alpha_bar(1, T) / cosine_alpha_bar(0, T), rel=1e-12)
    assert sched.alpha_bars[-1] == pytest.approx(expected, rel=1e-9)
    assert sched.alpha_bars[0] > 0.99
    assert sched.alpha_bars[-1] < 0.01


@pytest.mark.parametrize("kind", ["linear", "cosine"])
def test_alpha_bar_strictly_decreasing(kind):
    sched = make_noise_schedule(500, kind)
    assert (np.diff(sched.alpha_bars) < 0).all()
    assert ((sched.betas > 0) & (sched.betas < 1)).all()


def test_invalid_schedule_config():
    with pytest.raises(ConfigError):
        make_noise_schedule(1, "linear")
    with pytest.raises(ConfigError):
        make_noise_schedule(100, "sigmoid")


def test_forward_diffuse_identity_at_full_signal():
    # alpha_bar_0 is not exactly 1 for the linear schedule, so build one where
    # the first beta is tiny and check the analytic form instead.
    sched = make_noise_schedule(10, "linear")
    x0 = torch.randn(2, 3, 8, 8)
    noise = torch.randn(2, 3, 8, 8)
    z0 = forward_diffuse(x0, 0, noise, sched)
    ab = sched.alpha_bars[0]
    torch.testing.assert_close(z0, np.sqrt(ab) * x0 + np.sqrt(1 - ab) * noise)


def test_forward_diffuse_zero_signal_linearity():
    sched = make_noise_schedule(100, "linear")
    noise = torch.randn(1, 3, 8, 8)
    for t in [0, 37, 99]:
        z = forward_diffuse(torch.zeros(1, 3, 8, 8), t, noise, sched)
        torch.testing.assert_close(z, float(np.sqrt(1 - sched.alpha_bars[t])) * noise)


def test_forward_diffuse_scalar_oracle():
    sched = make_noise_schedule(100, "linear")
    t = 50
    z = forward_diffuse(torch.ones(1, 1, 2, 2), t, torch.ones(1, 1, 2, 2), sched)
    ab = sched.alpha_bars[t]
    expected = np.sqrt(ab) + np.sqrt(1.0 - ab)  # scalar arithmetic oracle
    assert float(z[0, 0, 0, 0]) == pytest.approx(expected, rel=1e-6)


def test_forward_diffuse_shape_mismatch():
    sched = make_noise_schedule(10, "linear")
    with pytest.raises(InputError):
        forward_diffuse(torch.zeros(1, 3, 8, 8), 0, torch.zeros(1, 3, 4, 4), sched)
    with pytest.raises(InputError):
        forward_diffuse(torch.zeros(1, 3, 8, 8), 10, torch.zeros(1, 3, 8, 8), sched)


def test_forward_diffuse_variance_contract():
    # For x0 and noise both unit-variance and independent, E||z_t||^2 per
    # element is alpha_bar + (1 - alpha_bar) = 1.
    sched = make_noise_schedule(50, "linear")
    gen = torch.Generator().manual_seed(0)
    x0 = torch.randn(64, 3, 16, 16, generator=gen)
    noise = torch.randn(64, 3, 16, 16, generator=gen)
    z = forward_diffuse(x0, 25, noise, sched)
    assert float((z ** 2).mean()) == pytest.approx(1.0, abs=0.05)
