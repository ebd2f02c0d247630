import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _stats import moment_test
from ddimlab.core import (
    RngStream,
    ddim_sample,
    ddim_step,
    ddpm_sample,
    forward_diffuse,
    forward_step,
    gaussian_kl,
    max_valid_eta,
    mean_from_eps,
    posterior_coefficients,
    posterior_mean,
    vlb_term_kl,
)
from ddimlab.denoiser import AnalyticDenoiser, GaussianMixture
from ddimlab.schedule import ScheduleError, ScheduleKind, ScheduleSpec, build_schedule, scaled_linear_spec, sigma_t


@pytest.fixture
def lin4():
    return build_schedule(ScheduleSpec(ScheduleKind.LINEAR, 4, 0.1, 0.4))


def gaussian_oracle(mu, tau2):
    return AnalyticDenoiser(GaussianMixture(np.array([1.0]), np.array([[mu]]), np.array([tau2])))


# -- RngStream ---------------------------------------------------------------


def test_rng_repeatable_and_counts():
    a, b = RngStream(7), RngStream(7)
    assert np.array_equal(a.normal((3, 2)), b.normal((3, 2)))
    assert a.counter == 6
    assert not np.array_equal(a.spawn(1).normal(4), a.spawn(2).normal(4))
    assert np.array_equal(RngStream(7).spawn(1).normal(4), RngStream(7).spawn(1).normal(4))


def test_rng_fixed_reference_values():
    # PCG64 standard normals are part of numpy's stable stream guarantee
    ref = np.random.Generator(np.random.PCG64(123)).standard_normal(5)
    assert np.array_equal(RngStream(123).normal(5), ref)


# -- forward process ---------------------------------------------------------


def test_forward_zero_noise(lin4):
    x0 = np.array([1.0, -2.0, 3.0])
    out = forward_diffuse(x0, lin4, 3, np.zeros(3))
    assert np.array_equal(out, math.sqrt(lin4.abar(3)) * x0)


def test_forward_hand_value():
    # a schedule whose first step has alpha_bar = 0.25
    s = build_schedule(ScheduleSpec(ScheduleKind.LINEAR, 1, 0.75, 0.75))
    assert forward_diffuse(1.0, s, 1, 0.5) == pytest.approx(0.5 + 0.5 * math.sqrt(0.75), abs=1e-15)
    assert forward_diffuse(1.0, s, 1, 0.5) == pytest.approx(0.93301, abs=5e-6)


def test_forward_t0_identity(lin4):
    x0 = np.array([0.3, 0.7])
    assert np.array_equal(forward_diffuse(x0, lin4, 0, np.ones(2)), x0)


def test_forward_errors(lin4):
    with pytest.raises(ValueError):
        forward_diffuse(np.zeros(3), lin4, 1, np.zeros(2))
    with pytest.raises(ScheduleError):
        forward_diffuse(np.zeros(3), lin4, 5, np.zeros(3))


def test_marginal_consistency_iterated_kernel():
    s = build_schedule(ScheduleSpec(ScheduleKind.COSINE, 100))
    rng = RngStream(11)
    n, t = 10_000, 60
    x0 = 1.5 + 0.5 * rng.normal(n)
    x = x0.copy()
    for k in range(1, t + 1):
        x = forward_step(x, s, k, rng.normal(n))
    direct = forward_diffuse(x0, s, t, rng.normal(n))
    ab = s.abar(t)
    mean_true = math.sqrt(ab) * 1.5
    var_true = ab * 0.25 + 1 - ab
    for sample in (x, direct):
        assert abs(sample.mean() - mean_true) < 4 * math.sqrt(var_true / n)
        assert abs(sample.var() - var_true) < 4 * var_true * math.sqrt(2.0 / n)


# -- posterior ---------------------------------------------------------------


def test_posterior_mean_zero(lin4):
    assert np.array_equal(posterior_mean(np.zeros(2), np.zeros(2), lin4, 2), np.zeros(2))


def test_posterior_mean_hand_value(lin4):
    expected = math.sqrt(0.8) * 0.1 / 0.28 + math.sqrt(0.9) * 0.2 / 0.28
    assert posterior_mean(1.0, 1.0, lin4, 2) == pytest.approx(expected, abs=1e-14)
    assert posterior_mean(1.0, 1.0, lin4, 2) == pytest.approx(0.99707, abs=5e-6)


@pytest.mark.parametrize("kind", list(ScheduleKind))
def test_posterior_noise_free_identity(kind):
    # with x_t = √ᾱ_t·x0 the posterior mean is √ᾱ_{t-1}·x0 for every t
    s = build_schedule(ScheduleSpec(kind, 50))
    for t in range(1, 51):
        c_t, c_0 = posterior_coefficients(s, t)
        assert c_t * math.sqrt(s.abar(t)) + c_0 == pytest.approx(math.sqrt(s.abar(t - 1)), rel=1e-12)


def test_mean_from_eps_zero(lin4):
    xt = np.array([0.5, -1.0])
    np.testing.assert_allclose(mean_from_eps(xt, np.zeros(2), lin4, 3), xt / math.sqrt(0.7), rtol=1e-15)


def test_mean_from_eps_hand_value(lin4):
    expected = (0.93301 - 0.3 / math.sqrt(0.496) * 0.5) / math.sqrt(0.7)
    assert mean_from_eps(0.93301, 0.5, lin4, 3) == pytest.approx(expected, abs=1e-14)
    assert mean_from_eps(0.93301, 0.5, lin4, 3) == pytest.approx(0.860594, abs=5e-6)


@pytest.mark.parametrize("t", [1, 2, 3, 4])
def test_mean_from_exact_eps_equals_posterior(lin4, t):
    rng = RngStream(3)
    x0, eps = rng.normal(5), rng.normal(5)
    xt = forward_diffuse(x0, lin4, t, eps)
    np.testing.assert_allclose(mean_from_eps(xt, eps, lin4, t), posterior_mean(x0, xt, lin4, t), rtol=1e-12, atol=1e-14)


# -- DDPM --------------------------------------------------------------------


def test_ddpm_gaussian_oracle_mean():
    s = build_schedule(ScheduleSpec(ScheduleKind.COSINE, 200))
    mu, tau2 = 1.3, 0.49
    x = ddpm_sample(gaussian_oracle(mu, tau2), s, (2000, 1), RngStream(5))
    assert abs(x.mean() - mu) < 5 * math.sqrt(tau2 / 2000)


def test_ddpm_seeded_determinism():
    s = build_schedule(ScheduleSpec(ScheduleKind.COSINE, 30))
    m = gaussian_oracle(0.0, 1.0)
    assert np.array_equal(ddpm_sample(m, s, (10, 1), RngStream(1)), ddpm_sample(m, s, (10, 1), RngStream(1)))


def test_ddpm_single_step_adds_no_noise():
    s = build_schedule(ScheduleSpec(ScheduleKind.LINEAR, 1, 0.5, 0.5))
    m = gaussian_oracle(0.0, 1.0)
    rng = RngStream(2)
    xT = np.array([[0.4], [-1.0]])
    out = ddpm_sample(m, s, xT.shape, rng, xT=xT)
    assert rng.counter == 0
    np.testing.assert_allclose(out, mean_from_eps(xT, m(xT, s.abar(1)), s, 1))


def test_ddpm_variance_switch():
    s = build_schedule(ScheduleSpec(ScheduleKind.COSINE, 20))
    m = gaussian_oracle(0.0, 1.0)
    a = ddpm_sample(m, s, (4, 1), RngStream(1), variance="beta")
    b = ddpm_sample(m, s, (4, 1), RngStream(1))
    assert not np.array_equal(a, b)
    with pytest.raises(ValueError):
        ddpm_sample(m, s, (4, 1), RngStream(1), variance="learned")


# -- DDIM --------------------------------------------------------------------


def test_ddim_step_exact_eps_recovers_x0(lin4):
    x0, eps = np.array([1.0, -0.5]), np.array([0.5, 2.0])
    for t in range(1, 5):
        xt = forward_diffuse(x0, lin4, t, eps)
        _, x0_pred = ddim_step(xt, eps, lin4, t, 0.0)
        np.testing.assert_allclose(x0_pred, x0, rtol=1e-13)


def test_ddim_step_hand_value(lin4):
    xt = forward_diffuse(1.0, lin4, 2, 0.5)
    assert xt == pytest.approx(math.sqrt(0.72) + 0.5 * math.sqrt(0.28), abs=1e-15)
    assert xt == pytest.approx(1.113103, abs=5e-6)
    x_prev, _ = ddim_step(xt, 0.5, lin4, 2, 0.0)
    assert x_prev == pytest.approx(math.sqrt(0.9) + math.sqrt(0.1) * 0.5, abs=1e-14)
    assert x_prev == pytest.approx(1.106797, abs=5e-6)


def test_ddim_step_eta0_leaves_rng_untouched(lin4):
    rng = RngStream(0)
    a = ddim_step(np.ones(3), np.ones(3) * 0.2, lin4, 3, 0.0, rng)
    b = ddim_step(np.ones(3), np.ones(3) * 0.2, lin4, 3, 0.0, rng)
    assert rng.counter == 0
    assert np.array_equal(a[0], b[0])


def test_ddim_step_invalid_eta_names_schedule(lin4):
    bad = (1.0 - lin4.abar(2)) / lin4.beta_tilde_at(3) * 1.01
    with pytest.raises(ScheduleError, match="linear"):
        ddim_step(np.ones(1), np.ones(1), lin4, 3, bad, RngStream(0))
    assert max_valid_eta(lin4) < bad


def test_ddim_eta1_step_variance_is_beta_tilde():
    s = build_schedule(ScheduleSpec(ScheduleKind.COSINE, 50))
    t, n = 30, 20_000
    xt, eps = np.full(n, 0.3), np.full(n, -0.2)
    det, _ = ddim_step(xt, eps, s, t, 1.0, RngStream(0))
    var = det.var()
    assert var == pytest.approx(s.beta_tilde_at(t), rel=4 * math.sqrt(2 / n))
    assert sigma_t(s, t, 1.0) ** 2 == pytest.approx(s.beta_tilde_at(t))


def test_ddim_sample_deterministic():
    s = build_schedule(ScheduleSpec(ScheduleKind.COSINE, 50))
    m = gaussian_oracle(2.0, 0.3)
    xT = RngStream(9).normal((20, 1))
    assert ddim_sample(m, s, xT).tobytes() == ddim_sample(m, s, xT).tobytes()


def test_ddim_sample_gaussian_pushforward():
    s = build_schedule(ScheduleSpec(ScheduleKind.COSINE, 500))
    mu, tau2 = 2.0, 0.5
    x = ddim_sample(gaussian_oracle(mu, tau2), s, RngStream(4).normal((10_000, 1)))
    assert x.mean() == pytest.approx(mu, rel=0.03)
    assert x.var() == pytest.approx(tau2, rel=0.03)


def test_ddim_sample_rejects_bad_latents_and_eta():
    s = build_schedule(ScheduleSpec(ScheduleKind.COSINE, 10))
    m = gaussian_oracle(0.0, 1.0)
    with pytest.raises(FloatingPointError):
        ddim_sample(m, s, np.array([[np.nan]]))
    with pytest.raises(ScheduleError):
        ddim_sample(m, s, np.zeros((1, 1)), eta=-1.0)


def test_ddim_injective_on_distinct_latents():
    s = build_schedule(ScheduleSpec(ScheduleKind.COSINE, 100))
    mix = GaussianMixture(np.array([0.5, 0.5]), np.array([[-1.0, 0.0], [1.0, 0.5]]), np.array([0.05, 0.1]))
    rng = RngStream(8)
    a = rng.normal((100, 2))
    step = rng.normal((100, 2))
    step *= (0.1 + rng.uniform(100))[:, None] / np.linalg.norm(step, axis=1, keepdims=True)
    b = a + step
    xa, xb = ddim_sample(AnalyticDenoiser(mix), s, a), ddim_sample(AnalyticDenoiser(mix), s, b)
    assert np.all(np.linalg.norm(xa - xb, axis=1) > 0)


def test_ddpm_and_ddim_eta1_agree_statistically():
    s = build_schedule(scaled_linear_spec(100))
    mix = GaussianMixture(np.array([0.3, 0.7]), np.array([[-1.0], [1.5]]), np.array([0.1, 0.2]))
    m = AnalyticDenoiser(mix)
    n = 10_000
    a = ddpm_sample(m, s, (n, 1), RngStream(21))
    b = ddim_sample(m, s, RngStream(22).normal((n, 1)), eta=1.0, rng=RngStream(23))
    p_mean, p_var = moment_test(a, b)
    assert p_mean > 0.01 and p_var > 0.01


# -- VLB diagnostics ---------------------------------------------------------


def test_kl_identical_is_zero(lin4):
    x0, xt = np.array([0.2, 0.1]), np.array([0.5, -0.4])
    mu = posterior_mean(x0, xt, lin4, 3)
    assert vlb_term_kl(x0, xt, mu, lin4.beta_tilde_at(3), lin4, 3) == pytest.approx(0.0, abs=1e-15)


def test_kl_hand_value():
    assert gaussian_kl(0.0, 1.0, 1.0, 1.0) == pytest.approx(0.5)


def test_kl_errors(lin4):
    with pytest.raises(ValueError):
        vlb_term_kl(0.0, 0.0, 0.0, 0.0, lin4, 2)
    with pytest.raises(ScheduleError):
        vlb_term_kl(0.0, 0.0, 0.0, 1.0, lin4, 1)


@settings(max_examples=80, deadline=None)
@given(
    mq=st.lists(st.floats(-5, 5), min_size=1, max_size=4),
    vq=st.floats(1e-3, 10),
    shift=st.floats(-5, 5),
    vp=st.floats(1e-3, 10),
)
def test_kl_nonnegative(mq, vq, shift, vp):
    mq = np.array(mq)
    assert gaussian_kl(mq, vq, mq + shift, vp) >= 0.0
