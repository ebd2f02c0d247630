import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ddimlab.schedule import (
    ScheduleError,
    ScheduleKind,
    ScheduleSpec,
    build_schedule,
    scaled_linear_spec,
    sigma_t,
)


def linear4():
    return build_schedule(ScheduleSpec(ScheduleKind.LINEAR, 4, 0.1, 0.4))


def test_linear_t4_by_hand():
    s = linear4()
    np.testing.assert_allclose(s.beta, [0.1, 0.2, 0.3, 0.4], rtol=0, atol=1e-15)
    # cumulative product written out by hand
    expected = [1.0, 0.9, 0.9 * 0.8, 0.9 * 0.8 * 0.7, 0.9 * 0.8 * 0.7 * 0.6]
    assert s.alpha_bar.tolist() == expected
    np.testing.assert_allclose(s.alpha_bar, [1, 0.9, 0.72, 0.504, 0.3024], rtol=1e-15)


def test_cosine_alpha_bar_zero_is_one():
    for T in (1, 7, 1000):
        assert build_schedule(ScheduleSpec(ScheduleKind.COSINE, T)).abar(0) == 1.0


def test_cosine_matches_closed_form():
    T, s_off = 50, 0.008
    s = build_schedule(ScheduleSpec(ScheduleKind.COSINE, T, cosine_offset=s_off))
    f = lambda u: math.cos((u + s_off) / (1 + s_off) * math.pi / 2) ** 2
    for t in (1, 10, 25, 49):
        assert s.abar(t) == pytest.approx(f(t / T) / f(0), rel=1e-12)
    assert s.beta.max() <= 0.999


def test_quadratic_interpolates_sqrt_beta():
    s = build_schedule(ScheduleSpec(ScheduleKind.QUADRATIC, 3, 0.01, 0.09))
    np.testing.assert_allclose(s.beta, [0.01, 0.04, 0.09], rtol=1e-12)


@pytest.mark.parametrize("kind", list(ScheduleKind))
@pytest.mark.parametrize("T", [10, 100, 1000])
def test_invariants_all_kinds(kind, T):
    s = build_schedule(ScheduleSpec(kind, T))
    ab = s.alpha_bar
    assert ab[0] == 1.0
    assert np.all(np.diff(ab) < 0)
    assert np.all((ab > 0) & (ab <= 1))
    for t in range(1, T + 1):
        assert ab[t] == ab[t - 1] * s.alpha[t - 1]
    assert s.beta_tilde[0] == 0.0
    assert np.all(s.beta_tilde[1:] < s.beta[1:])


def test_sigma_examples():
    s = linear4()
    assert sigma_t(s, 3, 0.0) == 0.0
    assert sigma_t(s, 3, 1.0) == pytest.approx(math.sqrt(s.beta_tilde_at(3)))
    assert sigma_t(s, 2, 1.0) == pytest.approx(math.sqrt((1 - 0.9) / (1 - 0.72) * 0.2), abs=1e-12)
    assert sigma_t(s, 2, 1.0) == pytest.approx(0.26726, abs=5e-6)


def test_sigma_rejects_bad_inputs():
    s = linear4()
    with pytest.raises(ScheduleError):
        sigma_t(s, 5, 1.0)
    with pytest.raises(ScheduleError):
        sigma_t(s, 0, 1.0)
    with pytest.raises(ScheduleError):
        sigma_t(s, 1, -0.5)


@pytest.mark.parametrize("kwargs", [
    dict(kind="linear", T=0),
    dict(kind="linear", T=10, beta_start=0.0),
    dict(kind="linear", T=10, beta_start=0.3, beta_end=0.2),
    dict(kind="quadratic", T=10, beta_end=1.0),
    dict(kind="cosine", T=10, cosine_offset=0.0),
])
def test_spec_validation(kwargs):
    with pytest.raises(ScheduleError):
        ScheduleSpec(**kwargs)


def test_rejects_unknown_kind():
    with pytest.raises(ValueError):
        ScheduleSpec(kind="sigmoid")


def test_quadratic_equals_linear_when_constant():
    a = build_schedule(ScheduleSpec(ScheduleKind.LINEAR, 20, 0.05, 0.05))
    b = build_schedule(ScheduleSpec(ScheduleKind.QUADRATIC, 20, 0.05, 0.05))
    np.testing.assert_allclose(a.alpha_bar, b.alpha_bar, rtol=1e-14)


def test_rebuild_is_bit_identical():
    spec = ScheduleSpec(ScheduleKind.COSINE, 321)
    assert build_schedule(spec).to_csv() == build_schedule(spec).to_csv()


def test_arrays_are_read_only():
    s = linear4()
    with pytest.raises(ValueError):
        s.alpha_bar[1] = 0.5


def test_csv_format():
    lines = linear4().to_csv().splitlines()
    assert lines[0] == "t,alpha,alpha_bar,beta,beta_tilde"
    assert len(lines) == 5
    t, alpha, ab, beta, bt = lines[2].split(",")
    assert (int(t), float(alpha), float(ab), float(beta)) == (2, 0.8, 0.9 * 0.8, 0.2)
    assert float(bt) == linear4().beta_tilde_at(2)


def test_scaled_linear_keeps_alpha_bar_T_comparable():
    ends = [build_schedule(scaled_linear_spec(T)).abar(T) for T in (50, 100, 1000)]
    assert max(ends) < 1e-3


@settings(max_examples=60, deadline=None)
@given(
    kind=st.sampled_from(list(ScheduleKind)),
    T=st.integers(1, 300),
    b0=st.floats(1e-5, 0.05),
    ratio=st.floats(1.0, 20.0),
)
def test_property_monotone_and_posterior_variance(kind, T, b0, ratio):
    s = build_schedule(ScheduleSpec(kind, T, b0, min(b0 * ratio, 0.5)))
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert np.all(s.beta_tilde <= s.beta)
    assert np.all(s.beta_tilde >= 0)
    # strict while 1 - alpha_bar still resolves the step; once alpha_bar ~ 0 the ratio rounds to 1
    resolved = (1.0 - s.alpha_bar[1:-1]) < (1.0 - s.alpha_bar[2:]) * (1 - 1e-12)
    assert np.all(s.beta_tilde[1:][resolved] < s.beta[1:][resolved])
