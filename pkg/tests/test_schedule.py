import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from keydiff.schedule import (
    NoiseSchedule,
    build_schedule,
    forward_marginal_sample,
    forward_single_step,
)

# Independently computed with an extended-precision product (mpmath, 60
# digits) over betas = linspace(1e-4, 2e-2, 100), then frozen here.
ALPHA_BAR_100_LINEAR = 0.36356324805549191545


def test_constant_beta_alpha_bar():
    s = build_schedule("constant", 2, 0.1)
    assert s.alpha_bar(1) == pytest.approx(0.9, abs=1e-15)
    assert s.alpha_bar(2) == pytest.approx(0.81, abs=1e-15)


def test_alpha_bar_zero_is_one():
    s = build_schedule("linear", 10, 1e-4, 1e-2)
    assert s.alpha_bar(0) == 1.0


def test_beta_zero_rejected():
    with pytest.raises(ValueError):
        build_schedule("custom", 2, 0.0, betas=np.array([0.0, 0.1]))
    with pytest.raises(ValueError):
        build_schedule("constant", 3, 0.0)


def test_beta_to_zero_limit_alpha_bar_to_one():
    s = build_schedule("constant", 5, 1e-12)
    assert s.alpha_bar(5) == pytest.approx(1.0, abs=1e-10)


def test_linear_100_frozen_value():
    s = build_schedule("linear", 100, 1e-4, 2e-2)
    assert s.alpha_bar(100) == pytest.approx(ALPHA_BAR_100_LINEAR, rel=1e-14)


def test_step_bounds_checked():
    s = build_schedule("constant", 4, 0.1)
    with pytest.raises(ValueError):
        s.beta(0)
    with pytest.raises(ValueError):
        s.beta(5)
    with pytest.raises(ValueError):
        s.alpha_bar(-1)
    with pytest.raises(ValueError):
        s.alpha_bar(5)


def test_unknown_kind_rejected():
    with pytest.raises(ValueError):
        build_schedule("cosine", 10, 1e-4, 1e-2)


def test_bad_ranges_rejected():
    with pytest.raises(ValueError):
        build_schedule("linear", 10, 0.02, 0.01)
    with pytest.raises(ValueError):
        build_schedule("linear", 0, 1e-4, 1e-2)
    with pytest.raises(ValueError):
        build_schedule("linear", 10, 1e-4, None)


@settings(max_examples=50, deadline=None)
@given(
    st.integers(min_value=1, max_value=40),
    st.floats(min_value=1e-6, max_value=0.5),
    st.floats(min_value=1e-6, max_value=0.5),
)
def test_alpha_bar_recursion_exact(n, lo, hi):
    lo, hi = min(lo, hi), max(lo, hi)
    s = build_schedule("linear", n, lo, hi)
    for i in range(1, n + 1):
        assert s.alpha_bar(i) == pytest.approx(
            s.alpha_bar(i - 1) * s.alpha(i), rel=1e-14
        )


@settings(max_examples=50, deadline=None)
@given(
    st.integers(min_value=1, max_value=40),
    st.floats(min_value=1e-6, max_value=0.5),
    st.floats(min_value=1e-6, max_value=0.5),
)
def test_posterior_var_formula_and_bound(n, lo, hi):
    lo, hi = min(lo, hi), max(lo, hi)
    s = build_schedule("linear", n, lo, hi)
    for i in range(1, n + 1):
        expected = (1.0 - s.alpha_bar(i - 1)) / (1.0 - s.alpha_bar(i)) * s.beta(i)
        assert s.posterior_var(i) == pytest.approx(expected, rel=1e-13, abs=1e-300)
        assert s.posterior_var(i) <= s.beta(i) + 1e-15
    assert s.posterior_var(1) == 0.0


def test_schedule_shape_validation():
    with pytest.raises(ValueError):
        NoiseSchedule(
            n_steps=3,
            betas=np.array([0.1, 0.1]),
            alphas=np.array([0.9, 0.9, 0.9]),
            alpha_bars=np.array([0.9, 0.81, 0.729]),
            posterior_vars=np.zeros(3),
        )


def test_forward_marginal_identity_at_alpha_bar_one():
    # Tiny beta => alpha_bar ~ 1 => output ~ x0.
    s = build_schedule("constant", 1, 1e-15)
    x0 = np.array([1.0, -2.0, 3.0])
    out = forward_marginal_sample(x0, 1, s, np.random.default_rng(0))
    assert np.allclose(out, x0, atol=1e-6)


def test_forward_marginal_terminal_near_standard_normal():
    s = build_schedule("constant", 200, 0.05)
    x0 = np.full(1, 3.0)
    rng = np.random.default_rng(1)
    draws = np.array([forward_marginal_sample(x0, 200, s, rng)[0] for _ in range(100_000)])
    assert abs(draws.mean()) < 0.02
    assert abs(draws.var() - 1.0) < 0.02


def test_forward_marginal_zero_x0_variance():
    s = build_schedule("linear", 20, 1e-3, 0.1)
    i = 13
    rng = np.random.default_rng(2)
    n = 100_000
    draws = np.array([forward_marginal_sample(np.zeros(1), i, s, rng)[0] for _ in range(n)])
    var = 1.0 - s.alpha_bar(i)
    se = var * np.sqrt(2.0 / (n - 1))
    assert abs(draws.var() - var) < 3 * se


def test_composed_steps_match_marginal():
    # Composing i single forward transitions matches the direct marginal in
    # first and second moments within 4 standard errors at 1e5 draws.
    s = build_schedule("linear", 10, 1e-3, 0.2)
    x0 = np.array([1.5])
    i = 10
    n = 100_000
    rng = np.random.default_rng(3)
    composed = np.empty(n)
    for k in range(n):
        x = x0
        for j in range(1, i + 1):
            x = forward_single_step(x, j, s, rng)
        composed[k] = x[0]
    ab = s.alpha_bar(i)
    mean, var = np.sqrt(ab) * x0[0], 1.0 - ab
    se_mean = np.sqrt(var / n)
    se_var = var * np.sqrt(2.0 / (n - 1))
    assert abs(composed.mean() - mean) < 4 * se_mean
    assert abs(composed.var() - var) < 4 * se_var
