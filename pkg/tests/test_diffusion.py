import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cracksegdiff import diffusion as D
from cracksegdiff.errors import ConfigError, DegenerateStepError


def gaussian_posterior(x_t, x0, alpha, alpha_bar_prev):
    """Brute-force conjugate posterior of x_{t-1}: combine the likelihood
    N(x_t; sqrt(alpha) x_{t-1}, 1 - alpha) with the prior
    N(sqrt(alpha_bar_prev) x0, 1 - alpha_bar_prev) by precision weighting."""
    beta = 1.0 - alpha
    prec_lik = alpha / beta
    mean_lik = x_t / math.sqrt(alpha)
    prec_prior = 1.0 / (1.0 - alpha_bar_prev)
    mean_prior = math.sqrt(alpha_bar_prev) * x0
    var = 1.0 / (prec_lik + prec_prior)
    return var * (prec_lik * mean_lik + prec_prior * mean_prior), var


def random_schedule(rng, T):
    betas = np.sort(rng.uniform(1e-4, 0.5, size=T))
    return D.NoiseSchedule.from_betas(betas)


# -- schedule ----------------------------------------------------------------


def test_build_schedule_four_steps():
    s = D.build_schedule(4, 0.1, 0.4)
    np.testing.assert_allclose(s.beta, [0.1, 0.2, 0.3, 0.4], rtol=0, atol=1e-15)
    np.testing.assert_allclose(s.alpha_bar, [0.9, 0.72, 0.504, 0.3024], rtol=1e-14)


def test_build_schedule_single_step():
    s = D.build_schedule(1, 0.5, 0.5)
    assert s.beta.tolist() == [0.5]
    assert s.alpha_bar.tolist() == [0.5]
    assert s.beta_tilde.tolist() == [0.0]


def test_default_schedule_reaches_near_isotropic_state():
    s = D.build_schedule(1000, 1e-4, 0.02)
    prod = 1.0
    for k in range(1000):
        prod *= 1.0 - (1e-4 + k * (0.02 - 1e-4) / 999)
    assert prod < 1e-4
    assert s.alpha_bar[-1] == pytest.approx(prod, rel=1e-10)


@pytest.mark.parametrize(
    "args, bound",
    [((0, 0.1, 0.2), "T"), ((10, 0.0, 0.2), "beta_start"), ((10, 0.3, 0.2), "beta_end"), ((10, 0.1, 1.0), "beta_end")],
)
def test_build_schedule_rejects_bad_bounds(args, bound):
    with pytest.raises(ConfigError, match=bound):
        D.build_schedule(*args)


def test_schedule_invariants():
    s = D.build_schedule(1000)
    assert np.all(np.diff(s.beta) >= 0)
    assert np.all(np.diff(s.alpha_bar) < 0)
    prev = np.concatenate([[1.0], s.alpha_bar[:-1]])
    assert np.array_equal(s.alpha_bar, s.alpha * prev) or np.allclose(s.alpha_bar, s.alpha * prev, rtol=1e-15, atol=0)
    assert s.beta_tilde[0] == 0.0
    assert np.all((s.beta_tilde >= 0) & (s.beta_tilde <= s.beta))


def test_beta_tilde_matches_oracle_variance():
    s = D.build_schedule(1000)
    for t in range(2, 1001):
        _, var = gaussian_posterior(0.0, 0.0, s.alpha[t - 1], s.alpha_bar[t - 2])
        assert abs(s.beta_tilde[t - 1] - var) <= 1e-12


def test_respace_keeps_alpha_bar_at_kept_steps():
    s = D.build_schedule(1000)
    sub, ts = D.respace(s, 100)
    assert sub.T == len(ts) == 100
    assert ts[0] == 1 and ts[-1] == 1000
    np.testing.assert_allclose(sub.alpha_bar, s.alpha_bar[ts - 1], rtol=1e-12)


# -- forward process ---------------------------------------------------------


def test_q_sample_scalar():
    s = D.NoiseSchedule.from_betas([0.75])  # alpha_bar_1 = 0.25
    assert D.q_sample(2.0, 1, 1.0, s) == pytest.approx(1.8660254037844386, abs=1e-12)
    assert D.q_sample(2.0, 1, 0.0, s) == 0.5 * 2.0
    assert D.q_sample(0.0, 1, 0.0, s) == 0.0


def test_q_sample_out_of_range():
    s = D.build_schedule(10)
    with pytest.raises(IndexError):
        D.q_sample(np.zeros(3), 0, np.zeros(3), s)
    with pytest.raises(IndexError):
        D.q_sample(np.zeros(3), 11, np.zeros(3), s)


def test_q_sample_batched_torch_matches_scalar_calls():
    s = D.build_schedule(50)
    x0 = torch.randn(4, 1, 3, 3, dtype=torch.float64)
    eps = torch.randn_like(x0)
    t = torch.tensor([1, 7, 25, 50])
    out = D.q_sample(x0, t, eps, s)
    for k in range(4):
        torch.testing.assert_close(out[k], D.q_sample(x0[k], int(t[k]), eps[k], s), rtol=1e-15, atol=1e-15)


def test_q_step_scalar_cases():
    s = D.NoiseSchedule.from_betas([0.19])
    assert D.q_step(1.0, 1, 0.0, s) == pytest.approx(0.9, abs=1e-15)
    tiny = D.NoiseSchedule.from_betas([1e-14])
    assert D.q_step(0.7, 1, 1.0, tiny) == pytest.approx(0.7, abs=1e-6)


@pytest.mark.parametrize("seed", range(3))
def test_q_step_composition_matches_closed_form(seed):
    rng = np.random.default_rng(seed)
    s = random_schedule(rng, 20)
    t = int(rng.integers(1, 21))
    x0, n = 0.8, 10_000
    x = np.full(n, x0)
    for k in range(1, t + 1):
        x = D.q_step(x, k, rng.standard_normal(n), s)
    mean, var = np.sqrt(s.alpha_bar[t - 1]) * x0, 1 - s.alpha_bar[t - 1]
    assert abs(x.mean() - mean) <= 3 * math.sqrt(var / n)
    assert abs(x.var(ddof=1) - var) <= 3 * var * math.sqrt(2 / (n - 1))


# -- posterior ---------------------------------------------------------------


def test_posterior_worked_example():
    s = D.NoiseSchedule.from_betas([0.1, 0.2])
    mu, var = D.posterior_stats(1.0, 1.0, 2, s)
    assert mu == pytest.approx(0.99707, abs=5e-6)
    assert var == pytest.approx(1 / 14, abs=1e-12)
    ref_mu, ref_var = gaussian_posterior(1.0, 1.0, 0.8, 0.9)
    assert mu == pytest.approx(ref_mu, rel=1e-12)


def test_posterior_first_step_is_x0():
    s = D.build_schedule(10)
    mu, var = D.posterior_stats(3.7, -0.4, 1, s)
    assert mu == pytest.approx(-0.4, abs=1e-15)
    assert var == 0.0
    assert D.posterior_stats(0.0, 0.0, 5, s)[0] == 0.0


def test_posterior_matches_conjugate_oracle():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        T = int(rng.integers(2, 30))
        s = random_schedule(rng, T)
        t = int(rng.integers(2, T + 1))
        x_t, x0 = rng.normal(0, 2), rng.uniform(-1, 1)
        mu, var = D.posterior_stats(x_t, x0, t, s)
        ref_mu, ref_var = gaussian_posterior(x_t, x0, s.alpha[t - 1], s.alpha_bar[t - 2])
        assert abs(mu - ref_mu) <= 1e-10 * max(abs(ref_mu), 1e-12)
        assert abs(var - ref_var) <= 1e-10 * ref_var


# -- reparameterisation and reverse step ------------------------------------


def test_convert_param_scalar():
    s = D.NoiseSchedule.from_betas([0.36])  # alpha_bar = 0.64
    assert D.convert_param(0.8, 1, s, x0=1.0) == pytest.approx(0.0, abs=1e-15)


def test_convert_param_needs_exactly_one_operand():
    s = D.build_schedule(3)
    with pytest.raises(TypeError):
        D.convert_param(0.1, 1, s)
    with pytest.raises(TypeError):
        D.convert_param(0.1, 1, s, x0=0.0, epsilon=0.0)


def test_convert_param_degenerate_step():
    s = D.NoiseSchedule.from_betas([1e-17])
    assert s.alpha_bar[0] == 1.0
    with pytest.raises(DegenerateStepError):
        D.convert_param(0.5, 1, s, x0=0.5)


@settings(max_examples=200, deadline=None)
@given(
    t=st.integers(1, 1000),
    x0=st.floats(-1, 1),
    eps=st.floats(-4, 4),
)
def test_convert_param_roundtrip(t, x0, eps):
    s = D.build_schedule(1000)
    x_t = D.q_sample(x0, t, eps, s)
    eps_back = D.convert_param(x_t, t, s, x0=x0)
    assert eps_back == pytest.approx(eps, abs=1e-9)
    x0_back = D.convert_param(x_t, t, s, epsilon=eps_back)
    assert x0_back == pytest.approx(x0, abs=1e-12)


def test_reverse_step_first_step_recovers_x0():
    s = D.build_schedule(100)
    rng = np.random.default_rng(1)
    x0 = rng.choice([-1.0, 1.0], size=(2, 1, 4, 4))
    x1 = D.q_sample(x0, 1, rng.standard_normal(x0.shape), s)
    eps = D.convert_param(x1, 1, s, x0=x0)
    for z in (np.zeros_like(x0), 5 * rng.standard_normal(x0.shape)):
        out = D.reverse_step(x1, eps, 1, z, s)
        assert np.max(np.abs(out - x0)) <= 1e-12


def test_reverse_step_batched_indicator():
    s = D.build_schedule(10)
    x = torch.ones(2, 1, 2, 2, dtype=torch.float64)
    eps = torch.zeros_like(x)
    z = torch.ones_like(x)
    out = D.reverse_step(x, eps, torch.tensor([1, 5]), z, s)
    assert torch.equal(out[0], D.reverse_step(x[0], eps[0], 1, z[0], s))
    torch.testing.assert_close(out[1], D.reverse_step(x[1], eps[1], 5, z[1], s), rtol=1e-15, atol=1e-15)


def test_oracle_chain_recovers_x0():
    s = D.build_schedule(1000)
    rng = np.random.default_rng(2)
    x0 = rng.choice([-1.0, 1.0], size=(1, 1, 8, 8))
    x = rng.standard_normal(x0.shape)
    for t in range(s.T, 0, -1):
        eps = D.convert_param(x, t, s, x0=x0)
        x = D.reverse_step(x, eps, t, np.zeros_like(x), s)
    assert np.mean((x - x0) ** 2) <= 1e-6
