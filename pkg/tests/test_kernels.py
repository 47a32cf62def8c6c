import math

import numpy as np
import pytest
from scipy import stats

from sepsis_hmm.inference.data import NO_TERMINAL, CohortArrays
from sepsis_hmm.inference.kernels import (
    IMPROVE,
    STAY,
    WORSEN,
    ImpossiblePathError,
    draw_inverse_gamma,
    mu_posterior,
    padded_log_emissions,
    sigma2_posterior,
    site_conditional,
    transition_counts,
    transition_loglik,
    update_beta,
    update_gamma,
    update_lambda,
    update_latents,
    update_mu,
    update_sigma,
)
from sepsis_hmm.inference.sampler import random_latents
from sepsis_hmm.model import EmissionParams, Outcome, log_transition_matrices
from sepsis_hmm.simulate import CohortSpec, simulate_cohort

import oracles
from conftest import make_params


def _random_cohort(rng, n=12, use_outcomes=True):
    eps = []
    for i in range(n):
        t_len = int(rng.integers(1, 6))
        x = rng.normal([120, 65, 85, 19.5, 98.3], [15, 10, 14, 2.5, 1.0], size=(t_len, 5))
        outcome = [Outcome.DISCHARGED, Outcome.DIED, Outcome.CENSORED][i % 3]
        eps.append(oracles.episode(x, rng.normal(3, 1, 3), outcome, f"E{i}"))
    return eps, CohortArrays.build(eps, use_outcomes)


# -- latent states -------------------------------------------------------------------

@pytest.mark.parametrize("use_outcomes", [True, False])
def test_site_conditional_matches_enumeration(use_outcomes):
    rng = np.random.default_rng(4)
    mp = make_params(beta=(0.05, 0.03, 0.04), lam=(0.95, 0.93, 0.9), gamma=(0.3, 0.35, 0.4))
    eps, data = _random_cohort(rng, use_outcomes=use_outcomes)
    log_a = log_transition_matrices(mp.transition, data.cov)
    log_e = padded_log_emissions(data, mp.emission)
    z = random_latents(data, rng)
    checked = 0
    for r in range(data.n):
        e = eps[data.perm[r]]
        term = None if data.terminal[r] == NO_TERMINAL else int(data.terminal[r])
        for t in range(data.lengths[r]):
            p = site_conditional(z, log_a, log_e, data.lengths, data.terminal, r, t)
            ref = oracles.enumerate_site(z[r, : data.lengths[r]], t, e.vitals,
                                         e.covariates, mp.transition, mp.emission, term)
            np.testing.assert_allclose(p, ref, atol=1e-12, rtol=0)
            checked += 1
    assert checked > 20


def test_single_interval_symmetric_is_uniform():
    ep = EmissionParams(np.zeros((3, 5)) + 100.0, np.ones((3, 5)))
    mp = make_params()
    mp.emission = ep
    data = CohortArrays.build([oracles.episode(np.full((1, 5), 100.0), (0, 0, 0))], False)
    z = np.zeros((1, 1), dtype=np.int64)
    p = site_conditional(z, log_transition_matrices(mp.transition, data.cov),
                         padded_log_emissions(data, ep), data.lengths, data.terminal, 0, 0)
    np.testing.assert_allclose(p, [1 / 3] * 3, atol=1e-15)


def test_banded_neighbours_force_s2(rng):
    mp = make_params()
    data = CohortArrays.build([oracles.episode(np.tile(mp.emission.mu[0], (3, 1)), (0.1, 0.1, 0.1))], False)
    z = np.array([[0, 1, 2]])
    log_a = log_transition_matrices(mp.transition, data.cov)
    log_e = padded_log_emissions(data, mp.emission)
    np.testing.assert_array_equal(site_conditional(z, log_a, log_e, data.lengths, data.terminal, 0, 1),
                                  [0.0, 1.0, 0.0])


def test_sweep_draws_follow_conditional():
    # many identical single-interval patients: every site is an independent conditional draw
    mp = make_params()
    x = np.array([[125.0, 68.0, 88.0, 20.0, 98.3]])
    n = 60_000
    data = CohortArrays.build([oracles.episode(x, (0.5, 0.5, 0.5), eid=str(i)) for i in range(n)], False)
    z = np.zeros((n, 1), dtype=np.int64)
    update_latents(z, mp.transition, mp.emission, data, np.random.default_rng(2))
    ref = oracles.enumerate_site([0], 0, x, data.cov[0], mp.transition, mp.emission)
    freq = np.bincount(z[:, 0], minlength=3) / n
    assert np.all(np.abs(freq - ref) < 4 * np.sqrt(ref * (1 - ref) / n))


def test_impossible_path_raises():
    mp = make_params()
    tight = mp.emission.sigma / 1000.0
    mp.emission = EmissionParams(mp.emission.mu, tight)
    # interval 0 sits exactly on the S1 mean so it must be S1; a death right after S1 is impossible
    x = np.vstack([mp.emission.mu[0], mp.emission.mu[2]])
    data = CohortArrays.build([oracles.episode(x, (0.2, 0.2, 0.2), Outcome.DIED)], True)
    z = np.array([[0, 0]])
    with pytest.raises(ImpossiblePathError):
        update_latents(z, mp.transition, mp.emission, data, np.random.default_rng(0))


@pytest.mark.parametrize("scheme", ["single-site", "blocked"])
def test_latent_chain_reaches_exact_path_posterior(scheme):
    mp = make_params(beta=(0.05, 0.05, 0.05), lam=(0.9, 0.9, 0.9), gamma=(0.3, 0.3, 0.3))
    x = np.array([[118, 63, 78, 18.8, 98.0], [140, 75, 84, 19.0, 98.1],
                  [120, 64, 92, 20.5, 98.5], [117, 62, 97, 21.5, 98.7]], float)
    c = (0.3, 0.2, 0.1)
    data = CohortArrays.build([oracles.episode(x, c, Outcome.DIED)], True)
    rng = np.random.default_rng(21)
    z = random_latents(data, rng)
    paths, w = oracles.exact_path_posterior(x, data.cov[0], mp.transition, mp.emission, terminal=4)
    index = {p: i for i, p in enumerate(paths)}
    hits = np.zeros(len(paths))
    n = 40_000
    for s in range(n + 500):
        update_latents(z, mp.transition, mp.emission, data, rng, scheme=scheme)
        if s >= 500:
            hits[index[tuple(z[0])]] += 1
    assert 0.5 * np.abs(hits / n - w).sum() < 0.03
    # structural feasibility of every visited path
    assert z[0, -1] == 2 and np.all(np.abs(np.diff(z[0])) <= 1)


def test_thread_count_does_not_change_draws(truth):
    sims = simulate_cohort(truth, CohortSpec(300, seed=1))
    data = CohortArrays.build([s.episode for s in sims], True)
    for scheme in ("single-site", "blocked"):
        z0 = random_latents(data, np.random.default_rng(0))
        outs = []
        for threads in (1, 3):
            z = z0.copy()
            rng = np.random.default_rng(5)
            for _ in range(3):
                update_latents(z, truth.transition, truth.emission, data, rng, threads, scheme)
            outs.append(z)
        np.testing.assert_array_equal(outs[0], outs[1])


# -- transition counts and gamma -----------------------------------------------------

def test_transition_counts_hand_example():
    eps = [oracles.episode(np.zeros((4, 5)) + 100, (0, 0, 0), Outcome.DISCHARGED, "a"),
           oracles.episode(np.zeros((2, 5)) + 100, (0, 0, 0), Outcome.CENSORED, "b")]
    data = CohortArrays.build(eps, True)
    z = np.zeros((2, 4), dtype=np.int64)
    z[0] = [2, 2, 1, 0]       # row 0 is the longer episode "a"
    z[1, :2] = [1, 2]
    c = transition_counts(z, data)
    expected_a = np.zeros((3, 3), int)
    expected_a[2, STAY] = 1
    expected_a[2, IMPROVE] = 1
    expected_a[1, IMPROVE] = 1
    expected_a[0, IMPROVE] = 1   # S1 -> G terminal move
    expected_b = np.zeros((3, 3), int)
    expected_b[1, WORSEN] = 1
    np.testing.assert_array_equal(c[0], expected_a)
    np.testing.assert_array_equal(c[1], expected_b)


def _gamma_counts(n_imp, n_stay):
    c = np.zeros((1, 3, 3), dtype=np.int64)
    c[0, :, IMPROVE] = n_imp
    c[0, :, STAY] = n_stay
    return c


def test_gamma_prior_is_uniform():
    rng = np.random.default_rng(0)
    draws = np.array([update_gamma(_gamma_counts(0, 0), rng) for _ in range(20_000)])
    assert stats.kstest(draws[:, 0], "uniform").statistic < 0.015


def test_gamma_conjugacy_mean():
    rng = np.random.default_rng(1)
    draws = np.array([update_gamma(_gamma_counts(3, 7), rng) for _ in range(40_000)])[:, 1]
    se = math.sqrt(stats.beta(4, 8).var() / len(draws))
    assert abs(draws.mean() - 1 / 3) < 3 * se


def test_gamma_matches_grid_posterior():
    rng = np.random.default_rng(2)
    counts = _gamma_counts(3, 7)
    draws = np.array([update_gamma(counts, rng)[2] for _ in range(100_000)])
    grid = np.linspace(0, 1, 1001)
    w = grid**3 * (1 - grid) ** 7
    edges = np.linspace(0, 1, 21)
    assert oracles.binned_tv(draws, grid, w / w.sum(), edges) <= 0.01


# -- emission conjugates ----------------------------------------------------------------

def _mu_oracle(n, xbar, sigma, m0, s0):
    var = sigma**2 * s0**2 / (n * s0**2 + sigma**2)
    mean = (n * s0**2 * xbar + sigma**2 * m0) / (n * s0**2 + sigma**2)
    return mean, math.sqrt(var)


@pytest.mark.parametrize("n,xbar,sigma,m0,s0", [(37, 101.3, 14.0, 95.0, 150.0), (1, 20.0, 2.0, 19.0, 0.5),
                                                  (400, 98.4, 0.9, 98.0, 9.0)])
def test_mu_posterior_closed_form(n, xbar, sigma, m0, s0):
    mean, sd = mu_posterior(n, n * xbar, sigma, m0, s0)
    ref_mean, ref_sd = _mu_oracle(n, xbar, sigma, m0, s0)
    assert mean == pytest.approx(ref_mean, rel=1e-12, abs=1e-12)
    assert sd == pytest.approx(ref_sd, rel=1e-12)


def _state_cohort(values_by_state):
    """One episode per state value block, decoded entirely in that state."""
    eps, zs = [], []
    for k, x in values_by_state.items():
        eps.append(oracles.episode(x, (0, 0, 0), eid=f"k{k}"))
        zs.append(k)
    data = CohortArrays.build(eps, False)
    z = np.zeros((data.n, data.t_max), dtype=np.int64)
    for r in range(data.n):
        z[r, : data.lengths[r]] = zs[data.perm[r]]
    return data, z


def test_mu_empty_state_draws_prior():
    rng = np.random.default_rng(3)
    data, z = _state_cohort({0: np.full((4, 5), 100.0)})
    ep = EmissionParams(np.zeros((3, 5)), np.ones((3, 5)))
    m0 = np.full((3, 5), 7.0)
    s0 = np.full((3, 5), 2.0)
    draws = np.array([update_mu(z, ep, data, m0, s0, rng)[2, 0] for _ in range(20_000)])
    assert stats.kstest(draws, stats.norm(7.0, 2.0).cdf).statistic < 0.015


def test_mu_flat_prior_limit():
    rng = np.random.default_rng(4)
    x = rng.normal(90, 10, size=(50, 5))
    data, z = _state_cohort({1: x})
    mean, _ = mu_posterior(50, x.sum(0), 10.0, 0.0, 1e6)
    np.testing.assert_allclose(mean, x.mean(0), atol=1e-3)


def test_mu_monte_carlo_moments():
    rng = np.random.default_rng(5)
    x = rng.normal(80, 12, size=(30, 5))
    data, z = _state_cohort({1: x})
    ep = EmissionParams(np.zeros((3, 5)), np.full((3, 5), 12.0))
    m0, s0 = np.full((3, 5), 70.0), np.full((3, 5), 5.0)
    n = 50_000
    draws = np.array([update_mu(z, ep, data, m0, s0, rng)[1, 2] for _ in range(n)])
    mean, sd = _mu_oracle(30, x[:, 2].mean(), 12.0, 70.0, 5.0)
    assert abs(draws.mean() - mean) < 3 * sd / math.sqrt(n)
    var_se = sd**2 * math.sqrt(2 / (n - 1))
    assert abs(draws.var(ddof=1) - sd**2) < 3 * var_se


def test_sigma_posterior_parameters():
    shape, scale = sigma2_posterior(100, 400.0, 0.001, 1000.0)
    assert shape == 0.001 + 50
    assert scale == 1000.0 + 200.0
    assert sigma2_posterior(0, 0.0, 0.001, 1000.0) == (0.001, 1000.0)


def test_sigma_monte_carlo_mean_spec_prior():
    rng = np.random.default_rng(6)
    a0, b0 = 0.001, 1000.0
    # 100 values at mu +/- 2 give SS = 400 exactly
    x = np.full((100, 5), 50.0)
    x[::2] += 2.0
    x[1::2] -= 2.0
    data, z = _state_cohort({0: x})
    mu = np.full((3, 5), 50.0)
    n = 1_000_000
    draws = np.sqrt(draw_inverse_gamma(np.full(n, a0 + 50), np.full(n, b0 + 200.0), rng)) ** 2
    alpha, beta = a0 + 50, b0 + 200
    mean = beta / (alpha - 1)
    sd = math.sqrt(beta**2 / ((alpha - 1) ** 2 * (alpha - 2)))
    assert abs(draws.mean() - mean) < 3 * sd / math.sqrt(n)
    # the same through update_sigma (state moments computed from the data)
    kd = np.array([update_sigma(z, mu, data, a0, b0, rng)[0, 0] ** 2 for _ in range(20_000)])
    assert abs(kd.mean() - mean) < 3 * sd / math.sqrt(len(kd))


def test_sigma_empty_state_prior_draw_is_positive():
    rng = np.random.default_rng(7)
    data, z = _state_cohort({0: np.full((3, 5), 1.0)})
    s = update_sigma(z, np.zeros((3, 5)), data, 0.001, 1000.0, rng)
    assert np.all(np.isfinite(s)) and np.all(s > 0)


# -- Metropolis-Hastings kernels ----------------------------------------------------------

class _FixedRng:
    def __init__(self, normal, uniform):
        self.normal, self.uniform = normal, uniform

    def standard_normal(self):
        return self.normal

    def random(self):
        return self.uniform


def test_beta_zero_data_always_accepts():
    rng = np.random.default_rng(8)
    counts = np.zeros((3, 3, 3), dtype=np.int64)
    cov = np.abs(rng.normal(2, 1, (3, 3)))
    beta = np.array([0.1, 0.2, 0.3])
    lam = np.array([0.9, 0.9, 0.9])
    for _ in range(500):
        _, acc = update_beta(beta, lam, counts, cov, np.full(3, 0.5), rng)
        assert acc.all()


def test_beta_infeasible_proposal_rejected():
    lam = np.array([0.99, 0.99, 0.99])
    cov = np.array([[-1.0, 0.0, 0.0]])
    target = math.log(1.0001 / 0.99)       # P_1 = 1.0001 at this beta_1
    step = 0.5
    beta = np.array([target * math.exp(step), 0.1, 0.1])
    counts = np.zeros((1, 3, 3), dtype=np.int64)
    p = lam[0] * math.exp(target)
    assert p == pytest.approx(1.0001)
    new, acc = update_beta(beta, lam, counts, cov, np.full(3, step), _FixedRng(-1.0, 1e-9))
    assert not acc[0] and new[0] == beta[0]
    assert transition_loglik(counts, cov, np.array([target, 0.1, 0.1]), lam) == -np.inf


def test_beta_proper_prior_recovered_in_log_space():
    # zero data and a Gamma(3, 2) prior: the log-space walk must return Gamma(3, 2)
    rng = np.random.default_rng(9)
    counts = np.zeros((1, 3, 3), dtype=np.int64)
    cov = np.zeros((1, 3))
    beta = np.ones(3)
    lam = np.full(3, 0.9)
    out = []
    for s in range(60_000):
        beta, _ = update_beta(beta, lam, counts, cov, np.full(3, 1.0), rng, 3.0, 2.0)
        if s % 3 == 0:
            out.append(beta[1])
    assert stats.kstest(out, stats.gamma(3, scale=0.5).cdf).statistic < 0.02


def _two_patient_fixture():
    counts = np.zeros((2, 3, 3), dtype=np.int64)
    counts[0, 1, STAY] = 1      # patient A: S2 stays, then worsens
    counts[0, 1, WORSEN] = 1
    counts[1, 1, IMPROVE] = 1   # patient B: S2 improves
    cov = np.array([[1.0, 0.0, 0.0], [2.0, 0.0, 0.0]])
    return counts, cov


def test_beta_matches_grid_posterior_small():
    counts, cov = _two_patient_fixture()
    lam = np.array([0.9, 0.9, 0.9])
    rng = np.random.default_rng(10)
    beta = np.array([0.5, 1.0, 1.0])
    draws = np.empty(100_000)
    for s in range(len(draws)):
        beta, _ = update_beta(beta, lam, counts, cov, np.full(3, 1.0), rng, 2.0, 2.0)
        draws[s] = beta[0]
    grid = np.linspace(1e-4, 6.0, 2001)
    w = oracles.beta_grid_posterior(grid, counts, cov, lam, 2.0, 2.0)
    edges = np.linspace(0, 3.0, 21)
    assert oracles.binned_tv(draws, grid, w, edges) <= 0.03


def test_lambda_prior_only():
    rng = np.random.default_rng(11)
    counts = np.zeros((1, 3, 3), dtype=np.int64)
    lam = np.full(3, 0.5)
    out = []
    for s in range(30_000):
        lam, _ = update_lambda(lam, np.full(3, 0.1), counts, np.ones((1, 3)), np.full(3, 1.5), rng)
        out.append(lam[0])
    assert stats.kstest(out[1000:], stats.beta(100, 2).cdf).statistic < 0.03


def test_lambda_matches_grid_posterior_small():
    counts, cov = _two_patient_fixture()
    beta = np.array([0.3, 0.1, 0.1])
    rng = np.random.default_rng(12)
    lam = np.full(3, 0.9)
    draws = np.empty(100_000)
    for s in range(len(draws)):
        lam, _ = update_lambda(lam, beta, counts, cov, np.full(3, 1.5), rng)
        draws[s] = lam[1]
    grid = np.linspace(0.0005, 0.9995, 2000)
    w = oracles.lambda_grid_posterior(grid, counts, cov, beta, 1, 100.0, 2.0)
    edges = np.linspace(0.85, 1.0, 21)
    assert oracles.binned_tv(draws, grid, w, edges) <= 0.03


def test_lambda_infeasible_rejected():
    cov = np.array([[-1.0, 0.0, 0.0]])
    beta = np.array([0.05, 0.1, 0.1])
    lam = np.full(3, 0.9)
    counts = np.zeros((1, 3, 3), dtype=np.int64)
    # proposal far into the upper tail pushes P_1 = lam * e^0.05 above 1
    new, acc = update_lambda(lam, beta, counts, cov, np.full(3, 1.0), _FixedRng(5.0, 1e-12))
    assert not acc.any() and np.array_equal(new, lam)
