"""Full-conditional Gibbs updates and Metropolis-Hastings kernels.

Transition moves out of transient state ``k`` are classified as improve
(``k -> k-1``, including ``S1 -> G``), stay, or worsen (``k -> k+1``,
including ``S3 -> D``). Improve and stay moves carry a factor ``P_k`` and
worsen moves ``1 - P_k``; ``gamma_k`` only splits the ``P_k`` mass, so its
full conditional is Beta and independent of ``beta`` and ``lambda``.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np
from scipy.special import expit, logit, logsumexp

from ..model import N_TRANSIENT, EmissionParams, TransitionParams, log_emissions, log_transition_matrices
from .data import NO_TERMINAL, CohortArrays

IMPROVE, STAY, WORSEN = 0, 1, 2
LOG_THIRD = -np.log(3.0)


class ImpossiblePathError(RuntimeError):
    pass


def padded_log_emissions(data: CohortArrays, ep: EmissionParams) -> np.ndarray:
    out = np.zeros((data.n, data.t_max, N_TRANSIENT))
    out[data.mask] = log_emissions(data.x_flat, ep)
    return out


def site_log_weights(z, log_a, log_e, lengths, terminal, t, rows) -> np.ndarray:
    """Unnormalised log p(z_t = k | rest) for k = S1..S3, for the given row slice.

    The left factor at t = 0 is the uniform initial distribution (a constant,
    omitted). The right factor is the move to ``z_{t+1}``, or to the terminal
    absorbing state when one is known, or absent.
    """
    la = log_a[rows]
    ar = np.arange(la.shape[0])
    w = log_e[rows, t].copy()
    if t > 0:
        w += la[ar, z[rows, t - 1] + 1, 1:4]
    has_next = lengths[rows] > t + 1
    if z.shape[1] > t + 1:
        col = np.where(has_next, z[rows, t + 1] + 1, terminal[rows])
    else:
        col = terminal[rows].copy()
    known = col != NO_TERMINAL
    right = la[ar, 1:4, np.where(known, col, 0)]
    w += np.where(known[:, None], right, 0.0)
    return w


def site_conditional(z, log_a, log_e, lengths, terminal, i: int, t: int) -> np.ndarray:
    """Normalised full conditional of one site, used by tests and diagnostics."""
    w = site_log_weights(z, log_a, log_e, lengths, terminal, t, slice(i, i + 1))[0]
    w = w - w.max()
    p = np.exp(w)
    return p / p.sum()


def _draw(w: np.ndarray, u: np.ndarray) -> np.ndarray:
    m = w.max(1)
    if not np.all(np.isfinite(m)):
        raise ImpossiblePathError("all three latent states have zero conditional probability")
    p = np.exp(w - m[:, None])
    c = np.cumsum(p, axis=1)
    ut = u * c[:, 2]
    k = (ut > c[:, 0]).astype(np.int64) + (ut > c[:, 1])
    ar = np.arange(len(k))
    bad = p[ar, k] == 0.0
    if bad.any():
        last = 2 - np.argmax(p[:, ::-1] > 0.0, axis=1)
        k[bad] = last[bad]
    return k


def _sweep_rows(z, log_a, log_e, u, data: CohortArrays, r0: int, r1: int) -> None:
    for t in range(data.t_max):
        hi = min(int(data.n_active[t]), r1)
        if hi <= r0:
            break
        rows = slice(r0, hi)
        w = site_log_weights(z, log_a, log_e, data.lengths, data.terminal, t, rows)
        z[rows, t] = _draw(w, u[rows, t])


def latent_sweep(z, log_a, log_e, data: CohortArrays, rng: np.random.Generator,
                 n_threads: int = 1) -> None:
    """One single-site Gibbs pass over every (patient, interval), in time order.

    Uniforms for the whole sweep are drawn up front from ``rng``, so the
    result does not depend on how rows are split across threads.
    """
    u = 1.0 - rng.random((data.n, data.t_max))
    if n_threads <= 1 or data.n < 2 * n_threads:
        _sweep_rows(z, log_a, log_e, u, data, 0, data.n)
        return
    bounds = np.linspace(0, data.n, n_threads + 1).astype(int)
    with ThreadPoolExecutor(n_threads) as pool:
        list(pool.map(lambda b: _sweep_rows(z, log_a, log_e, u, data, b[0], b[1]),
                      zip(bounds[:-1], bounds[1:])))


def forward_filter(log_a, log_e, data: CohortArrays) -> np.ndarray:
    """Log forward messages alpha (N, Tmax, 3) from a uniform S1..S3 start."""
    log_q = log_a[:, 1:4, 1:4]
    alpha = np.full((data.n, data.t_max, 3), -np.inf)
    alpha[:, 0] = log_e[:, 0] + LOG_THIRD
    for t in range(1, data.t_max):
        n = int(data.n_active[t])
        alpha[:n, t] = logsumexp(alpha[:n, t - 1, :, None] + log_q[:n], axis=1) + log_e[:n, t]
    return alpha


def _terminal_factor(log_a, data: CohortArrays) -> np.ndarray:
    known = data.terminal != NO_TERMINAL
    ar = np.arange(data.n)
    return np.where(known[:, None], log_a[ar, 1:4, np.where(known, data.terminal, 0)], 0.0)


def _backward_rows(z, alpha, log_q, end, u, data: CohortArrays, r0: int, r1: int) -> None:
    for t in range(data.t_max - 1, -1, -1):
        hi = min(int(data.n_active[t]), r1)
        if hi <= r0:
            continue
        rows = slice(r0, hi)
        w = alpha[rows, t] + end[rows]
        if t + 1 < data.t_max:
            has_next = data.lengths[rows] > t + 1
            ar = np.arange(hi - r0)
            nxt = log_q[rows][ar, :, z[rows, t + 1]]
            w = np.where(has_next[:, None], alpha[rows, t] + nxt, w)
        z[rows, t] = _draw(w, u[rows, t])


def backward_sample(z, alpha, log_a, data: CohortArrays, rng: np.random.Generator,
                    n_threads: int = 1) -> None:
    """Draw every path from p(z | x) given precomputed forward messages."""
    u = 1.0 - rng.random((data.n, data.t_max))
    log_q = log_a[:, 1:4, 1:4]
    end = _terminal_factor(log_a, data)
    if n_threads <= 1 or data.n < 2 * n_threads:
        _backward_rows(z, alpha, log_q, end, u, data, 0, data.n)
        return
    bounds = np.linspace(0, data.n, n_threads + 1).astype(int)
    with ThreadPoolExecutor(n_threads) as pool:
        list(pool.map(lambda b: _backward_rows(z, alpha, log_q, end, u, data, b[0], b[1]),
                      zip(bounds[:-1], bounds[1:])))


def ffbs_sweep(z, log_a, log_e, data: CohortArrays, rng: np.random.Generator,
               n_threads: int = 1) -> None:
    """Blocked update: each patient's whole path drawn exactly by forward
    filtering, backward sampling."""
    backward_sample(z, forward_filter(log_a, log_e, data), log_a, data, rng, n_threads)


LATENT_SCHEMES = {"single-site": latent_sweep, "blocked": ffbs_sweep}


def update_latents(z, tp: TransitionParams, ep: EmissionParams, data: CohortArrays,
                   rng: np.random.Generator, n_threads: int = 1, scheme: str = "single-site") -> None:
    log_a = log_transition_matrices(tp, data.cov)
    log_e = padded_log_emissions(data, ep)
    LATENT_SCHEMES[scheme](z, log_a, log_e, data, rng, n_threads)


def transition_counts(z: np.ndarray, data: CohortArrays) -> np.ndarray:
    """Per-patient move counts, shape (N, 3 states, 3 moves [improve, stay, worsen])."""
    n, t_max = z.shape
    counts = np.zeros(n * 9, dtype=np.int64)
    if t_max > 1:
        src = z[:, :-1]
        move = z[:, 1:] - src + 1
        valid = data.mask[:, 1:]
        rows = np.broadcast_to(np.arange(n)[:, None], src.shape)
        idx = (rows[valid] * 3 + src[valid]) * 3 + move[valid]
        counts += np.bincount(idx, minlength=n * 9)
    term = data.terminal
    has = term != NO_TERMINAL
    if has.any():
        r = np.flatnonzero(has)
        last = z[r, data.lengths[r] - 1]
        move = np.where(term[r] == 0, IMPROVE, WORSEN)
        np.add.at(counts, (r * 3 + last) * 3 + move, 1)
    return counts.reshape(n, 3, 3)


def update_gamma(counts: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """gamma_k ~ Beta(n_improve + 1, n_stay + 1) under the U(0, 1) prior."""
    tot = counts.sum(0)
    return rng.beta(tot[:, IMPROVE] + 1.0, tot[:, STAY] + 1.0)


def state_moments(z: np.ndarray, data: CohortArrays, mu: np.ndarray | None = None):
    """Per-state counts, sums and (if ``mu`` given) squared deviations around ``mu``."""
    zf = z[data.mask]
    xf = data.x_flat
    n = np.bincount(zf, minlength=3).astype(float)
    sums = np.stack([np.bincount(zf, weights=xf[:, d], minlength=3) for d in range(5)], axis=1)
    if mu is None:
        return n, sums
    dev = xf - mu[zf]
    ss = np.stack([np.bincount(zf, weights=dev[:, d] ** 2, minlength=3) for d in range(5)], axis=1)
    return n, sums, ss


def mu_posterior(n, xsum, sigma, m0, s0):
    """Normal-normal conjugate posterior (mean, sd) of an emission mean."""
    prec = 1.0 / s0**2 + n / sigma**2
    mean = (m0 / s0**2 + xsum / sigma**2) / prec
    return mean, 1.0 / np.sqrt(prec)


def update_mu(z, ep: EmissionParams, data: CohortArrays, m0, s0, rng) -> np.ndarray:
    n, sums = state_moments(z, data)
    mean, sd = mu_posterior(n[:, None], sums, ep.sigma, m0, s0)
    return mean + sd * rng.standard_normal(mean.shape)


def sigma2_posterior(n, ss, a0, b0):
    """Inverse-gamma (shape, scale) posterior of an emission variance."""
    return a0 + 0.5 * n, b0 + 0.5 * ss


# Keeps prior-only draws under a near-improper prior representable.
_LOG_VAR_BOUNDS = (-600.0, 600.0)


def draw_inverse_gamma(shape, scale, rng) -> np.ndarray:
    shape = np.asarray(shape, dtype=float)
    g = rng.standard_gamma(shape)
    with np.errstate(divide="ignore"):
        log_var = np.log(scale) - np.log(g)
    return np.exp(np.clip(log_var, *_LOG_VAR_BOUNDS))


def update_sigma(z, mu, data: CohortArrays, a0, b0, rng) -> np.ndarray:
    n, _, ss = state_moments(z, data, mu)
    shape, scale = sigma2_posterior(n[:, None], ss, a0, b0)
    return np.sqrt(draw_inverse_gamma(shape, scale, rng))


def transition_loglik(counts: np.ndarray, cov: np.ndarray, beta, lam, states=None) -> float:
    """log-likelihood of the P_k / (1 - P_k) factors; -inf if any P_k leaves (0, 1].

    Feasibility is checked for every patient, whether or not it has moves.
    ``states`` restricts the sum (and the check) to some transient states.
    """
    scale = np.exp(-(cov @ np.asarray(beta, dtype=float)))
    ks = range(3) if states is None else np.atleast_1d(states)
    stay, worse = _move_totals(counts)
    return float(sum(_state_loglik(lam[k], scale, stay[:, k], worse[:, k]) for k in ks))


def _move_totals(counts: np.ndarray):
    """Per patient and state: (improve + stay) counts and worsen counts."""
    return counts[:, :, IMPROVE] + counts[:, :, STAY], counts[:, :, WORSEN]


def _state_loglik(lam_k: float, scale: np.ndarray, stay: np.ndarray, worse: np.ndarray) -> float:
    p = lam_k * scale
    if not (p.min() > 0.0 and p.max() <= 1.0):
        return -np.inf
    ll = float(stay @ np.log(p))
    if worse.any():
        sel = worse > 0
        ll += float(worse[sel] @ np.log1p(-p[sel]))
    return ll


def update_beta(beta, lam, counts, cov, steps, rng, prior_shape=0.0, prior_rate=0.0):
    """Per-coordinate random walk on log beta.

    Target density in log space is likelihood x Gamma(shape, rate) prior x
    Jacobian beta, i.e. ``ll + shape * log(beta) - rate * beta``; with the
    improper Gamma(0, 0) default the prior and Jacobian cancel exactly.
    Returns (new beta, accepted flags).
    """
    beta = np.array(beta, dtype=float)
    accepted = np.zeros(3, dtype=bool)
    stay, worse = _move_totals(counts)
    eta = cov @ beta

    def loglik(e):
        scale = np.exp(-e)
        return sum(_state_loglik(lam[k], scale, stay[:, k], worse[:, k]) for k in range(3))

    ll = loglik(eta)
    for j in range(3):
        eps = rng.standard_normal()
        log_u = np.log(rng.random())
        prop_j = beta[j] * np.exp(steps[j] * eps)
        eta_new = eta + cov[:, j] * (prop_j - beta[j])
        ll_new = loglik(eta_new)
        if ll_new == -np.inf:
            continue
        log_ratio = (ll_new - ll + prior_shape * (np.log(prop_j) - np.log(beta[j]))
                     - prior_rate * (prop_j - beta[j]))
        if log_u < log_ratio:
            beta[j], eta, ll = prop_j, eta_new, ll_new
            accepted[j] = True
    return beta, accepted


def update_lambda(lam, beta, counts, cov, steps, rng, prior_a=100.0, prior_b=2.0):
    """Per-state random walk on logit lambda with the Beta(a, b) prior.

    Target in logit space: ``ll + a log(lam) + b log(1 - lam)`` (prior x Jacobian).
    """
    lam = np.array(lam, dtype=float)
    accepted = np.zeros(3, dtype=bool)
    stay, worse = _move_totals(counts)
    scale = np.exp(-(cov @ np.asarray(beta, dtype=float)))
    for k in range(3):
        eps = rng.standard_normal()
        log_u = np.log(rng.random())
        prop = float(expit(logit(lam[k]) + steps[k] * eps))
        if not 0.0 < prop < 1.0:
            continue
        ll_new = _state_loglik(prop, scale, stay[:, k], worse[:, k])
        if ll_new == -np.inf:
            continue
        ll = _state_loglik(lam[k], scale, stay[:, k], worse[:, k])
        log_ratio = (ll_new - ll + prior_a * (np.log(prop) - np.log(lam[k]))
                     + prior_b * (np.log1p(-prop) - np.log1p(-lam[k])))
        if log_u < log_ratio:
            lam[k] = prop
            accepted[k] = True
    return lam, accepted
