"""Held-out trajectory decoding with the global parameters frozen."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from ..model import (
    EmissionParams,
    ModelParams,
    Outcome,
    PatientEpisode,
    log_emissions,
    log_transition_matrices,
    transition_matrix,
)
from .data import CohortArrays
from .kernels import LATENT_SCHEMES, backward_sample, forward_filter, latent_sweep, padded_log_emissions
from .sampler import random_latents


@dataclass
class DecodeConfig:
    n_sweeps: int = 3_000
    n_keep: int = 2_000
    seed: int = 0
    use_outcome: bool = False
    n_threads: int = 1
    latent_scheme: str = "blocked"

    def __post_init__(self):
        if self.latent_scheme not in LATENT_SCHEMES:
            raise ValueError(f"latent_scheme must be one of {sorted(LATENT_SCHEMES)}")
        if not 1 <= self.n_keep <= self.n_sweeps:
            raise ValueError(f"need 1 <= n_keep ({self.n_keep}) <= n_sweeps ({self.n_sweeps})")


@dataclass
class DecodeResult:
    states: np.ndarray   # (T,) marginal MAP transient index, 0..2
    probs: np.ndarray    # (T, 3) empirical state frequencies


def decode_cohort(episodes: Sequence[PatientEpisode], mp: ModelParams,
                  config: Optional[DecodeConfig] = None) -> List[DecodeResult]:
    """Latent-only Gibbs for every episode at once; globals stay fixed.

    Reports per-interval state frequencies over the last ``n_keep`` sweeps and
    their argmax (ties toward lower severity).
    """
    config = config or DecodeConfig()
    data = CohortArrays.build(list(episodes), config.use_outcome)
    log_a = log_transition_matrices(mp.transition, data.cov)
    log_e = padded_log_emissions(data, mp.emission)
    rng = np.random.default_rng(config.seed)
    z = random_latents(data, rng)
    counts = np.zeros((data.n, data.t_max, 3))
    first_kept = config.n_sweeps - config.n_keep
    if config.latent_scheme == "blocked":
        alpha = forward_filter(log_a, log_e, data)

        def step():
            backward_sample(z, alpha, log_a, data, rng, config.n_threads)
    else:
        def step():
            latent_sweep(z, log_a, log_e, data, rng, config.n_threads)
    for s in range(config.n_sweeps):
        step()
        if s >= first_kept:
            for k in range(3):
                counts[..., k] += z == k
    probs = counts / config.n_keep
    return [DecodeResult(np.argmax(p, axis=1), p) for p in data.unpermute(probs)]


def decode(episode: PatientEpisode, mp: ModelParams,
           config: Optional[DecodeConfig] = None) -> DecodeResult:
    return decode_cohort([episode], mp, config)[0]


def forward_backward(episode: PatientEpisode, mp: ModelParams, use_outcome: bool = False) -> np.ndarray:
    """Exact per-interval posterior marginals over S1..S3, shape (T, 3)."""
    a = transition_matrix(mp.transition, episode.covariates)
    with np.errstate(divide="ignore"):
        log_a = np.log(a)
    log_q = log_a[1:4, 1:4]
    log_e = log_emissions(episode.vitals, mp.emission)
    t_len = len(log_e)
    end = np.zeros(3)
    if use_outcome and episode.outcome != Outcome.CENSORED:
        end = log_a[1:4, 0 if episode.outcome == Outcome.DISCHARGED else 4]
    alpha = np.empty((t_len, 3))
    alpha[0] = -np.log(3.0) + log_e[0]
    for t in range(1, t_len):
        alpha[t] = logsumexp(alpha[t - 1][:, None] + log_q, axis=0) + log_e[t]
    beta = np.empty((t_len, 3))
    beta[-1] = end
    for t in range(t_len - 2, -1, -1):
        beta[t] = logsumexp(log_q + (log_e[t + 1] + beta[t + 1])[None, :], axis=1)
    post = alpha + beta
    post -= logsumexp(post, axis=1, keepdims=True)
    return np.exp(post)


def decode_accuracy(results: Sequence[DecodeResult], truths: Sequence[np.ndarray]):
    """(pooled per-interval accuracy, mean of per-episode accuracies)."""
    hits = np.concatenate([r.states == t for r, t in zip(results, truths)])
    per_ep = [np.mean(r.states == t) for r, t in zip(results, truths)]
    return float(hits.mean()), float(np.mean(per_ep))
