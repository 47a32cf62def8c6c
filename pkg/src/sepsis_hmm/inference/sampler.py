"""Metropolis-Hastings-within-Gibbs sampler over latent states and global parameters."""
from __future__ import annotations

import dataclasses
import json
import logging
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from ..model import (
    Cohort,
    EmissionParams,
    InfeasibleParametersError,
    ModelParams,
    PatientEpisode,
    TransitionParams,
    param_names,
    validate_params,
)
from .data import NO_TERMINAL, CohortArrays
from .kernels import (
    LATENT_SCHEMES,
    transition_counts,
    update_beta,
    update_gamma,
    update_lambda,
    update_latents,
    update_mu,
    update_sigma,
)

log = logging.getLogger(__name__)

TARGET_ACCEPTANCE = 0.3
ADAPT_WINDOW = 50
ACCEPTANCE_WARN_RANGE = (0.1, 0.6)


EXECUTION_FIELDS = ("n_threads",)


class InitializationError(RuntimeError):
    pass


@dataclass
class SamplerConfig:
    n_sweeps: int = 10_000
    n_keep: int = 2_000
    seed: int = 0
    beta_log_step: float = 0.2
    lambda_logit_step: float = 0.2
    adapt_burnin: Optional[int] = None  # default: min(2000, n_sweeps - n_keep)
    mu_prior_mean: Optional[List[List[float]]] = None  # default: cohort mean per vital
    mu_prior_sd: Optional[List[List[float]]] = None    # default: 10 x cohort sd per vital
    sigma_prior_shape: float = 0.001
    sigma_prior_scale: float = 0.001
    beta_prior_shape: float = 0.0
    beta_prior_rate: float = 0.0
    lambda_prior_a: float = 100.0
    lambda_prior_b: float = 2.0
    use_outcomes: bool = True
    keep_latents: bool = False
    n_threads: int = 1
    latent_scheme: str = "single-site"

    def __post_init__(self):
        if not 1 <= self.n_keep <= self.n_sweeps:
            raise ValueError(f"need 1 <= n_keep ({self.n_keep}) <= n_sweeps ({self.n_sweeps})")
        if not (self.beta_log_step > 0 and self.lambda_logit_step > 0):
            raise ValueError("proposal step sizes must be > 0")
        if self.latent_scheme not in LATENT_SCHEMES:
            raise ValueError(f"latent_scheme must be one of {sorted(LATENT_SCHEMES)}")
        if self.adapt_burnin is None:
            self.adapt_burnin = min(2000, self.n_sweeps - self.n_keep)
        if not 0 <= self.adapt_burnin <= self.n_sweeps - self.n_keep:
            raise ValueError("adapt_burnin must end before the kept window")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def identity(self) -> dict:
        """Fields that affect the draws (thread count does not)."""
        return {k: v for k, v in self.to_dict().items() if k not in EXECUTION_FIELDS}

    @classmethod
    def from_dict(cls, d: dict) -> "SamplerConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown sampler config fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ChainState:
    params: ModelParams
    z: np.ndarray
    sweep: int
    beta_step: np.ndarray
    lambda_step: np.ndarray
    m0: np.ndarray
    s0: np.ndarray
    rng: np.random.Generator
    accept: dict = field(default_factory=lambda: {
        "beta": np.zeros(3), "lambda": np.zeros(3), "proposals": 0,
        "window_beta": np.zeros(3), "window_lambda": np.zeros(3), "window_n": 0})


@dataclass
class PosteriorChain:
    sweeps: np.ndarray            # (n,)
    values: np.ndarray            # (n, n_params) in param_names() order
    acceptance: dict
    config: dict
    latents: Optional[list] = None

    def __len__(self) -> int:
        return len(self.sweeps)

    @property
    def names(self) -> List[str]:
        return param_names()

    def params(self, i: int) -> ModelParams:
        return ModelParams.from_flat(dict(zip(self.names, self.values[i])))

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.names.index(name)]

    def interval(self, name: str, level: float = 0.95):
        a = (1.0 - level) / 2
        return tuple(np.quantile(self.column(name), [a, 1.0 - a]))


def _feasible_path(t_len: int, target: int | None, rng) -> np.ndarray:
    z = np.empty(t_len, dtype=np.int64)
    prev = None
    for t in range(t_len):
        cand = [k for k in range(3) if prev is None or abs(k - prev) <= 1]
        if target is not None:
            cand = [k for k in cand if abs(k - target) <= t_len - 1 - t]
        prev = cand[int(rng.integers(len(cand)))]
        z[t] = prev
    return z


def random_latents(data: CohortArrays, rng) -> np.ndarray:
    """Uniform random paths consistent with banded moves and any known terminal state."""
    z = np.zeros((data.n, data.t_max), dtype=np.int64)
    for r in range(data.n):
        term = data.terminal[r]
        target = None if term == NO_TERMINAL else (0 if term == 0 else 2)
        z[r, : data.lengths[r]] = _feasible_path(int(data.lengths[r]), target, rng)
    return z


def init_chain(data: CohortArrays, config: SamplerConfig, rng: np.random.Generator) -> ChainState:
    xf = data.x_flat
    mean, sd = xf.mean(0), xf.std(0)
    sd = np.where(sd > 0, sd, 1.0)
    m0 = np.broadcast_to(mean, (3, 5)).copy() if config.mu_prior_mean is None \
        else np.asarray(config.mu_prior_mean, float)
    s0 = np.broadcast_to(10.0 * sd, (3, 5)).copy() if config.mu_prior_sd is None \
        else np.asarray(config.mu_prior_sd, float)
    z = random_latents(data, rng)
    mu = mean + 0.1 * sd * rng.standard_normal((3, 5))
    sigma = np.broadcast_to(sd, (3, 5)).copy()
    lam = np.full(3, config.lambda_prior_a / (config.lambda_prior_a + config.lambda_prior_b))
    gamma = np.full(3, 0.5)
    beta = np.full(3, 0.1)
    for _ in range(200):
        p = lam[None] * np.exp(-(data.cov @ beta))[:, None]
        if np.all((p > 0) & (p <= 1)):
            break
        beta *= 0.5
    else:
        raise InitializationError("no feasible beta: covariates make P_k > 1 even as beta -> 0")
    params = ModelParams(TransitionParams(beta, lam, gamma), EmissionParams(mu, sigma))
    bad = validate_params(params)
    if bad:
        raise InitializationError("; ".join(bad))
    return ChainState(params, z, 0, np.full(3, config.beta_log_step),
                      np.full(3, config.lambda_logit_step), m0, s0, rng)


def sweep(state: ChainState, data: CohortArrays, config: SamplerConfig) -> None:
    """One sweep, updating latents, gamma, mu, sigma, beta and lambda in that order."""
    rng = state.rng
    tp, ep = state.params.transition, state.params.emission
    update_latents(state.z, tp, ep, data, rng, config.n_threads, config.latent_scheme)
    counts = transition_counts(state.z, data)
    tp.gamma = update_gamma(counts, rng)
    ep.mu = update_mu(state.z, ep, data, state.m0, state.s0, rng)
    ep.sigma = update_sigma(state.z, ep.mu, data, config.sigma_prior_shape,
                            config.sigma_prior_scale, rng)
    tp.beta, acc_b = update_beta(tp.beta, tp.lam, counts, data.cov, state.beta_step, rng,
                                 config.beta_prior_shape, config.beta_prior_rate)
    tp.lam, acc_l = update_lambda(tp.lam, tp.beta, counts, data.cov, state.lambda_step, rng,
                                  config.lambda_prior_a, config.lambda_prior_b)
    state.sweep += 1
    acc = state.accept
    if state.sweep <= config.adapt_burnin:
        acc["window_beta"] += acc_b
        acc["window_lambda"] += acc_l
        acc["window_n"] += 1
        if acc["window_n"] == ADAPT_WINDOW:
            state.beta_step *= np.exp(acc["window_beta"] / ADAPT_WINDOW - TARGET_ACCEPTANCE)
            state.lambda_step *= np.exp(acc["window_lambda"] / ADAPT_WINDOW - TARGET_ACCEPTANCE)
            acc["window_beta"][:] = 0
            acc["window_lambda"][:] = 0
            acc["window_n"] = 0
    else:
        acc["beta"] += acc_b
        acc["lambda"] += acc_l
        acc["proposals"] += 1


def acceptance_rates(state: ChainState) -> dict:
    n = max(state.accept["proposals"], 1)
    return {"beta": (state.accept["beta"] / n).tolist(),
            "lambda": (state.accept["lambda"] / n).tolist(),
            "proposals": int(state.accept["proposals"])}


# -- checkpointing ---------------------------------------------------------

def save_checkpoint(path, state: ChainState, data: CohortArrays, config: SamplerConfig,
                    kept_sweeps, kept_values, kept_latents=None) -> None:
    meta = {
        "sweep": state.sweep,
        "rng": state.rng.bit_generator.state,
        "config": config.identity(),
        "fingerprint": data.fingerprint(),
        "accept_proposals": state.accept["proposals"],
        "window_n": state.accept["window_n"],
    }
    arrays = dict(
        params=np.array(list(state.params.flatten().values())),
        z=state.z, beta_step=state.beta_step, lambda_step=state.lambda_step,
        m0=state.m0, s0=state.s0,
        acc_beta=state.accept["beta"], acc_lambda=state.accept["lambda"],
        win_beta=state.accept["window_beta"], win_lambda=state.accept["window_lambda"],
        kept_sweeps=np.asarray(kept_sweeps, dtype=np.int64),
        kept_values=np.asarray(kept_values, dtype=float).reshape(-1, len(param_names())),
        meta=np.array(json.dumps(meta)),
    )
    if kept_latents:
        arrays["kept_latents"] = np.stack(kept_latents)
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)


def load_checkpoint(path, data: CohortArrays, config: SamplerConfig):
    with np.load(path) as f:
        arrays = {k: f[k] for k in f.files}
    meta = json.loads(str(arrays["meta"]))
    if meta["fingerprint"] != data.fingerprint():
        raise ValueError(f"checkpoint {path} was written for a different cohort")
    if meta["config"] != config.identity():
        raise ValueError(f"checkpoint {path} was written with a different sampler config")
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    params = ModelParams.from_flat(dict(zip(param_names(), arrays["params"])))
    state = ChainState(params, arrays["z"].copy(), meta["sweep"], arrays["beta_step"].copy(),
                       arrays["lambda_step"].copy(), arrays["m0"], arrays["s0"], rng)
    state.accept = {
        "beta": arrays["acc_beta"].copy(), "lambda": arrays["acc_lambda"].copy(),
        "proposals": meta["accept_proposals"],
        "window_beta": arrays["win_beta"].copy(), "window_lambda": arrays["win_lambda"].copy(),
        "window_n": meta["window_n"],
    }
    latents = list(arrays["kept_latents"]) if "kept_latents" in arrays else []
    return state, list(arrays["kept_sweeps"]), list(arrays["kept_values"]), latents


# -- driver ------------------------------------------------------------------

def _episodes(cohort) -> Sequence[PatientEpisode]:
    return cohort.episodes if isinstance(cohort, Cohort) else list(cohort)


def run_sampler(cohort, config: SamplerConfig, *, checkpoint_path=None, checkpoint_every: int = 0,
                resume: bool = False, writer=None, stop_after: Optional[int] = None,
                progress_every: int = 0) -> PosteriorChain:
    """Run ``config.n_sweeps`` sweeps and keep the last ``config.n_keep`` samples.

    ``writer`` (a PosteriorWriter) receives each kept sample as it is drawn.
    With ``resume`` the chain continues bitwise-identically from
    ``checkpoint_path``. ``stop_after`` halts early (used to exercise resume).
    """
    episodes = _episodes(cohort)
    data = CohortArrays.build(episodes, config.use_outcomes)
    first_kept = config.n_sweeps - config.n_keep + 1
    if resume:
        state, kept_sweeps, kept_values, kept_latents = load_checkpoint(checkpoint_path, data, config)
        if writer is not None:
            writer.truncate_after(state.sweep)
    else:
        rng = np.random.default_rng(config.seed)
        try:
            state = init_chain(data, config, rng)
        except InfeasibleParametersError as exc:
            raise InitializationError(str(exc)) from exc
        kept_sweeps, kept_values, kept_latents = [], [], []
    end = config.n_sweeps if stop_after is None else min(stop_after, config.n_sweeps)
    while state.sweep < end:
        sweep(state, data, config)
        if state.sweep >= first_kept:
            row = list(state.params.flatten().values())
            kept_sweeps.append(state.sweep)
            kept_values.append(row)
            if config.keep_latents:
                kept_latents.append(state.z.copy())
            if writer is not None:
                writer.append(state.sweep, row)
        if checkpoint_path and checkpoint_every and state.sweep % checkpoint_every == 0:
            save_checkpoint(checkpoint_path, state, data, config, kept_sweeps, kept_values,
                            kept_latents)
            if writer is not None:
                writer.flush()
        if progress_every and state.sweep % progress_every == 0:
            log.info("sweep %d/%d", state.sweep, config.n_sweeps)
    rates = acceptance_rates(state)
    if state.sweep == config.n_sweeps and rates["proposals"] > 0:
        lo, hi = ACCEPTANCE_WARN_RANGE
        for kind in ("beta", "lambda"):
            for j, r in enumerate(rates[kind]):
                if not lo <= r <= hi:
                    warnings.warn(f"{kind}[{j}] acceptance rate {r:.3f} outside [{lo}, {hi}]",
                                  RuntimeWarning, stacklevel=2)
    latents = None
    if config.keep_latents:
        latents = [data.unpermute(zk) for zk in kept_latents]
    return PosteriorChain(np.asarray(kept_sweeps, dtype=np.int64),
                          np.asarray(kept_values, dtype=float).reshape(-1, len(param_names())),
                          rates, config.to_dict(), latents)
