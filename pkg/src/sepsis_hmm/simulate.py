"""Forward simulation of synthetic cohorts from known parameters."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from .model import (
    Cohort,
    Covariates,
    EmissionParams,
    InfeasibleParametersError,
    LatentState,
    ModelParams,
    Outcome,
    PatientEpisode,
    TransitionParams,
    transition_matrix,
)

# Published marginal MAP emission estimates; rows S1..S3, columns (SBP, DBP, HR, RR, Temp).
DEFAULT_EMISSION_MU = np.array([
    [118.6, 63.4, 76.7, 18.7, 98.0],
    [143.4, 77.2, 83.3, 19.1, 98.1],
    [116.4, 62.7, 95.6, 21.1, 98.6],
])
DEFAULT_EMISSION_SIGMA = np.array([
    [15.1, 9.3, 12.1, 1.6, 0.8],
    [16.3, 10.0, 14.5, 1.9, 0.8],
    [17.5, 11.2, 16.4, 4.9, 1.3],
])

# Transition defaults are not reported; these keep P_k <= 1 with > 5 sd margin
# under the default covariate distribution and sit at the Beta(100, 2) mode for lambda.
DEFAULT_BETA = (0.02, 0.03, 0.02)
DEFAULT_LAMBDA = (0.99, 0.99, 0.99)
DEFAULT_GAMMA = (0.20, 0.25, 0.30)
DEFAULT_COVARIATE_DISTRIBUTION = ((3.0, 1.0), (3.0, 1.0), (3.0, 1.0))
DEFAULT_HORIZON = 60


def default_ground_truth() -> ModelParams:
    return ModelParams(
        TransitionParams(DEFAULT_BETA, DEFAULT_LAMBDA, DEFAULT_GAMMA),
        EmissionParams(DEFAULT_EMISSION_MU.copy(), DEFAULT_EMISSION_SIGMA.copy()),
    )


@dataclass
class CohortSpec:
    n_patients: int
    max_intervals: int = DEFAULT_HORIZON
    covariate_distribution: Tuple[Tuple[float, float], ...] = DEFAULT_COVARIATE_DISTRIBUTION
    seed: int = 0
    id_prefix: str = "P"

    def __post_init__(self):
        self.covariate_distribution = tuple(tuple(float(v) for v in md)
                                            for md in self.covariate_distribution)
        if self.n_patients < 1:
            raise ValueError(f"n_patients must be >= 1, got {self.n_patients}")
        if self.max_intervals < 2:
            raise ValueError(f"max_intervals must be >= 2, got {self.max_intervals}")
        if len(self.covariate_distribution) != 3:
            raise ValueError("covariate_distribution needs one (mean, sd) per covariate")
        for mean, sd in self.covariate_distribution:
            if not sd > 0:
                raise ValueError(f"covariate sd must be > 0, got {sd}")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")


@dataclass
class SimulatedEpisode:
    episode: PatientEpisode
    true_states: np.ndarray = field(repr=False)  # transient indices 0..2, one per interval


def patient_rng(seed: int, index: int) -> np.random.Generator:
    """Independent substream for patient ``index``; insensitive to generation order."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


def simulate_episode(mp: ModelParams, c: Covariates, initial_state, horizon: int,
                     rng: np.random.Generator, episode_id: str = "0") -> SimulatedEpisode:
    """Emit vitals from the current state, then transition, until absorption or ``horizon``."""
    a = transition_matrix(mp.transition, c)
    cum = np.cumsum(a, axis=1)
    cum[:, -1] = 1.0
    s = int(LatentState(initial_state))
    if s in (LatentState.G, LatentState.D):
        raise ValueError("initial state must be transient")
    mu, sd = mp.emission.mu, mp.emission.sigma
    states, vitals = [], []
    outcome = Outcome.CENSORED
    for _ in range(horizon):
        k = s - 1
        states.append(k)
        vitals.append(mu[k] + sd[k] * rng.standard_normal(5))
        s = int(np.searchsorted(cum[s], rng.random(), side="right"))
        if s == LatentState.G:
            outcome = Outcome.DISCHARGED
            break
        if s == LatentState.D:
            outcome = Outcome.DIED
            break
    ep = PatientEpisode(episode_id, c, np.array(vitals), outcome)
    return SimulatedEpisode(ep, np.array(states, dtype=np.int8))


def sample_covariates(spec: CohortSpec, rng: np.random.Generator) -> Covariates:
    return Covariates.from_array([rng.normal(m, s) for m, s in spec.covariate_distribution])


def simulate_cohort(mp: ModelParams, spec: CohortSpec) -> List[SimulatedEpisode]:
    width = len(str(spec.n_patients - 1))
    out = []
    for i in range(spec.n_patients):
        rng = patient_rng(spec.seed, i)
        c = sample_covariates(spec, rng)
        init = LatentState.S1 + int(rng.integers(3))
        try:
            sim = simulate_episode(mp, c, init, spec.max_intervals, rng,
                                   episode_id=f"{spec.id_prefix}{i:0{width}d}")
        except InfeasibleParametersError as exc:
            raise InfeasibleParametersError(exc.k, exc.p, patient=i) from None
        out.append(sim)
    return out


def as_cohort(sims: Sequence[SimulatedEpisode]) -> Cohort:
    return Cohort([s.episode for s in sims])


def absorption_probabilities(mp: ModelParams, c, horizon: int | None = None) -> np.ndarray:
    """P(discharged), P(died), P(censored) from a uniform transient start.

    Exact: a linear solve on the fundamental matrix when ``horizon`` is None,
    otherwise ``horizon`` steps of the state distribution.
    """
    a = transition_matrix(mp.transition, c)
    start = np.array([0.0, 1 / 3, 1 / 3, 1 / 3, 0.0])
    if horizon is None:
        q = a[1:4, 1:4]
        r = a[1:4][:, [0, 4]]
        absorbed = start[1:4] @ np.linalg.solve(np.eye(3) - q, r)
        return np.array([absorbed[0], absorbed[1], 0.0])
    dist = start
    for _ in range(horizon):
        dist = dist @ a
    return np.array([dist[0], dist[4], dist[1:4].sum()])
