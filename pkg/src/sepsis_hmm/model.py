"""Domain types and the numerical kernel of the sepsis progression HMM.

States are ordered ``G, S1, S2, S3, D``. Only the three transient states
emit vital signs; ``G`` (discharged) and ``D`` (death) are absorbing and
observed. Transitions out of transient state ``k`` follow a proportional
hazards form with ``P_k = lambda_k * exp(-beta . c)`` for patient
covariates ``c``.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

VITALS = ("sbp", "dbp", "hr", "rr", "temp")
VITAL_NAMES = ("systolic_bp", "diastolic_bp", "heart_rate", "respiratory_rate", "temperature")
COVARIATES = ("age", "laps2", "cops2")
TRANSIENT = ("S1", "S2", "S3")
N_TRANSIENT = 3
N_VITALS = 5

LOG_2PI = math.log(2.0 * math.pi)


class LatentState(enum.IntEnum):
    G = 0
    S1 = 1
    S2 = 2
    S3 = 3
    D = 4

    @property
    def absorbing(self) -> bool:
        return self in (LatentState.G, LatentState.D)

    @property
    def transient_index(self) -> int:
        """Row index (0..2) into emission / transition parameter arrays."""
        if self.absorbing:
            raise ValueError(f"{self.name} is absorbing and has no transient index")
        return int(self) - 1


class Outcome(str, enum.Enum):
    DISCHARGED = "Discharged"
    DIED = "Died"
    CENSORED = "Censored"


class InfeasibleParametersError(ValueError):
    """Raised when some ``P_k`` falls outside ``(0, 1]``.

    The MH kernels treat this as a rejection signal.
    """

    def __init__(self, k: int, p: float, patient: int | None = None):
        self.k = k
        self.p = p
        self.patient = patient
        where = "" if patient is None else f" for patient {patient}"
        super().__init__(f"P_{k + 1} = {p!r} outside (0, 1]{where}")


class CovariateDomainError(ValueError):
    pass


@dataclass(frozen=True)
class VitalSigns:
    systolic_bp: float
    diastolic_bp: float
    heart_rate: float
    respiratory_rate: float
    temperature: float

    def as_array(self) -> np.ndarray:
        return np.array([self.systolic_bp, self.diastolic_bp, self.heart_rate,
                         self.respiratory_rate, self.temperature], dtype=float)

    @classmethod
    def from_array(cls, x: Sequence[float]) -> "VitalSigns":
        return cls(*(float(v) for v in x))

    def violations(self) -> List[str]:
        x = self.as_array()
        out = []
        if not np.all(np.isfinite(x)):
            out.append("vital signs not all finite")
            return out
        if not self.systolic_bp > self.diastolic_bp > 0:
            out.append("require systolic_bp > diastolic_bp > 0")
        if not self.heart_rate > 0:
            out.append("heart_rate not > 0")
        if not self.respiratory_rate > 0:
            out.append("respiratory_rate not > 0")
        if not 80.0 < self.temperature < 115.0:
            out.append("temperature not in (80, 115)")
        return out


@dataclass(frozen=True)
class Covariates:
    """Standardized (age, LAPS2, COPS2)."""

    age: float
    laps2: float
    cops2: float

    def as_array(self) -> np.ndarray:
        return np.array([self.age, self.laps2, self.cops2], dtype=float)

    @classmethod
    def from_array(cls, c: Sequence[float]) -> "Covariates":
        if len(c) != 3:
            raise ValueError(f"expected 3 covariates, got {len(c)}")
        vals = [float(v) for v in c]
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite covariates {vals}")
        return cls(*vals)


@dataclass(frozen=True)
class Standardization:
    """Per-covariate (mean, sd) so raw and standardized values convert both ways."""

    mean: tuple = (0.0, 0.0, 0.0)
    sd: tuple = (1.0, 1.0, 1.0)

    def standardize(self, raw: Sequence[float]) -> Covariates:
        return Covariates.from_array((np.asarray(raw, float) - self.mean) / np.asarray(self.sd))

    def raw(self, c: Covariates) -> np.ndarray:
        return c.as_array() * np.asarray(self.sd) + np.asarray(self.mean)


@dataclass
class TransitionParams:
    beta: np.ndarray
    lam: np.ndarray
    gamma: np.ndarray

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=float)
        self.lam = np.asarray(self.lam, dtype=float)
        self.gamma = np.asarray(self.gamma, dtype=float)

    def copy(self) -> "TransitionParams":
        return TransitionParams(self.beta.copy(), self.lam.copy(), self.gamma.copy())


@dataclass
class EmissionParams:
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float)
        self.sigma = np.asarray(self.sigma, dtype=float)

    def copy(self) -> "EmissionParams":
        return EmissionParams(self.mu.copy(), self.sigma.copy())


@dataclass
class ModelParams:
    transition: TransitionParams
    emission: EmissionParams

    def copy(self) -> "ModelParams":
        return ModelParams(self.transition.copy(), self.emission.copy())

    def flatten(self) -> dict:
        """Every scalar parameter keyed by a stable name."""
        out = {}
        for j, name in enumerate(COVARIATES):
            out[f"beta.{name}"] = float(self.transition.beta[j])
        for k, s in enumerate(TRANSIENT):
            out[f"lambda.{s}"] = float(self.transition.lam[k])
        for k, s in enumerate(TRANSIENT):
            out[f"gamma.{s}"] = float(self.transition.gamma[k])
        for k, s in enumerate(TRANSIENT):
            for d, v in enumerate(VITALS):
                out[f"mu.{s}.{v}"] = float(self.emission.mu[k, d])
        for k, s in enumerate(TRANSIENT):
            for d, v in enumerate(VITALS):
                out[f"sigma.{s}.{v}"] = float(self.emission.sigma[k, d])
        return out

    @classmethod
    def from_flat(cls, flat: dict) -> "ModelParams":
        beta = [flat[f"beta.{n}"] for n in COVARIATES]
        lam = [flat[f"lambda.{s}"] for s in TRANSIENT]
        gamma = [flat[f"gamma.{s}"] for s in TRANSIENT]
        mu = [[flat[f"mu.{s}.{v}"] for v in VITALS] for s in TRANSIENT]
        sigma = [[flat[f"sigma.{s}.{v}"] for v in VITALS] for s in TRANSIENT]
        return cls(TransitionParams(beta, lam, gamma), EmissionParams(mu, sigma))

    def __eq__(self, other) -> bool:
        if not isinstance(other, ModelParams):
            return NotImplemented
        return self.flatten() == other.flatten()


def param_names() -> List[str]:
    return list(default_flat_template())


def default_flat_template() -> dict:
    zeros = ModelParams(TransitionParams(np.zeros(3), np.zeros(3), np.zeros(3)),
                        EmissionParams(np.zeros((3, 5)), np.zeros((3, 5))))
    return zeros.flatten()


@dataclass
class PatientEpisode:
    episode_id: str
    covariates: Covariates
    vitals: np.ndarray  # (T, 5) in VITALS order
    outcome: Outcome

    def __post_init__(self):
        self.vitals = np.asarray(self.vitals, dtype=float).reshape(-1, N_VITALS)
        self.outcome = Outcome(self.outcome)
        if len(self.vitals) < 1:
            raise ValueError(f"episode {self.episode_id}: needs at least one interval")

    @property
    def n_intervals(self) -> int:
        return len(self.vitals)

    def interval(self, t: int) -> VitalSigns:
        return VitalSigns.from_array(self.vitals[t])


@dataclass
class Cohort:
    episodes: List[PatientEpisode]
    standardization: Standardization = field(default_factory=Standardization)

    def __len__(self) -> int:
        return len(self.episodes)

    def __iter__(self):
        return iter(self.episodes)

    def __getitem__(self, i):
        return self.episodes[i]


def hazard_scale(beta, c) -> float:
    """Proportional-hazards multiplier ``exp(-beta . c)``."""
    c = c.as_array() if isinstance(c, Covariates) else np.asarray(c, dtype=float)
    beta = np.asarray(beta, dtype=float)
    eta = float(beta @ c)
    if -eta > 709.0 or not math.isfinite(eta):
        j = int(np.argmax(np.abs(beta * c)))
        raise CovariateDomainError(
            f"exp(-beta.c) overflows: beta.c = {eta!r}, dominated by {COVARIATES[j]} = {c[j]!r}")
    return math.exp(-eta)


def success_probs(tp: TransitionParams, c) -> np.ndarray:
    """``P_k`` for k = S1..S3 (not checked for feasibility)."""
    return tp.lam * hazard_scale(tp.beta, c)


def _check_feasible(p: np.ndarray) -> None:
    for k in range(N_TRANSIENT):
        if not 0.0 < p[k] <= 1.0:
            raise InfeasibleParametersError(k, float(p[k]))


def transition_matrix(tp: TransitionParams, c) -> np.ndarray:
    """5x5 row-stochastic matrix over (G, S1, S2, S3, D)."""
    p = success_probs(tp, c)
    _check_feasible(p)
    g = tp.gamma
    a = np.zeros((5, 5))
    a[0, 0] = 1.0
    a[4, 4] = 1.0
    for k in range(N_TRANSIENT):
        s = k + 1
        a[s, s - 1] = g[k] * p[k]
        a[s, s] = (1.0 - g[k]) * p[k]
        a[s, s + 1] = 1.0 - p[k]
    return a


def log_transition_matrices(tp: TransitionParams, cov: np.ndarray) -> np.ndarray:
    """Batched log transition matrices, shape (N, 5, 5), for covariate rows ``cov``.

    Raises InfeasibleParametersError naming the first offending patient.
    """
    eta = cov @ tp.beta
    p = tp.lam[None, :] * np.exp(-eta)[:, None]
    bad = ~((p > 0.0) & (p <= 1.0))
    if bad.any():
        i, k = np.argwhere(bad)[0]
        raise InfeasibleParametersError(int(k), float(p[i, k]), patient=int(i))
    n = len(cov)
    out = np.full((n, 5, 5), -np.inf)
    out[:, 0, 0] = 0.0
    out[:, 4, 4] = 0.0
    with np.errstate(divide="ignore"):
        logp = np.log(p)
        for k in range(N_TRANSIENT):
            s = k + 1
            out[:, s, s - 1] = math.log(tp.gamma[k]) + logp[:, k]
            out[:, s, s] = math.log1p(-tp.gamma[k]) + logp[:, k]
            out[:, s, s + 1] = np.log1p(-p[:, k])
    return out


def log_emission_density(x, k: int, ep: EmissionParams) -> float:
    """Diagonal-Gaussian log density of five vitals under transient state ``k`` (0..2)."""
    x = x.as_array() if isinstance(x, VitalSigns) else np.asarray(x, dtype=float)
    mu, sd = ep.mu[k], ep.sigma[k]
    z = (x - mu) / sd
    return float(np.sum(-0.5 * LOG_2PI - np.log(sd) - 0.5 * z * z))


def log_emissions(x: np.ndarray, ep: EmissionParams) -> np.ndarray:
    """Log densities for rows of ``x`` (n, 5) under every transient state -> (n, 3)."""
    z = (x[:, None, :] - ep.mu[None]) / ep.sigma[None]
    return (-0.5 * z * z).sum(-1) - np.log(ep.sigma).sum(-1)[None] - 0.5 * N_VITALS * LOG_2PI


def validate_params(mp: ModelParams) -> List[str]:
    """List every violated parameter invariant; an empty list means valid."""
    out = []
    tp, ep = mp.transition, mp.emission
    for name, arr, shape in (("transition.beta", tp.beta, (3,)), ("transition.lambda", tp.lam, (3,)),
                             ("transition.gamma", tp.gamma, (3,)), ("emission.mu", ep.mu, (3, 5)),
                             ("emission.sigma", ep.sigma, (3, 5))):
        if arr.shape != shape:
            out.append(f"{name} has shape {arr.shape}, expected {shape}")
    if out:
        return out
    for j, n in enumerate(COVARIATES):
        b = tp.beta[j]
        if not (math.isfinite(b) and b > 0):
            out.append(f"transition.beta[{n}] = {b!r} not > 0")
    for sym, arr in (("lambda", tp.lam), ("gamma", tp.gamma)):
        for k, s in enumerate(TRANSIENT):
            v = arr[k]
            if not 0.0 < v < 1.0:
                out.append(f"transition.{sym}[{s}] = {v!r} not in (0, 1)")
    for k, s in enumerate(TRANSIENT):
        for d, v in enumerate(VITAL_NAMES):
            m = ep.mu[k, d]
            if not math.isfinite(m):
                out.append(f"emission.mu[{s}][{v}] not finite")
            sd = ep.sigma[k, d]
            if not (math.isfinite(sd) and sd > 0):
                out.append(f"emission.sigma[{s}][{v}] not > 0")
    return out
