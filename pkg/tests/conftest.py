import numpy as np
import pytest

from sepsis_hmm.model import (
    Covariates,
    EmissionParams,
    ModelParams,
    Outcome,
    PatientEpisode,
    TransitionParams,
)
from sepsis_hmm.simulate import DEFAULT_EMISSION_MU, DEFAULT_EMISSION_SIGMA, default_ground_truth


def make_episode(vitals, cov=(0.0, 0.0, 0.0), outcome=Outcome.CENSORED, eid="E0"):
    return PatientEpisode(eid, Covariates.from_array(cov), np.asarray(vitals, float), outcome)


def make_params(beta=(0.1, 0.1, 0.1), lam=(0.9, 0.9, 0.9), gamma=(0.3, 0.3, 0.3),
                mu=None, sigma=None):
    return ModelParams(TransitionParams(beta, lam, gamma),
                       EmissionParams(DEFAULT_EMISSION_MU.copy() if mu is None else mu,
                                      DEFAULT_EMISSION_SIGMA.copy() if sigma is None else sigma))


@pytest.fixture
def truth():
    return default_ground_truth()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# criterion number -> (verdict, title, detail), filled by test_acceptance
ACCEPTANCE_RESULTS = {}
N_CRITERIA = 9


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        verdict, title, detail = ACCEPTANCE_RESULTS.get(n, ("NOT RUN", "", ""))
        terminalreporter.write_line(f"criterion {n}: {verdict:<7} {title}  {detail}".rstrip())
