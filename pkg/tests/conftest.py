import numpy as np
import pytest

from venteval import mdp
from venteval.ingest import build_transitions
from venteval.propensity import fit_logistic
from venteval.synthetic import SyntheticEnv


def fit_cohort_propensity(episodes):
    X = np.array([e.type_features(0) for e in episodes])
    y = np.array([e.static["mortality_90d"] for e in episodes])
    return fit_logistic(X, y)


@pytest.fixture(scope="session")
def small_cohort():
    env = SyntheticEnv(seed=3)
    eps = env.sample_cohort(80, seed=11, id_prefix="tr")
    prop = fit_cohort_propensity(eps)
    ts = build_transitions(eps, mdp.RewardParams(*mdp.SELECTED_PENALTIES), prop)
    return env, eps, prop, ts


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES = {}


def record_criterion(number, ok, detail):
    ACCEPTANCE_LINES[number] = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
