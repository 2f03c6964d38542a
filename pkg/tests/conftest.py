import numpy as np
import pytest

from fairfl.data import CohortSpec, PatientRecord, generate_cohort
from fairfl.model import DipoleModel, ModelConfig, PatientBatch


def brute_force_rates(scores, labels, groups, n_groups, threshold=0.5):
    """Per-group TPR / accuracy by explicit looping, ``None`` when undefined."""
    tpr, acc = [], []
    for g in range(n_groups):
        members = [i for i in range(len(groups)) if groups[i] == g]
        pos = [i for i in members if labels[i] == 1]
        hits = sum(1 for i in pos if scores[i] >= threshold)
        right = sum(1 for i in members if (1 if scores[i] >= threshold else 0) == labels[i])
        tpr.append(hits / len(pos) if pos else None)
        acc.append(right / len(members) if members else None)
    return tpr, acc


def brute_force_pstd(values):
    vals = [v for v in values if v is not None]
    if not vals:
        return None
    mu = sum(vals) / len(vals)
    return (sum((v - mu) ** 2 for v in vals) / len(vals)) ** 0.5


def tiny_records(n=6, E=10, n_groups=2, max_visits=3, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        visits = []
        for _ in range(int(rng.integers(1, max_visits + 1))):
            k = int(rng.integers(1, 4))
            visits.append(sorted(rng.choice(E, size=k, replace=False).tolist()))
        out.append(PatientRecord(i, int(rng.integers(0, n_groups)), int(rng.integers(0, 2)), visits))
    return out


@pytest.fixture
def tiny_config():
    return ModelConfig(code_vocab_size=10, n_sens_classes=3, embed_size=4, hidden_size=3,
                       max_visits=3, alpha=0.3)


@pytest.fixture
def tiny_model(tiny_config):
    return DipoleModel(tiny_config, np.random.default_rng(7))


@pytest.fixture
def two_patient_batch():
    # patient 0 has three visits, patient 1 two; padding at the tail
    visits = np.zeros((2, 3, 10))
    visits[0, 0, [1, 4]] = 1
    visits[0, 1, [2]] = 1
    visits[0, 2, [0, 7, 9]] = 1
    visits[1, 0, [3]] = 1
    visits[1, 1, [5, 6]] = 1
    mask = np.array([[1, 1, 1], [1, 1, 0]], dtype=float)
    return PatientBatch(visits, mask, np.array([1.0, 0.0]), np.array([2, 0]))


@pytest.fixture(scope="session")
def small_clients():
    spec = CohortSpec(n_groups=3, proportions=[[0.5, 0.25, 0.25]] * 3,
                      client_sizes=[90, 70, 60], code_vocab_size=40, max_visits=4,
                      signal_codes=12, outcome_intercept=-3.0, signal_weight=1.0, seed=3)
    return spec, generate_cohort(spec)
