"""Fairness-weighted federated training of adversarially debiased patient models."""

from fairfl.data import CohortSpec, PatientRecord, generate_cohort, kfold, partition_dirichlet
from fairfl.federation import Federation, Strategy, TrainingConfig
from fairfl.harness import ExperimentConfig, beta_sweep, report, run_experiment
from fairfl.metrics import GroupedPredictions, MetricKind, fairness_report, fairness_score
from fairfl.model import DipoleModel, ModelConfig

__version__ = "0.1.0"

__all__ = [
    "CohortSpec", "PatientRecord", "generate_cohort", "kfold", "partition_dirichlet",
    "Federation", "Strategy", "TrainingConfig",
    "ExperimentConfig", "beta_sweep", "report", "run_experiment",
    "GroupedPredictions", "MetricKind", "fairness_report", "fairness_score",
    "DipoleModel", "ModelConfig",
]
