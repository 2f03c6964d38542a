"""Group-fairness metrics for a categorical (non-binary) sensitive attribute.

All rates are on the 0-1 scale. A group with no positive labels has no TPR
and is left out of TPSD and Worst TPR; an empty group has no accuracy and is
left out of APSD.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np


class MetricKind(str, enum.Enum):
    TPSD = "tpsd"
    APSD = "apsd"
    WORST_TPR = "worst_tpr"
    ACCURACY = "accuracy"

    @property
    def higher_is_better(self) -> bool:
        return self in (MetricKind.WORST_TPR, MetricKind.ACCURACY)

    @classmethod
    def parse(cls, value: "str | MetricKind") -> "MetricKind":
        if isinstance(value, MetricKind):
            return value
        key = str(value).strip().lower().replace("-", "_")
        aliases = {"worsttpr": "worst_tpr", "acc": "accuracy"}
        return cls(aliases.get(key, key))


@dataclass(frozen=True)
class GroupedPredictions:
    scores: np.ndarray
    labels: np.ndarray
    groups: np.ndarray
    n_groups: int
    threshold: float = 0.5

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64).ravel()
        labels = np.asarray(self.labels).ravel().astype(np.int64)
        groups = np.asarray(self.groups).ravel().astype(np.int64)
        if not (len(scores) == len(labels) == len(groups)) or len(scores) == 0:
            raise ValueError("scores, labels and groups must have the same non-zero length")
        if self.n_groups < 1:
            raise ValueError("n_groups must be >= 1")
        if groups.min() < 0 or groups.max() >= self.n_groups:
            raise ValueError(f"group ids must lie in [0, {self.n_groups})")
        if not np.isin(labels, (0, 1)).all():
            raise ValueError("labels must be binary")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie strictly inside (0, 1)")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "groups", groups)

    @property
    def predictions(self) -> np.ndarray:
        return binarize(self.scores, self.threshold)


@dataclass(frozen=True)
class FairnessReport:
    per_group_tpr: list
    per_group_accuracy: list
    tpsd: Optional[float]
    apsd: Optional[float]
    worst_tpr: Optional[float]
    accuracy: float
    defined_group_count_tpr: int
    mu_tpr: Optional[float]
    mu_acc: Optional[float]

    def as_dict(self) -> dict:
        return {
            "per_group_tpr": list(self.per_group_tpr),
            "per_group_accuracy": list(self.per_group_accuracy),
            "tpsd": self.tpsd,
            "apsd": self.apsd,
            "worst_tpr": self.worst_tpr,
            "accuracy": self.accuracy,
            "defined_group_count_tpr": self.defined_group_count_tpr,
            "mu_tpr": self.mu_tpr,
            "mu_acc": self.mu_acc,
        }


def binarize(scores, threshold: float = 0.5) -> np.ndarray:
    """Return 1 where ``score >= threshold`` and 0 elsewhere."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie strictly inside (0, 1)")
    return (np.asarray(scores, dtype=np.float64) >= threshold).astype(np.int64)


def group_rates(gp: GroupedPredictions) -> tuple[list, list]:
    """Per-group TPR and accuracy; ``None`` marks an undefined rate."""
    preds = gp.predictions
    n = gp.n_groups
    count = np.bincount(gp.groups, minlength=n)
    correct = np.bincount(gp.groups, weights=(preds == gp.labels), minlength=n)
    pos = gp.labels == 1
    n_pos = np.bincount(gp.groups[pos], minlength=n)
    tp = np.bincount(gp.groups[pos], weights=preds[pos], minlength=n)
    tpr = [float(tp[g] / n_pos[g]) if n_pos[g] > 0 else None for g in range(n)]
    acc = [float(correct[g] / count[g]) if count[g] > 0 else None for g in range(n)]
    return tpr, acc


def _population_std(values: list) -> tuple[Optional[float], Optional[float]]:
    defined = [v for v in values if v is not None]
    if not defined:
        return None, None
    # fsum is correctly rounded, so results do not depend on group order
    mu = math.fsum(defined) / len(defined)
    return math.sqrt(math.fsum((v - mu) ** 2 for v in defined) / len(defined)), mu


def tpsd(gp: GroupedPredictions) -> Optional[float]:
    return _population_std(group_rates(gp)[0])[0]


def apsd(gp: GroupedPredictions) -> Optional[float]:
    return _population_std(group_rates(gp)[1])[0]


def worst_tpr(gp: GroupedPredictions) -> Optional[float]:
    defined = [v for v in group_rates(gp)[0] if v is not None]
    return min(defined) if defined else None


def accuracy(gp: GroupedPredictions) -> float:
    return float(np.mean(gp.predictions == gp.labels))


def fairness_report(gp: GroupedPredictions) -> FairnessReport:
    tpr, acc = group_rates(gp)
    sd_tpr, mu_tpr = _population_std(tpr)
    sd_acc, mu_acc = _population_std(acc)
    defined = [v for v in tpr if v is not None]
    return FairnessReport(
        per_group_tpr=tpr,
        per_group_accuracy=acc,
        tpsd=sd_tpr,
        apsd=sd_acc,
        worst_tpr=min(defined) if defined else None,
        accuracy=accuracy(gp),
        defined_group_count_tpr=len(defined),
        mu_tpr=mu_tpr,
        mu_acc=mu_acc,
    )


def fairness_score(gp: GroupedPredictions, kind: "MetricKind | str") -> Optional[float]:
    """Metric value oriented so that lower always means fairer.

    Higher-is-better metrics (Worst TPR, accuracy) are negated, which lets the
    aggregation reward ``max(phi) - phi_k`` favour the fairest client whatever
    the metric.
    """
    kind = MetricKind.parse(kind)
    value = {
        MetricKind.TPSD: tpsd,
        MetricKind.APSD: apsd,
        MetricKind.WORST_TPR: worst_tpr,
        MetricKind.ACCURACY: accuracy,
    }[kind](gp)
    if value is None:
        return None
    return -value if kind.higher_is_better else value
