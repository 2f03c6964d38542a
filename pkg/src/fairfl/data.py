"""Synthetic EHR cohorts, client partitioning, k-fold splits and patient files.

Generative model for one patient of group ``g`` at client ``k``:

* visit count ~ uniform{1..max_visits}
* a latent severity ``s ~ N(0, 1)``
* each visit draws ``1 + Poisson(codes_per_visit - 1)`` distinct codes from a
  categorical over the vocabulary whose logits are ``group_tilt +
  severity_scale * s`` on group ``g``'s own block of signal codes,
  ``signal_sharing * severity_scale * s`` on the other signal codes, and 0
  elsewhere
* outcome ~ Bernoulli(sigmoid(intercept + signal_weight * signal-code count
  + shift[k, g])), then flipped with probability ``noise[k, g]``

Group ``g``'s code block is the ``g``-th slice of the signal codes. With
``signal_sharing < 1`` a group's risk shows mostly through its own block, so a
client that sees few patients of a group learns little about that group.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class PatientRecord:
    patient_id: int
    sens: int
    outcome: int
    visits: list  # list of sorted code-id lists

    def validate(self, code_vocab_size: Optional[int] = None, n_groups: Optional[int] = None):
        if not self.visits:
            raise ValueError(f"patient {self.patient_id} has no visits")
        if self.outcome not in (0, 1):
            raise ValueError(f"patient {self.patient_id} outcome must be 0 or 1")
        if self.sens < 0 or (n_groups is not None and self.sens >= n_groups):
            raise ValueError(f"patient {self.patient_id} sensitive group {self.sens} out of range")
        for t, codes in enumerate(self.visits):
            if len(set(codes)) != len(codes):
                raise ValueError(f"patient {self.patient_id} visit {t} repeats a code")
            for c in codes:
                if c < 0 or (code_vocab_size is not None and c >= code_vocab_size):
                    raise ValueError(
                        f"patient {self.patient_id} visit {t}: code {c} outside [0, {code_vocab_size})"
                    )
        return self

    def to_json(self) -> dict:
        return {
            "patient_id": self.patient_id,
            "sens": self.sens,
            "outcome": self.outcome,
            "visits": [list(v) for v in self.visits],
        }


def _per_client(value, K: int, N: int, name: str) -> np.ndarray:
    arr = np.asarray(value if value is not None else 0.0, dtype=np.float64)
    if arr.ndim == 0:
        arr = np.full(N, float(arr))
    if arr.ndim == 1:
        if arr.shape != (N,):
            raise ValueError(f"{name} needs {N} per-group values")
        arr = np.tile(arr, (K, 1))
    if arr.shape != (K, N):
        raise ValueError(f"{name} must be per-group (N,) or per-client (K, N)")
    return arr


@dataclass
class CohortSpec:
    """Cohort recipe. Give either ``counts`` (K x N patients) or
    ``proportions`` (K x N, rows summing to 1) together with ``client_sizes``.

    ``outcome_shift`` and ``label_noise`` accept one value per group or a
    K x N table for client-specific bias.
    """

    n_groups: int
    counts: Optional[list] = None
    proportions: Optional[list] = None
    client_sizes: Optional[list] = None
    code_vocab_size: int = 200
    max_visits: int = 8
    codes_per_visit: float = 4.0
    signal_codes: int = 40
    signal_weight: float = 0.35
    severity_scale: float = 1.0
    signal_sharing: float = 1.0
    group_tilt: float = 1.5
    outcome_intercept: float = -2.5
    outcome_shift: object = 0.0
    label_noise: object = 0.0
    seed: int = 0

    def __post_init__(self):
        self.validate()

    @property
    def n_clients(self) -> int:
        return len(self.client_counts())

    def client_counts(self) -> np.ndarray:
        if self.counts is not None:
            counts = np.asarray(self.counts, dtype=np.int64)
        elif self.proportions is not None and self.client_sizes is not None:
            props = np.asarray(self.proportions, dtype=np.float64)
            sizes = np.asarray(self.client_sizes, dtype=np.int64)
            counts = np.vstack([_apportion(sizes[k], props[k]) for k in range(len(sizes))])
        else:
            raise ValueError("cohort needs counts, or proportions with client_sizes")
        return counts

    def validate(self) -> None:
        if self.n_groups < 1:
            raise ValueError("n_groups must be >= 1")
        if self.proportions is not None:
            props = np.asarray(self.proportions, dtype=np.float64)
            if props.ndim != 2 or props.shape[1] != self.n_groups:
                raise ValueError("proportions must be K x n_groups")
            if (props < 0).any() or not np.allclose(props.sum(axis=1), 1.0, atol=1e-9):
                raise ValueError("each proportions row must be non-negative and sum to 1")
            if self.client_sizes is None or len(self.client_sizes) != props.shape[0]:
                raise ValueError("client_sizes must give one size per proportions row")
        counts = self.client_counts()
        if counts.ndim != 2 or counts.shape[1] != self.n_groups:
            raise ValueError("counts must be K x n_groups")
        if (counts < 0).any():
            raise ValueError("counts must be non-negative")
        K = counts.shape[0]
        _per_client(self.outcome_shift, K, self.n_groups, "outcome_shift")
        noise = _per_client(self.label_noise, K, self.n_groups, "label_noise")
        if (noise < 0).any() or (noise >= 0.5).any():
            raise ValueError("label_noise rates must lie in [0, 0.5)")
        if self.code_vocab_size < 1 or self.max_visits < 1:
            raise ValueError("code_vocab_size and max_visits must be >= 1")
        if not 0 <= self.signal_codes <= self.code_vocab_size:
            raise ValueError("signal_codes must lie in [0, code_vocab_size]")
        if self.codes_per_visit < 1:
            raise ValueError("codes_per_visit must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("outcome_shift", "label_noise"):
            if isinstance(d[key], np.ndarray):
                d[key] = d[key].tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CohortSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown cohort keys: {sorted(unknown)}")
        return cls(**d)


def _apportion(total: int, props: np.ndarray) -> np.ndarray:
    """Largest-remainder split of ``total`` by ``props``."""
    raw = props * total
    base = np.floor(raw).astype(np.int64)
    rest = total - base.sum()
    order = np.argsort(-(raw - base), kind="stable")
    base[order[:rest]] += 1
    return base


def _group_blocks(spec: CohortSpec) -> list:
    if spec.signal_codes == 0:
        return [np.arange(0) for _ in range(spec.n_groups)]
    edges = np.linspace(0, spec.signal_codes, spec.n_groups + 1).round().astype(int)
    return [np.arange(edges[g], edges[g + 1]) for g in range(spec.n_groups)]


def _draw_patient(rng, spec, group, shift, noise, blocks, pid) -> PatientRecord:
    E = spec.code_vocab_size
    n_visits = int(rng.integers(1, spec.max_visits + 1))
    severity = rng.normal()
    logits = np.zeros(E)
    logits[: spec.signal_codes] += spec.signal_sharing * spec.severity_scale * severity
    logits[blocks[group]] += spec.group_tilt + (1.0 - spec.signal_sharing) * spec.severity_scale * severity
    probs = np.exp(logits - logits.max())
    probs /= probs.sum()
    visits = []
    signal = 0
    for _ in range(n_visits):
        k = min(E, 1 + int(rng.poisson(spec.codes_per_visit - 1.0)))
        codes = np.sort(rng.choice(E, size=k, replace=False, p=probs))
        signal += int((codes < spec.signal_codes).sum())
        visits.append(codes.tolist())
    z = spec.outcome_intercept + spec.signal_weight * signal + shift
    outcome = int(rng.random() < 1.0 / (1.0 + np.exp(-z)))
    if rng.random() < noise:
        outcome = 1 - outcome
    return PatientRecord(pid, int(group), outcome, visits)


def generate_cohort(spec: CohortSpec) -> list:
    """Return one list of :class:`PatientRecord` per client."""
    spec.validate()
    counts = spec.client_counts()
    K, N = counts.shape
    shift = _per_client(spec.outcome_shift, K, N, "outcome_shift")
    noise = _per_client(spec.label_noise, K, N, "label_noise")
    blocks = _group_blocks(spec)
    clients = []
    pid = 0
    for k in range(K):
        records = []
        for g in range(N):
            rng = np.random.default_rng([spec.seed, k, g])
            for _ in range(int(counts[k, g])):
                records.append(_draw_patient(rng, spec, g, shift[k, g], noise[k, g], blocks, pid))
                pid += 1
        clients.append(records)
    return clients


# ---------------------------------------------------------------- partitioning


def partition_dirichlet(patients: Sequence[PatientRecord], n_clients: int, alpha: float,
                        seed: int = 0) -> list:
    """Per-group Dirichlet(alpha) allocation of patients to clients."""
    if n_clients < 1:
        raise ValueError("n_clients must be >= 1")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    rng = np.random.default_rng(seed)
    buckets = [[] for _ in range(n_clients)]
    groups = sorted({p.sens for p in patients})
    for g in groups:
        members = [p for p in patients if p.sens == g]
        props = rng.dirichlet(np.full(n_clients, float(alpha)))
        alloc = rng.multinomial(len(members), props)
        order = rng.permutation(len(members))
        start = 0
        for k in range(n_clients):
            buckets[k].extend(members[i] for i in order[start : start + alloc[k]])
            start += alloc[k]
    return [sorted(b, key=lambda p: p.patient_id) for b in buckets]


def partition_iid_uniform(patients: Sequence[PatientRecord], n_clients: int,
                          min_n: int = 1500, max_n: int = 5000, seed: int = 0) -> list:
    """Group-blind split with client sizes drawn uniformly from [min_n, max_n]."""
    if n_clients < 1:
        raise ValueError("n_clients must be >= 1")
    if not 1 <= min_n <= max_n:
        raise ValueError("need 1 <= min_n <= max_n")
    rng = np.random.default_rng(seed)
    sizes = rng.integers(min_n, max_n + 1, size=n_clients)
    if sizes.sum() > len(patients):
        raise ValueError(
            f"client sizes need {int(sizes.sum())} patients, only {len(patients)} available"
        )
    order = rng.permutation(len(patients))
    out, start = [], 0
    for size in sizes:
        out.append(sorted((patients[i] for i in order[start : start + size]),
                          key=lambda p: p.patient_id))
        start += size
    return out


# ---------------------------------------------------------------- k-fold


@dataclass
class Fold:
    train: list
    validation: list
    test: list


def kfold(dataset: Sequence[PatientRecord], k: int = 5, seed: int = 0,
          val_fraction: float = 0.1) -> list:
    """Stratified (group x outcome) k-fold splits with a validation slice per fold."""
    if k < 2:
        raise ValueError("k must be >= 2")
    if len(dataset) < k:
        raise ValueError(f"dataset of {len(dataset)} records is smaller than k={k}")
    if not 0.0 <= val_fraction < 1.0:
        raise ValueError("val_fraction must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    cells = {}
    for i, rec in enumerate(dataset):
        cells.setdefault((rec.sens, rec.outcome), []).append(i)
    if any(len(v) < k for v in cells.values()):
        log.warning("some group x outcome cell has fewer than %d records; stratifying by group only", k)
        cells = {}
        for i, rec in enumerate(dataset):
            cells.setdefault((rec.sens,), []).append(i)
    fold_of = np.empty(len(dataset), dtype=np.int64)
    offset = 0
    for key in sorted(cells):
        idx = np.asarray(cells[key])
        idx = idx[rng.permutation(len(idx))]
        fold_of[idx] = (np.arange(len(idx)) + offset) % k
        offset = (offset + len(idx)) % k
    folds = []
    for f in range(k):
        test = [dataset[i] for i in np.flatnonzero(fold_of == f)]
        train_idx = np.flatnonzero(fold_of != f)
        train, val = _carve_validation([dataset[i] for i in train_idx], val_fraction, rng)
        folds.append(Fold(train, val, test))
    return folds


def _carve_validation(train: list, fraction: float, rng) -> tuple:
    if fraction == 0.0:
        return train, []
    cells = {}
    for i, rec in enumerate(train):
        cells.setdefault(rec.sens, []).append(i)
    val_idx = []
    for key in sorted(cells):
        idx = np.asarray(cells[key])
        take = int(round(fraction * len(idx)))
        val_idx.extend(idx[rng.permutation(len(idx))[:take]].tolist())
    if not val_idx and len(train) > 1:
        val_idx = [int(rng.integers(len(train)))]
    chosen = set(val_idx)
    return (
        [r for i, r in enumerate(train) if i not in chosen],
        [r for i, r in enumerate(train) if i in chosen],
    )


# ---------------------------------------------------------------- files


def write_patients(path, records: Sequence[PatientRecord]) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), separators=(",", ":")) + "\n")
    tmp.replace(path)


def read_patients(path, code_vocab_size: Optional[int] = None,
                  n_groups: Optional[int] = None) -> list:
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                rec = PatientRecord(
                    patient_id=d["patient_id"],
                    sens=int(d["sens"]),
                    outcome=int(d["outcome"]),
                    visits=[[int(c) for c in v] for v in d["visits"]],
                )
                rec.validate(code_vocab_size, n_groups)
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
            records.append(rec)
    return records


def group_counts(records: Sequence[PatientRecord], n_groups: int) -> np.ndarray:
    return np.bincount([r.sens for r in records], minlength=n_groups)
