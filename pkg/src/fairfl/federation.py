"""Round engine for fairness-weighted federated averaging and its baselines.

Strategies:

``no_fed``
    clients train alone; nothing is aggregated.
``fedavg``
    size-proportional weights, fixed for the whole run.
``fairfed_like``
    weights shrink with the gap between a client's fairness score and the
    score of the pooled validation predictions.
``fairness_weighted``
    ``w_k <- w_k + beta * (max_i phi_i - phi_k)``, renormalised each round,
    where ``phi_k`` is client k's fairness score (round mean when undefined).

Fairness scores are oriented so that lower is fairer (see
:func:`fairfl.metrics.fairness_score`).
"""

from __future__ import annotations

import enum
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from fairfl.diffcore import NonFiniteError, ParamVector, make_optimizer
from fairfl.metrics import GroupedPredictions, MetricKind, fairness_report, fairness_score
from fairfl.model import DipoleModel, ModelConfig, predict_records, train_epochs

log = logging.getLogger(__name__)

FAIRFED_FLOOR = 1e-6


class Strategy(str, enum.Enum):
    NO_FED = "no_fed"
    FEDAVG = "fedavg"
    FAIRFED_LIKE = "fairfed_like"
    FAIRNESS_WEIGHTED = "fairness_weighted"

    @classmethod
    def parse(cls, value) -> "Strategy":
        if isinstance(value, Strategy):
            return value
        key = str(value).strip().lower().replace("-", "_")
        aliases = {"nofed": "no_fed", "fairfed": "fairfed_like", "fairfedlike": "fairfed_like",
                   "fairnessweighted": "fairness_weighted", "fw": "fairness_weighted"}
        return cls(aliases.get(key, key))


@dataclass
class TrainingConfig:
    local_epochs: int = 1
    batch_size: int = 32
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    alpha: float = 0.3
    threshold: float = 0.5


# ---------------------------------------------------------------- weight rules


def init_weights(sizes: Sequence[int]) -> np.ndarray:
    """Size-proportional starting weights ``n_k / sum(n)``."""
    n = np.asarray(sizes, dtype=np.float64)
    if n.size < 1:
        raise ValueError("need at least one client")
    total = n.sum()
    if total <= 0:
        raise ValueError("clients hold no instances")
    return n / total


def phi(scores: Sequence[Optional[float]]) -> tuple[np.ndarray, bool]:
    """Replace undefined scores by the mean of the defined ones.

    Returns ``(phi, all_undefined)``; when nothing is defined every entry is 0.
    """
    defined = [s for s in scores if s is not None]
    if not defined:
        log.warning("no participant reported a defined fairness score; weights left unchanged")
        return np.zeros(len(scores)), True
    mean = math.fsum(defined) / len(defined)
    return np.array([mean if s is None else float(s) for s in scores]), False


def update_weights(prev: np.ndarray, phis: np.ndarray, beta: float) -> np.ndarray:
    if beta < 0:
        raise ValueError("beta must be non-negative")
    phis = np.asarray(phis, dtype=np.float64)
    return np.asarray(prev, dtype=np.float64) + beta * (phis.max() - phis)


def normalize(raw: np.ndarray) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float64)
    total = raw.sum()
    if not total > 0:
        raise ValueError("weights must have a positive sum")
    return raw / total


def fairfed_like_update(prev: np.ndarray, phis: np.ndarray, global_score: Optional[float],
                        beta: float) -> np.ndarray:
    """``max(eps, w_k - beta * |phi_k - F_global|)``, before normalisation."""
    if beta < 0:
        raise ValueError("beta must be non-negative")
    prev = np.asarray(prev, dtype=np.float64)
    if global_score is None:
        return prev.copy()
    gaps = np.abs(np.asarray(phis, dtype=np.float64) - global_score)
    return np.maximum(FAIRFED_FLOOR, prev - beta * gaps)


def aggregate(params: Sequence[ParamVector], weights: Sequence[float]) -> ParamVector:
    """Coordinate-wise weighted sum, accumulated in list order."""
    if not params:
        raise ValueError("nothing to aggregate")
    layout = params[0].layout
    if any(p.layout != layout for p in params):
        raise ValueError("parameter layout mismatch between clients")
    if len(weights) != len(params):
        raise ValueError("one weight per parameter vector")
    out = np.zeros_like(params[0].values)
    for w, p in zip(weights, params):
        out += w * p.values
    return ParamVector(layout, out)


# ---------------------------------------------------------------- clients


@dataclass
class Client:
    id: int
    train: list
    validation: list
    test: list
    model: DipoleModel
    seed: int = 0

    @property
    def n_k(self) -> int:
        return len(self.train)


@dataclass
class ClientResult:
    client_id: int
    params: Optional[ParamVector]
    score: Optional[float]
    val_scores: Optional[np.ndarray] = None
    failed: bool = False
    error: str = ""


def grouped(scores, records, n_groups: int, threshold: float) -> GroupedPredictions:
    return GroupedPredictions(
        scores=scores,
        labels=[r.outcome for r in records],
        groups=[r.sens for r in records],
        n_groups=n_groups,
        threshold=threshold,
    )


def client_update(client: Client, global_params: ParamVector, round_index: int,
                  training: TrainingConfig, metric: MetricKind, n_groups: int) -> ClientResult:
    """Load the global parameters, train locally, score fairness on validation."""
    model = client.model
    model.set_params(global_params)
    optimizer = make_optimizer(training.optimizer, training.learning_rate)
    rng = np.random.default_rng([client.seed, client.id, round_index])
    try:
        train_epochs(model, client.train, training.local_epochs, training.alpha, optimizer,
                     training.batch_size, rng)
    except NonFiniteError as exc:
        log.warning("client %d failed in round %d: %s", client.id, round_index, exc)
        model.set_params(global_params)
        return ClientResult(client.id, None, None, failed=True, error=str(exc))
    score, val_scores = None, None
    if client.validation:
        val_scores, _ = predict_records(model, client.validation)
        gp = grouped(val_scores, client.validation, n_groups, training.threshold)
        score = fairness_score(gp, metric)
    return ClientResult(client.id, model.get_params(), score, val_scores)


# ---------------------------------------------------------------- server


@dataclass
class RoundReport:
    round: int
    strategy: str
    participants: list
    scores: list
    phi: list
    weights_raw: list
    weights: list
    global_report: dict
    score_split: str = "validation"
    failed: list = field(default_factory=list)
    all_scores_undefined: bool = False
    seconds: float = 0.0

    def to_dict(self) -> dict:
        return {
            "round": self.round,
            "strategy": self.strategy,
            "participants": self.participants,
            "scores": self.scores,
            "phi": self.phi,
            "weights_raw": self.weights_raw,
            "weights": self.weights,
            "global_report": self.global_report,
            "score_split": self.score_split,
            "failed": self.failed,
            "all_scores_undefined": self.all_scores_undefined,
            "seconds": self.seconds,
        }


@dataclass
class ServerState:
    strategy: Strategy
    weights: np.ndarray
    params: ParamVector
    beta: float = 1.0
    metric: MetricKind = MetricKind.TPSD
    participation_fraction: float = 1.0
    round: int = 0
    seed: int = 0
    reports: list = field(default_factory=list)

    def __post_init__(self):
        self.strategy = Strategy.parse(self.strategy)
        self.metric = MetricKind.parse(self.metric)
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if not 0.0 < self.participation_fraction <= 1.0:
            raise ValueError("participation_fraction must lie in (0, 1]")


class Federation:
    """Server plus clients. ``run_round`` is the unit of progress."""

    def __init__(self, client_data: Sequence, model_config: ModelConfig,
                 strategy="fairness_weighted", beta: float = 1.0, metric="tpsd",
                 training: Optional[TrainingConfig] = None, participation_fraction: float = 1.0,
                 seed: int = 0, max_workers: int = 1, log_path=None):
        """``client_data`` holds one ``(train, validation, test)`` triple per client."""
        self.config = model_config
        self.training = training or TrainingConfig(alpha=model_config.alpha)
        self.n_groups = model_config.n_sens_classes
        self.max_workers = max_workers
        self.log_path = log_path
        init_model = DipoleModel(model_config, np.random.default_rng([seed, 10_000]))
        theta0 = init_model.get_params()
        self.clients = []
        for k, (train, val, test) in enumerate(client_data):
            if not train:
                raise ValueError(f"client {k} has an empty training split")
            model = DipoleModel(model_config, np.random.default_rng([seed, k]))
            model.set_params(theta0)
            self.clients.append(Client(k, list(train), list(val), list(test), model, seed))
        self.server = ServerState(
            strategy=strategy,
            weights=init_weights([c.n_k for c in self.clients]),
            params=theta0,
            beta=beta,
            metric=metric,
            participation_fraction=participation_fraction,
            seed=seed,
        )
        # no_fed keeps one parameter vector per client
        self.local_params = [theta0 for _ in self.clients]

    # -- helpers
    def sample_clients(self, round_index: int) -> list:
        K = len(self.clients)
        m = math.ceil(self.server.participation_fraction * K)
        if m >= K:
            return list(range(K))
        rng = np.random.default_rng([self.server.seed, 20_000, round_index])
        return sorted(int(i) for i in rng.choice(K, size=m, replace=False))

    def _run_clients(self, ids, start_params, round_index) -> list:
        def job(k):
            return client_update(self.clients[k], start_params[k], round_index, self.training,
                                 self.server.metric, self.n_groups)

        if self.max_workers > 1 and len(ids) > 1:
            with ThreadPoolExecutor(max_workers=self.max_workers) as pool:
                results = list(pool.map(job, ids))
        else:
            results = [job(k) for k in ids]
        return sorted(results, key=lambda r: r.client_id)

    def _pooled_validation_score(self, results) -> Optional[float]:
        scores, records = [], []
        for res in results:
            if res.val_scores is not None:
                scores.append(res.val_scores)
                records.extend(self.clients[res.client_id].validation)
        if not records:
            return None
        gp = grouped(np.concatenate(scores), records, self.n_groups, self.training.threshold)
        return fairness_score(gp, self.server.metric)

    def evaluate(self, params_per_client: Optional[Sequence[ParamVector]] = None) -> dict:
        """Pooled test-set report; with per-client params each client scores its own test set."""
        probs, records = [], []
        for c in self.clients:
            if not c.test:
                continue
            pv = params_per_client[c.id] if params_per_client is not None else self.server.params
            c.model.set_params(pv)
            probs.append(predict_records(c.model, c.test)[0])
            records.extend(c.test)
        if not records:
            return {}
        gp = grouped(np.concatenate(probs), records, self.n_groups, self.training.threshold)
        return fairness_report(gp).as_dict()

    # -- rounds
    def run_round(self) -> RoundReport:
        srv = self.server
        t0 = time.perf_counter()
        round_index = srv.round + 1
        ids = self.sample_clients(round_index)
        if srv.strategy is Strategy.NO_FED:
            start = {k: self.local_params[k] for k in ids}
        else:
            start = {k: srv.params for k in ids}
        results = self._run_clients(ids, start, round_index)
        ok = [r for r in results if not r.failed]
        failed = [r.client_id for r in results if r.failed]
        if not ok:
            raise RuntimeError(f"round {round_index}: every sampled client failed")
        part = [r.client_id for r in ok]
        scores = [r.score for r in ok]
        phis, all_undefined = phi(scores)
        prev = srv.weights[part]
        mass = prev.sum()

        if srv.strategy is Strategy.FAIRNESS_WEIGHTED:
            raw = update_weights(prev, phis, srv.beta)
        elif srv.strategy is Strategy.FAIRFED_LIKE:
            raw = fairfed_like_update(prev, phis, self._pooled_validation_score(ok), srv.beta)
        else:
            raw = prev.copy()
        if all_undefined:
            raw = prev.copy()
        local = normalize(raw)

        new_weights = srv.weights.copy()
        # non-participants keep their weight; participants share their previous mass
        new_weights[part] = local * mass
        new_weights = new_weights / new_weights.sum()

        if srv.strategy is Strategy.NO_FED:
            for r in ok:
                self.local_params[r.client_id] = r.params
            report = self.evaluate(self.local_params)
        else:
            srv.params = aggregate([r.params for r in ok], local)
            report = self.evaluate()
        srv.weights = new_weights
        srv.round = round_index

        rr = RoundReport(
            round=round_index,
            strategy=srv.strategy.value,
            participants=part,
            scores=scores,
            phi=phis.tolist(),
            weights_raw=raw.tolist(),
            weights=new_weights.tolist(),
            global_report=report,
            failed=failed,
            all_scores_undefined=all_undefined,
            seconds=time.perf_counter() - t0,
        )
        srv.reports.append(rr)
        if self.log_path is not None:
            with open(self.log_path, "a") as fh:
                fh.write(json.dumps(rr.to_dict()) + "\n")
        return rr

    def run_training(self, rounds: int) -> tuple[ParamVector, list]:
        if rounds < 1:
            raise ValueError("rounds must be >= 1")
        for _ in range(rounds):
            self.run_round()
        return self.server.params, list(self.server.reports)

    def final_report(self) -> dict:
        if self.server.reports:
            return self.server.reports[-1].global_report
        if self.server.strategy is Strategy.NO_FED:
            return self.evaluate(self.local_params)
        return self.evaluate()
