"""Cross-validated experiments, beta sweeps and result summaries.

Results CSV columns: ``strategy, beta, fold, accuracy, tpsd, worst_tpr, apsd,
seconds``. Detail rows carry a fold index; each strategy then gets one summary
row with ``fold == "summary"`` whose metric cells read ``mean±std``
(population std across folds). Accuracy and APSD are reported on the 0-100
scale, TPSD and Worst TPR on 0-1.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from fairfl.data import CohortSpec, generate_cohort, kfold, read_patients
from fairfl.federation import Federation, Strategy, TrainingConfig
from fairfl.metrics import MetricKind
from fairfl.diffcore import make_optimizer, save_checkpoint
from fairfl.model import DipoleModel, ModelConfig, PatientBatch, train_epochs

log = logging.getLogger(__name__)

CSV_COLUMNS = ("strategy", "beta", "fold", "accuracy", "tpsd", "worst_tpr", "apsd", "seconds")
METRICS = ("accuracy", "tpsd", "worst_tpr", "apsd")
LOWER_IS_BETTER = {"accuracy": False, "tpsd": True, "worst_tpr": False, "apsd": True}
PRESETS = ("most-populous", "heterogeneous", "mimic-iid", "mimic-noniid", "desk-scale")
DEFAULT_BETAS = (0.0, 0.25, 0.5, 1.0, 2.5, 5.0)
ALL_STRATEGIES = ("no_fed", "fedavg", "fairfed_like", "fairness_weighted")


TRAINING_DEFAULTS = {"learning_rate": 1e-3, "val_fraction": 0.1}


def _read_preset(name: str) -> dict:
    key = name.strip().lower().replace("_", "-")
    if key not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    text = resources.files("fairfl").joinpath("presets").joinpath(f"{key}.json").read_text()
    return json.loads(text)


def load_preset(name: str) -> dict:
    """Cohort fields of a preset (comments and the training block dropped)."""
    return {k: v for k, v in _read_preset(name).items()
            if not k.startswith("_") and k != "training"}


def preset_training(name: str) -> dict:
    """Training settings a preset recommends; empty when it has none."""
    return dict(_read_preset(name).get("training", {}))


@dataclass
class ExperimentConfig:
    preset: Optional[str] = "desk-scale"
    cohort: dict = field(default_factory=dict)  # overrides applied on top of the preset
    data_dir: Optional[str] = None  # client_*.jsonl files instead of generation
    count_scale: float = 1.0  # shrink preset client counts for quick runs
    strategies: list = field(default_factory=lambda: list(ALL_STRATEGIES))
    metric: str = "tpsd"
    beta: float = 1.0
    alpha: float = 0.3
    rounds: int = 10
    local_epochs: int = 1
    folds: int = 5
    seed: int = 0
    batch_size: int = 32
    learning_rate: Optional[float] = None  # None: preset value, else 1e-3
    optimizer: str = "adam"
    embed_size: int = 32
    hidden_size: int = 16
    threshold: float = 0.5
    val_fraction: Optional[float] = None  # None: preset value, else 0.1
    participation_fraction: float = 1.0
    workers: int = 1
    record_seconds: bool = False  # wall time breaks byte-identical reruns
    output_dir: str = "results"

    def __post_init__(self):
        hints = preset_training(self.preset) if self.preset else {}
        for name, default in TRAINING_DEFAULTS.items():
            if getattr(self, name) is None:
                setattr(self, name, hints.get(name, default))
        self.validate()

    def validate(self) -> None:
        if self.rounds < 1 or self.local_epochs < 0 or self.folds < 2:
            raise ValueError("need rounds >= 1, local_epochs >= 0 and folds >= 2")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.count_scale <= 0:
            raise ValueError("count_scale must be positive")
        if self.learning_rate <= 0 or not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("need learning_rate > 0 and val_fraction in [0, 1)")
        for s in self.strategies:
            Strategy.parse(s)
        MetricKind.parse(self.metric)
        if self.preset is None and not self.cohort and self.data_dir is None:
            raise ValueError("config needs a preset, a cohort or a data_dir")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **changes) -> "ExperimentConfig":
        d = copy.deepcopy(self.to_dict())
        d.update(changes)
        return ExperimentConfig.from_dict(d)

    # -- derived objects
    def cohort_spec(self) -> CohortSpec:
        d = load_preset(self.preset) if self.preset else {}
        d.update(copy.deepcopy(self.cohort))
        if "seed" not in self.cohort:
            d["seed"] = self.seed
        if self.count_scale != 1.0 and d.get("counts") is not None:
            d["counts"] = [[int(round(c * self.count_scale)) for c in row] for row in d["counts"]]
        if self.count_scale != 1.0 and d.get("client_sizes") is not None:
            d["client_sizes"] = [int(round(c * self.count_scale)) for c in d["client_sizes"]]
        return CohortSpec.from_dict(d)

    def model_config(self, spec: CohortSpec) -> ModelConfig:
        return ModelConfig(
            code_vocab_size=spec.code_vocab_size,
            n_sens_classes=spec.n_groups,
            embed_size=self.embed_size,
            hidden_size=self.hidden_size,
            max_visits=spec.max_visits,
            alpha=self.alpha,
            seed=self.seed,
        )

    def training_config(self) -> TrainingConfig:
        return TrainingConfig(
            local_epochs=self.local_epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            optimizer=self.optimizer,
            alpha=self.alpha,
            threshold=self.threshold,
        )


# ---------------------------------------------------------------- running


def load_clients(config: ExperimentConfig) -> tuple[CohortSpec, list]:
    spec = config.cohort_spec()
    if config.data_dir is None:
        return spec, generate_cohort(spec)
    files = sorted(Path(config.data_dir).glob("client_*.jsonl"),
                   key=lambda p: int(p.stem.split("_")[1]))
    if not files:
        raise FileNotFoundError(f"no client_*.jsonl files in {config.data_dir}")
    clients = [read_patients(f, spec.code_vocab_size, spec.n_groups) for f in files]
    return spec, clients


def client_folds(clients: Sequence[list], config: ExperimentConfig) -> list:
    """``folds[f][k]`` is client k's ``(train, validation, test)`` in fold f."""
    per_client = [kfold(records, config.folds, seed=config.seed * 1000 + k,
                        val_fraction=config.val_fraction)
                  for k, records in enumerate(clients)]
    return [[(pc[f].train, pc[f].validation, pc[f].test) for pc in per_client]
            for f in range(config.folds)]


def save_models(fed: Federation, stem: Path) -> list:
    """Write the final parameters; no_fed has no global model, so one file per client."""
    if fed.server.strategy is Strategy.NO_FED:
        paths = [stem.with_name(f"{stem.name}_client{k}.bin") for k in range(len(fed.clients))]
        for path, pv in zip(paths, fed.local_params):
            save_checkpoint(path, pv)
        return paths
    path = stem.with_name(stem.name + ".bin")
    save_checkpoint(path, fed.server.params)
    return [path]


def run_fold(fold_data, spec: CohortSpec, config: ExperimentConfig, strategy,
             beta: float, fold: int, log_path=None) -> dict:
    t0 = time.perf_counter()
    fed = Federation(
        fold_data,
        config.model_config(spec),
        strategy=strategy,
        beta=beta,
        metric=config.metric,
        training=config.training_config(),
        participation_fraction=config.participation_fraction,
        seed=config.seed * 1000 + fold,
        max_workers=config.workers,
        log_path=log_path,
    )
    fed.run_training(config.rounds)
    report = fed.final_report()
    return {
        "strategy": Strategy.parse(strategy).value,
        "beta": beta,
        "fold": fold,
        "accuracy": report["accuracy"],
        "tpsd": report["tpsd"],
        "worst_tpr": report["worst_tpr"],
        "apsd": report["apsd"],
        "seconds": time.perf_counter() - t0,
        "federation": fed,
    }


def _uses_beta(strategy) -> bool:
    return Strategy.parse(strategy) in (Strategy.FAIRFED_LIKE, Strategy.FAIRNESS_WEIGHTED)


def _fmt(value) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return ""
    return f"{value:.6f}"


def _display(metric: str, value):
    """Scale accuracy and APSD to percent for reporting."""
    if value is None:
        return None
    return value * 100.0 if metric in ("accuracy", "apsd") else value


def summarize(rows: Sequence[dict], metric: str):
    values = [r[metric] for r in rows if r.get(metric) is not None]
    if not values:
        return None, None
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def detail_line(row: dict, record_seconds: bool) -> list:
    line = [row["strategy"], _fmt(row["beta"]) if _uses_beta(row["strategy"]) else "", str(row["fold"])]
    line += [_fmt(_display(m, row[m])) for m in METRICS]
    line.append(_fmt(row["seconds"]) if record_seconds else "")
    return line


def summary_line(strategy: str, beta, rows: Sequence[dict], record_seconds: bool) -> list:
    line = [strategy, _fmt(beta) if _uses_beta(strategy) else "", "summary"]
    for m in METRICS:
        mean, std = summarize([{m: _display(m, r[m])} for r in rows], m)
        line.append("" if mean is None else f"{mean:.6f}±{std:.6f}")
    secs = sum(r["seconds"] for r in rows)
    line.append(_fmt(secs) if record_seconds else "")
    return line


def _write_csv_atomic(path: Path, lines: Sequence[list]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    writer.writerows(lines)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(buf.getvalue(), encoding="utf-8")
    os.replace(tmp, path)


def _write_resolved_config(out: Path, config: ExperimentConfig, spec: CohortSpec, extra=None) -> None:
    d = {"experiment": config.to_dict(), "cohort": spec.to_dict()}
    if extra:
        d.update(extra)
    (out / "config.resolved.json").write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")


@dataclass
class ExperimentResult:
    rows: list
    csv_path: Optional[Path]
    failures: list

    def summary(self, strategy: str, metric: str):
        rows = [r for r in self.rows if r["strategy"] == Strategy.parse(strategy).value]
        return summarize(rows, metric)


def run_experiment(config: ExperimentConfig, write: bool = True,
                   keep_federations: bool = False) -> ExperimentResult:
    """Every strategy on every fold; one CSV row per (strategy, fold) plus summaries."""
    spec, clients = load_clients(config)
    folds = client_folds(clients, config)
    out = Path(config.output_dir)
    if write:
        out.mkdir(parents=True, exist_ok=True)
        _write_resolved_config(out, config, spec)
    rows, failures = [], []
    for strategy in config.strategies:
        strategy = Strategy.parse(strategy).value
        for f, fold_data in enumerate(folds):
            log_path = None
            if write:
                log_path = out / f"rounds_{strategy}_fold{f}.jsonl"
                log_path.unlink(missing_ok=True)
            try:
                row = run_fold(fold_data, spec, config, strategy, config.beta, f, log_path)
            except Exception as exc:  # a failed fold must not sink the experiment
                log.warning("%s fold %d failed: %s", strategy, f, exc)
                failures.append((strategy, f, str(exc)))
                continue
            if write:
                save_models(row["federation"], out / f"model_{strategy}_fold{f}")
            if not keep_federations:
                row.pop("federation")
            rows.append(row)
    if failures:
        log.warning("%d fold(s) failed; summaries use completed folds only", len(failures))
    csv_path = None
    if write:
        lines = [detail_line(r, config.record_seconds) for r in rows]
        for strategy in config.strategies:
            strategy = Strategy.parse(strategy).value
            srows = [r for r in rows if r["strategy"] == strategy]
            if srows:
                lines.append(summary_line(strategy, config.beta, srows, config.record_seconds))
        csv_path = out / "results.csv"
        _write_csv_atomic(csv_path, lines)
        _write_timings(out / "timings.csv", rows)
    return ExperimentResult(rows, csv_path, failures)


def _write_timings(path: Path, rows) -> None:
    lines = [[r["strategy"], _fmt(r["beta"]), str(r["fold"]), f"{r['seconds']:.3f}"] for r in rows]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("strategy", "beta", "fold", "seconds"))
    w.writerows(lines)
    path.write_text(buf.getvalue())


def beta_sweep(config: ExperimentConfig, betas: Sequence[float] = DEFAULT_BETAS,
               write: bool = True) -> ExperimentResult:
    """Fairness-weighted aggregation at each beta over all folds; one summary row per beta."""
    betas = list(betas)
    if not betas:
        raise ValueError("betas must be non-empty")
    if any(b < 0 for b in betas):
        raise ValueError("betas must be non-negative")
    spec, clients = load_clients(config)
    folds = client_folds(clients, config)
    out = Path(config.output_dir)
    if write:
        out.mkdir(parents=True, exist_ok=True)
        _write_resolved_config(out, config, spec, {"betas": betas})
    rows, failures, summaries = [], [], []
    for beta in betas:
        brows = []
        for f, fold_data in enumerate(folds):
            try:
                row = run_fold(fold_data, spec, config, Strategy.FAIRNESS_WEIGHTED, beta, f)
            except Exception as exc:
                log.warning("beta=%g fold %d failed: %s", beta, f, exc)
                failures.append((beta, f, str(exc)))
                continue
            row.pop("federation")
            brows.append(row)
        rows.extend(brows)
        if brows:
            summaries.append(summary_line(Strategy.FAIRNESS_WEIGHTED.value, beta, brows,
                                          config.record_seconds))
    csv_path = None
    if write:
        csv_path = out / "sweep.csv"
        _write_csv_atomic(csv_path, summaries)
        _write_csv_atomic(out / "sweep_details.csv",
                          [detail_line(r, config.record_seconds) for r in rows])
    return ExperimentResult(rows, csv_path, failures)


# ---------------------------------------------------------------- probing


def _representations(model: DipoleModel, records, batch_size: int = 256) -> np.ndarray:
    E = model.config.code_vocab_size
    chunks = [model.representations(PatientBatch.from_records(records[i : i + batch_size], E))
              for i in range(0, len(records), batch_size)]
    return np.concatenate(chunks)


def probe_sensitive(config: ExperimentConfig, alpha: float, epochs: int = 5,
                    train_share: float = 0.7) -> float:
    """Held-out accuracy of a linear probe predicting the group from frozen representations.

    One model is trained on the pooled cohort at the given ``alpha``; a
    standardised multinomial logistic regression is then fitted on the
    training patients' representations and scored on the rest.
    """
    from sklearn.linear_model import LogisticRegression
    from sklearn.pipeline import make_pipeline
    from sklearn.preprocessing import StandardScaler

    spec, clients = load_clients(config)
    records = [r for c in clients for r in c]
    order = np.random.default_rng([config.seed, 31]).permutation(len(records))
    cut = int(round(train_share * len(records)))
    train = [records[i] for i in order[:cut]]
    test = [records[i] for i in order[cut:]]
    model = DipoleModel(config.model_config(spec), np.random.default_rng([config.seed, 32]))
    opt = make_optimizer(config.optimizer, config.learning_rate)
    train_epochs(model, train, epochs, alpha, opt, config.batch_size,
                 np.random.default_rng([config.seed, 33]))
    probe = make_pipeline(StandardScaler(), LogisticRegression(max_iter=2000))
    probe.fit(_representations(model, train), [r.sens for r in train])
    return float(probe.score(_representations(model, test), [r.sens for r in test]))


# ---------------------------------------------------------------- reporting


def read_results(path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ValueError(f"{path}: unexpected columns {reader.fieldnames}")
        return list(reader)


def _parse_cell(cell: str):
    if not cell:
        return None, None
    if "±" in cell:
        mean, std = cell.split("±")
        return float(mean), float(std)
    return float(cell), None


def report(results_dir) -> str:
    """Per-strategy mean ± std table with ``*`` on the best value of each metric."""
    results_dir = Path(results_dir)
    if not results_dir.is_dir():
        raise FileNotFoundError(f"{results_dir} is not a directory")
    files = [p for p in (results_dir / "results.csv", results_dir / "sweep.csv") if p.exists()]
    if not files:
        raise FileNotFoundError(f"no results.csv or sweep.csv in {results_dir}")
    entries = []
    for path in files:
        rows = read_results(path)
        summary = [r for r in rows if r["fold"] == "summary"]
        if not summary:
            # detail-only file: summarise on the fly
            by_key = {}
            for r in rows:
                by_key.setdefault((r["strategy"], r["beta"]), []).append(r)
            for (strategy, beta), group in by_key.items():
                vals = {m: summarize([{m: _parse_cell(g[m])[0]} for g in group], m) for m in METRICS}
                entries.append((strategy, beta, vals))
            continue
        for r in summary:
            entries.append((r["strategy"], r["beta"], {m: _parse_cell(r[m]) for m in METRICS}))
    best = {}
    for m in METRICS:
        values = [(vals[m][0], i) for i, (_, _, vals) in enumerate(entries) if vals[m][0] is not None]
        if values:
            pick = min(values) if LOWER_IS_BETTER[m] else max(values)
            best[m] = pick[1]
    header = f"{'strategy':<20}{'beta':>8}" + "".join(f"{m:>24}" for m in METRICS)
    lines = [header, "-" * len(header)]
    for i, (strategy, beta, vals) in enumerate(entries):
        cells = []
        for m in METRICS:
            mean, std = vals[m]
            if mean is None:
                cell = "n/a"
            else:
                cell = f"{mean:.4f} ± {std:.4f}" if std is not None else f"{mean:.4f}"
                if best.get(m) == i:
                    cell = "*" + cell
            cells.append(f"{cell:>24}")
        lines.append(f"{strategy:<20}{beta or '-':>8}" + "".join(cells))
    lines.append("* best per metric (lowest TPSD/APSD, highest accuracy/Worst TPR)")
    return "\n".join(lines)
