"""Command line entry point: ``fairfl generate | run | sweep | report``.

Every subcommand takes an optional ``--config`` JSON file holding
:class:`~fairfl.harness.ExperimentConfig` fields; flags given on the command
line override the file. Exit status is 0 on success, 1 for bad usage or
configuration and 2 when a run fails.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from fairfl.data import group_counts, partition_dirichlet, write_patients
from fairfl.harness import (
    ALL_STRATEGIES,
    DEFAULT_BETAS,
    PRESETS,
    ExperimentConfig,
    beta_sweep,
    load_clients,
    report,
    run_experiment,
)

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("fairfl")

# flag dest -> ExperimentConfig field
OVERRIDES = {
    "preset": "preset",
    "data_dir": "data_dir",
    "count_scale": "count_scale",
    "strategies": "strategies",
    "metric": "metric",
    "beta": "beta",
    "alpha": "alpha",
    "rounds": "rounds",
    "local_epochs": "local_epochs",
    "folds": "folds",
    "seed": "seed",
    "batch_size": "batch_size",
    "learning_rate": "learning_rate",
    "optimizer": "optimizer",
    "val_fraction": "val_fraction",
    "participation": "participation_fraction",
    "workers": "workers",
    "record_seconds": "record_seconds",
    "output": "output_dir",
}


class UsageError(Exception):
    pass


def _csv_list(text: str) -> list:
    return [t.strip() for t in text.split(",") if t.strip()]


def _float_list(text: str) -> list:
    try:
        return [float(t) for t in _csv_list(text)]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON file of experiment settings")
    p.add_argument("--preset", choices=PRESETS)
    p.add_argument("--seed", type=int)
    p.add_argument("--count-scale", type=float, help="multiply preset client counts")
    p.add_argument("--output", "-o", help="output directory")


def _add_training(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data-dir", help="read client_*.jsonl instead of generating")
    p.add_argument("--metric", choices=("tpsd", "apsd", "worst_tpr", "accuracy"))
    p.add_argument("--beta", type=float)
    p.add_argument("--alpha", type=float, help="adversary weight in [0, 1]")
    p.add_argument("--rounds", type=int)
    p.add_argument("--local-epochs", type=int)
    p.add_argument("--folds", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--optimizer", choices=("adam", "sgd"))
    p.add_argument("--val-fraction", type=float)
    p.add_argument("--participation", type=float, help="fraction of clients per round")
    p.add_argument("--workers", type=int, help="threads for client updates")
    p.add_argument("--record-seconds", action="store_true", default=None,
                   help="fill the seconds column (breaks byte-identical reruns)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fairfl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic cohort as per-client JSONL files")
    _add_common(g)
    g.add_argument("--dirichlet", type=float, metavar="ALPHA",
                   help="re-partition the pooled cohort with Dirichlet(ALPHA) per group")
    g.add_argument("--clients", type=int, help="client count for --dirichlet")

    r = sub.add_parser("run", help="cross-validated run of one or more strategies")
    _add_common(r)
    _add_training(r)
    r.add_argument("--strategies", type=_csv_list,
                   help=f"comma-separated subset of {','.join(ALL_STRATEGIES)}")

    s = sub.add_parser("sweep", help="fairness-weighted aggregation over several betas")
    _add_common(s)
    _add_training(s)
    s.add_argument("--betas", type=_float_list,
                   default=list(DEFAULT_BETAS), help="comma-separated betas")

    p = sub.add_parser("report", help="summarise results.csv / sweep.csv in a directory")
    p.add_argument("results_dir", type=Path)
    return parser


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    base = {}
    if getattr(args, "config", None) is not None:
        # merge raw keys so unset fields still follow a preset given on the command line
        try:
            base = json.loads(args.config.read_text())
        except FileNotFoundError as exc:
            raise UsageError(f"config file not found: {args.config}") from exc
        except ValueError as exc:
            raise UsageError(f"{args.config}: invalid JSON ({exc})") from exc
        if not isinstance(base, dict):
            raise UsageError(f"{args.config}: expected a JSON object")
    for dest, name in OVERRIDES.items():
        value = getattr(args, dest, None)
        if value is not None:
            base[name] = value
    try:
        return ExperimentConfig.from_dict(base)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def cmd_generate(args) -> int:
    config = resolve_config(args)
    spec, clients = load_clients(config)
    if args.dirichlet is not None:
        pooled = [r for c in clients for r in c]
        k = args.clients or len(clients)
        clients = partition_dirichlet(pooled, k, args.dirichlet, seed=config.seed)
    elif args.clients is not None:
        raise UsageError("--clients only applies together with --dirichlet")
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    for k, records in enumerate(clients):
        write_patients(out / f"client_{k}.jsonl", records)
        counts = group_counts(records, spec.n_groups)
        print(f"client_{k}.jsonl  n={len(records)}  groups={counts.tolist()}")
    (out / "cohort.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_run(args) -> int:
    config = resolve_config(args)
    result = run_experiment(config)
    print(report(config.output_dir))
    if result.failures:
        print(f"{len(result.failures)} fold(s) failed", file=sys.stderr)
        return EXIT_RUNTIME if not result.rows else EXIT_OK
    return EXIT_OK


def cmd_sweep(args) -> int:
    config = resolve_config(args)
    if not args.betas or any(b < 0 for b in args.betas):
        raise UsageError("--betas needs at least one non-negative value")
    result = beta_sweep(config, args.betas)
    print(report(config.output_dir))
    return EXIT_RUNTIME if not result.rows else EXIT_OK


def cmd_report(args) -> int:
    try:
        print(report(args.results_dir))
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from exc
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "run": cmd_run, "sweep": cmd_sweep, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad usage; keep 2 for runtime failures
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"fairfl: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        log.debug("run failed", exc_info=True)
        print(f"fairfl: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
