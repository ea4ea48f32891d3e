"""
Command-line entry point.

    python cli.py run --profile smoke --data-root ./data
    python cli.py grid --grid grids/main.json --parallelism 2
    python cli.py eval --checkpoint runs/cells/<id>/checkpoints/epoch_0005.pt --dataset cifar10
    python cli.py report --output-dir runs --curves
    python cli.py serve --port 8000

Exit codes: 0 ok, 2 configuration error, 3 missing or unreadable data,
4 run failure.
"""

import argparse
import json
import logging
import sys
from typing import List, Optional

from pydantic import ValidationError

from config import settings
from database.result_store import ResultStore
from logger_config import setup_logging
from models.exceptions import (
    EXIT_CONFIG_ERROR,
    EXIT_OK,
    EXIT_RUN_FAILURE,
    AffineSSLError,
    ConfigurationError,
    exit_code_for,
)
from models.schemas import EvalDatasetSpec, ExperimentConfig
from services import experiment_service, report_service
from services.eval_harness import evaluate

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Self-supervised pretraining with affine transformation prediction")
    parser.add_argument("--log-level", type=str, default=None, help="Logging level (default: settings.log_level)")
    parser.add_argument("--log-file", type=str, default=None, help="Also log to this file")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="Pretrain and evaluate one experiment config")
    source = run.add_mutually_exclusive_group(required=True)
    source.add_argument("--config", type=str, help="Experiment config JSON file")
    source.add_argument("--profile", type=str, help=f"Bundled profile: {', '.join(experiment_service.available_profiles())}")
    run.add_argument("--seed", type=int, action="append", default=None, help="Pretraining seed (repeatable); overrides the config")
    run.add_argument("--data-root", type=str, default=None, help="Dataset root directory")
    run.add_argument("--output-dir", type=str, default=None, help="Result store directory")
    run.add_argument("--resume", action="store_true", help="Continue unfinished cells from their last checkpoint")

    grid = sub.add_parser("grid", help="Run every cell of a grid spec")
    grid.add_argument("--grid", type=str, required=True, help="Grid spec JSON file")
    grid.add_argument("--parallelism", type=int, default=None, help="Concurrent cells (default: from the grid spec)")
    grid.add_argument("--data-root", type=str, default=None, help="Dataset root directory")
    grid.add_argument("--output-dir", type=str, default=None, help="Result store directory")

    ev = sub.add_parser("eval", help="Linear-probe a checkpoint")
    ev.add_argument("--checkpoint", type=str, required=True, help="Checkpoint or evaluation snapshot")
    ev.add_argument("--dataset", type=str, nargs="+", required=True, help="Downstream dataset ids")
    ev.add_argument("--trials", type=int, default=None, help="Probe trials (default: from the checkpoint config)")
    ev.add_argument("--train-limit", type=int, default=None, help="Probe training images per dataset")
    ev.add_argument("--eval-limit", type=int, default=None, help="Held-out images per dataset")
    ev.add_argument("--data-root", type=str, default=None, help="Dataset root directory")

    report = sub.add_parser("report", help="Render tables and curves from a result store")
    report.add_argument("--output-dir", type=str, default=None, help="Result store directory")
    report.add_argument("--report-dir", type=str, default=None, help="Where to write (default: <store>/report)")
    report.add_argument("--curves", action="store_true", help="Also render accuracy-vs-epoch figures")

    serve = sub.add_parser("serve", help="Start the read-only results API")
    serve.add_argument("--host", type=str, default=None, help="Bind address")
    serve.add_argument("--port", type=int, default=None, help="Port")
    serve.add_argument("--output-dir", type=str, default=None, help="Result store directory")
    return parser


def apply_overrides(
    config: ExperimentConfig,
    seeds: Optional[List[int]] = None,
    data_root: Optional[str] = None,
    output_dir: Optional[str] = None,
) -> ExperimentConfig:
    """Apply command-line overrides; the result is re-validated."""
    payload = config.model_dump(mode="json")
    if seeds:
        payload["seeds"] = list(seeds)
    if data_root:
        payload["data"]["root"] = data_root
    if output_dir:
        payload["output_dir"] = output_dir
    try:
        return ExperimentConfig.model_validate(payload)
    except ValidationError as e:
        raise ConfigurationError(f"Invalid overrides:\n{e}") from e


def cmd_run(args) -> int:
    config = (
        experiment_service.load_config(args.config) if args.config else experiment_service.load_profile(args.profile)
    )
    config = apply_overrides(config, args.seed, args.data_root, args.output_dir)
    store = ResultStore(config.output_dir or settings.output_dir)
    for seed in config.seeds:
        run_id, ran = experiment_service.run_cell(config.with_seed(seed), store, resume=args.resume)
        print(f"{run_id} seed={seed} {'done' if ran else 'already completed'}")
    store.write_summary()
    return EXIT_OK


def cmd_grid(args) -> int:
    grid = experiment_service.load_grid(args.grid)
    base = apply_overrides(grid.base, data_root=args.data_root, output_dir=args.output_dir)
    grid = grid.model_copy(update={"base": base})
    report = experiment_service.run_grid(grid, parallelism=args.parallelism)
    print(f"{len(report.cells)} cells: {len(report.ran)} ran, {len(report.skipped)} skipped, {len(report.failed)} failed")
    for run_id, error in report.failed.items():
        print(f"  {run_id}: {error}")
    return EXIT_OK if not report.failed else EXIT_RUN_FAILURE


def cmd_eval(args) -> int:
    datasets = [EvalDatasetSpec(name=n, train_limit=args.train_limit, eval_limit=args.eval_limit) for n in args.dataset]
    results = evaluate(args.checkpoint, datasets, trials=args.trials, data_root=args.data_root)
    for result in results:
        print(json.dumps(result.model_dump(mode="json")))
    return EXIT_OK


def cmd_report(args) -> int:
    store = ResultStore(args.output_dir or settings.output_dir)
    tables = report_service.render_tables(store, args.report_dir)
    for table in tables:
        print(report_service.format_table(table))
    if args.curves:
        for path in report_service.render_curves(store, args.report_dir):
            print(path)
    return EXIT_OK


def cmd_serve(args) -> int:
    import main

    if args.output_dir:
        settings.output_dir = args.output_dir
    main.serve(host=args.host, port=args.port)
    return EXIT_OK


COMMANDS = {
    "run": cmd_run,
    "grid": cmd_grid,
    "eval": cmd_eval,
    "report": cmd_report,
    "serve": cmd_serve,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(log_level=args.log_level, log_file=args.log_file)
    try:
        return COMMANDS[args.command](args)
    except AffineSSLError as e:
        logger.error(f"{e.error_code}: {str(e)}")
        return exit_code_for(e)
    except ValidationError as e:
        logger.error(f"Invalid input: {str(e)}")
        return EXIT_CONFIG_ERROR


if __name__ == "__main__":
    sys.exit(main())
