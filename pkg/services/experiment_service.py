import itertools
import json
import logging
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

from pydantic import ValidationError

from config import settings
from database.checkpoint_store import list_epoch_checkpoints, load_checkpoint
from database.result_store import ResultStore
from logger_config import setup_logging
from models.exceptions import AffineSSLError, ConfigurationError
from models.schemas import (
    GRID_AXES,
    AffineModuleConfig,
    ComponentMask,
    ExperimentConfig,
    GridSpec,
    RunStatus,
)
from services.eval_harness import evaluate
from services.training_engine import fit

logger = logging.getLogger(__name__)

PROFILES_DIR = Path(__file__).resolve().parent.parent / "profiles"


def _read_json(path: Union[str, Path]) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"Config file not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"{path} is not valid JSON: {e}") from e


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    """Validate an experiment config file; unknown keys are rejected."""
    try:
        return ExperimentConfig.model_validate(_read_json(path))
    except ValidationError as e:
        raise ConfigurationError(f"Invalid experiment config {path}:\n{e}") from e


def load_grid(path: Union[str, Path]) -> GridSpec:
    try:
        return GridSpec.model_validate(_read_json(path))
    except ValidationError as e:
        raise ConfigurationError(f"Invalid grid spec {path}:\n{e}") from e


def available_profiles() -> List[str]:
    return sorted(p.stem for p in PROFILES_DIR.glob("*.json"))


def load_profile(name: str) -> ExperimentConfig:
    path = PROFILES_DIR / f"{name}.json"
    if not path.exists():
        raise ConfigurationError(f"Unknown profile '{name}'; available: {available_profiles()}")
    return load_config(path)


def _set_axis(payload: Dict[str, Any], axis: str, value: Any) -> None:
    if axis == "method":
        payload["method"] = value
    elif axis == "seed":
        payload["seeds"] = [int(value)]
    elif axis == "affine":
        payload["affine"]["enabled"] = bool(value)
    elif axis == "components":
        mask = ComponentMask.only(value) if isinstance(value, str) else ComponentMask.model_validate(value)
        payload["affine"]["components"] = mask.model_dump()
    else:
        payload["affine"][axis] = value


def expand_grid(grid: GridSpec) -> List[ExperimentConfig]:
    """
    Cartesian product of the grid axes over the base config, one config per seed.

    Cells with the affine module off drop their affine options so that they
    collapse onto a single baseline per (method, seed). Duplicates (same
    config hash) are removed; the order is the axis order of GRID_AXES.
    """
    axes = [a for a in GRID_AXES if a in grid.axes]
    seeds = grid.axes.get("seed", grid.base.seeds)
    base = grid.base.model_dump(mode="json")

    configs: Dict[str, ExperimentConfig] = {}
    for values in itertools.product(*(grid.axes[a] for a in axes)):
        payload = json.loads(json.dumps(base))
        for axis, value in zip(axes, values):
            try:
                _set_axis(payload, axis, value)
            except ValueError as e:
                raise ConfigurationError(f"Bad value {value!r} for grid axis '{axis}': {e}") from e
        if not payload["affine"]["enabled"]:
            defaults = AffineModuleConfig(enabled=False).model_dump(mode="json")
            defaults["ranges"] = payload["affine"]["ranges"]
            payload["affine"] = defaults
        cell_seeds = payload["seeds"] if "seed" in grid.axes else seeds
        for seed in cell_seeds:
            payload["seeds"] = [int(seed)]
            try:
                config = ExperimentConfig.model_validate(payload)
            except ValidationError as e:
                raise ConfigurationError(f"Grid cell {dict(zip(axes, values))} is invalid:\n{e}") from e
            configs.setdefault(config.config_hash(), config)
    return list(configs.values())


def evaluate_snapshots(config: ExperimentConfig, run_id: str, store: ResultStore) -> int:
    """Probe every evaluation snapshot of a cell that has no results yet; returns the number probed."""
    done = {(p.epoch, p.dataset) for p in store.list_probes(run_id)}
    skipped = {w.dataset for w in store.list_warnings(run_id)}
    probed = 0
    for snapshot in list_epoch_checkpoints(store.checkpoint_dir(run_id)):
        epoch = load_checkpoint(snapshot)["epoch"]
        missing = [d for d in config.eval_datasets if (epoch, d.name) not in done and d.name not in skipped]
        if not missing:
            continue
        evaluate(snapshot, missing, store=store)
        probed += 1
    return probed


def run_cell(config: ExperimentConfig, store: ResultStore, resume: bool = True) -> Tuple[str, bool]:
    """
    Train and evaluate one single-seed cell unless it already completed.

    An unfinished cell continues from its last checkpoint unless `resume` is
    False, in which case training restarts from scratch.

    Returns:
        (run_id, ran)
    """
    run_id = store.register(config)
    if store.is_completed(run_id):
        logger.info(f"Cell {run_id} already completed, skipping")
        return run_id, False
    if not resume:
        store.delete_run(run_id)
        store.register(config)

    result = fit(config, resume=resume, store=store)
    if result.finished:
        store.set_status(run_id, RunStatus.RUNNING)
        try:
            evaluate_snapshots(config, run_id, store)
        except Exception as e:
            logger.error(f"[{run_id}] evaluation failed: {str(e)}")
            store.set_status(run_id, RunStatus.FAILED, str(e))
            raise
        store.set_status(run_id, RunStatus.COMPLETED)
    return run_id, True


def _run_cell_job(config_json: str, store_root: str) -> Tuple[str, bool, Optional[str]]:
    """Process-pool entry point; never raises so one cell cannot stop the grid."""
    setup_logging()
    config = ExperimentConfig.model_validate_json(config_json)
    store = ResultStore(store_root)
    try:
        run_id, ran = run_cell(config, store)
        return run_id, ran, None
    except Exception as e:
        return config.config_hash(), True, f"{type(e).__name__}: {e}"


@dataclass
class GridReport:
    store: ResultStore
    cells: List[str] = field(default_factory=list)
    ran: List[str] = field(default_factory=list)
    skipped: List[str] = field(default_factory=list)
    failed: Dict[str, str] = field(default_factory=dict)


def run_grid(grid: GridSpec, store: Optional[ResultStore] = None, parallelism: Optional[int] = None) -> GridReport:
    """
    Run every cell of the grid; completed cells are skipped by config hash
    and a failing cell is recorded without stopping the others.

    Args:
        grid: Base config and axes
        store: Result store; defaults to the base config's output directory
        parallelism: Concurrent cells; defaults to grid.parallelism

    Returns:
        GridReport holding the store and per-cell outcomes
    """
    store = store or ResultStore(grid.base.output_dir or settings.output_dir)
    configs = expand_grid(grid)
    workers = parallelism or grid.parallelism
    report = GridReport(store=store, cells=[c.config_hash() for c in configs])
    logger.info(f"Grid '{grid.name}': {len(configs)} cells, parallelism {workers}")

    pending = []
    for config in configs:
        run_id = store.register(config)
        if store.is_completed(run_id):
            report.skipped.append(run_id)
        else:
            pending.append(config)

    def record(run_id: str, ran: bool, error: Optional[str]) -> None:
        if error is not None:
            logger.error(f"Cell {run_id} failed: {error}")
            report.failed[run_id] = error
        elif ran:
            report.ran.append(run_id)
        else:
            report.skipped.append(run_id)

    if workers <= 1:
        for config in pending:
            try:
                record(*run_cell(config, store), None)
            except (AffineSSLError, RuntimeError, OSError) as e:
                record(config.config_hash(), True, f"{type(e).__name__}: {e}")
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_cell_job, c.model_dump_json(), str(store.root)) for c in pending]
            for future in as_completed(futures):
                record(*future.result())

    store.write_summary()
    logger.info(
        f"Grid '{grid.name}' done: {len(report.ran)} ran, {len(report.skipped)} skipped, {len(report.failed)} failed"
    )
    return report
