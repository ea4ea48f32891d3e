import json
import logging
import shutil
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional

from database.checkpoint_store import append_jsonl, read_jsonl, read_metrics
from models.exceptions import ContractError
from models.schemas import (
    EvaluationWarning,
    ExperimentConfig,
    MetricsRecord,
    ProbeResult,
    RunDetail,
    RunStatus,
    RunSummary,
)

logger = logging.getLogger(__name__)

CONFIG_FILE = "config.json"
STATUS_FILE = "status.json"
METRICS_FILE = "metrics.jsonl"
PROBES_FILE = "probes.jsonl"
WARNINGS_FILE = "warnings.jsonl"
CHECKPOINT_DIR = "checkpoints"
SUMMARY_FILE = "summary.json"


class ResultStore:
    """
    Directory of grid cells, one sub-directory per config hash.

    Each cell only ever writes its own files, so cells running in separate
    processes never contend; listings merge the cells at read time.
    """

    def __init__(self, root: str = "./runs"):
        self.root = Path(root)
        self.cells_dir = self.root / "cells"
        self._initialize()

    def _initialize(self):
        try:
            self.cells_dir.mkdir(parents=True, exist_ok=True)
            logger.debug(f"Result store at {self.root}")
        except Exception as e:
            logger.error(f"Error initializing result store: {str(e)}")
            raise

    def cell_dir(self, run_id: str) -> Path:
        return self.cells_dir / run_id

    def metrics_path(self, run_id: str) -> Path:
        return self.cell_dir(run_id) / METRICS_FILE

    def checkpoint_dir(self, run_id: str) -> Path:
        return self.cell_dir(run_id) / CHECKPOINT_DIR

    def exists(self, run_id: str) -> bool:
        return (self.cell_dir(run_id) / CONFIG_FILE).exists()

    def register(self, config: ExperimentConfig) -> str:
        """Create the cell for a single-seed config if it is new; returns its run id."""
        if len(config.seeds) != 1:
            raise ContractError("A result cell holds exactly one seed")
        run_id = config.config_hash()
        cell = self.cell_dir(run_id)
        if not self.exists(run_id):
            cell.mkdir(parents=True, exist_ok=True)
            (cell / CONFIG_FILE).write_text(config.model_dump_json(indent=2))
            self.set_status(run_id, RunStatus.PENDING)
            logger.info(f"Registered cell {run_id} ({config.method.value}, {config.variant_label()}, seed {config.seeds[0]})")
        return run_id

    def set_status(self, run_id: str, status: RunStatus, error_message: Optional[str] = None) -> None:
        payload = {
            "status": RunStatus(status).value,
            "updated_at": datetime.now().isoformat(),
            "error_message": error_message,
        }
        path = self.cell_dir(run_id) / STATUS_FILE
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(payload))
        tmp.replace(path)

    def get_status(self, run_id: str) -> Dict[str, Any]:
        path = self.cell_dir(run_id) / STATUS_FILE
        if not path.exists():
            return {"status": RunStatus.PENDING.value, "updated_at": None, "error_message": None}
        return json.loads(path.read_text())

    def is_completed(self, run_id: str) -> bool:
        return self.exists(run_id) and self.get_status(run_id)["status"] == RunStatus.COMPLETED.value

    def get_config(self, run_id: str) -> Optional[ExperimentConfig]:
        path = self.cell_dir(run_id) / CONFIG_FILE
        if not path.exists():
            return None
        return ExperimentConfig.model_validate_json(path.read_text())

    def append_probe(self, run_id: str, result: ProbeResult) -> None:
        append_jsonl(self.cell_dir(run_id) / PROBES_FILE, result.model_dump(mode="json"))

    def append_warning(self, run_id: str, warning: EvaluationWarning) -> None:
        append_jsonl(self.cell_dir(run_id) / WARNINGS_FILE, warning.model_dump(mode="json"))

    def list_probes(self, run_id: Optional[str] = None) -> List[ProbeResult]:
        """Probe results of one cell, or of every cell in run-id order."""
        run_ids = [run_id] if run_id else self.run_ids()
        results: List[ProbeResult] = []
        for rid in run_ids:
            results.extend(ProbeResult.model_validate(p) for p in read_jsonl(self.cell_dir(rid) / PROBES_FILE))
        return results

    def list_warnings(self, run_id: Optional[str] = None) -> List[EvaluationWarning]:
        run_ids = [run_id] if run_id else self.run_ids()
        warnings: List[EvaluationWarning] = []
        for rid in run_ids:
            warnings.extend(EvaluationWarning.model_validate(w) for w in read_jsonl(self.cell_dir(rid) / WARNINGS_FILE))
        return warnings

    def read_metrics(self, run_id: str, limit: Optional[int] = None) -> List[MetricsRecord]:
        return read_metrics(self.metrics_path(run_id), limit)

    def run_ids(self) -> List[str]:
        if not self.cells_dir.exists():
            return []
        return sorted(d.name for d in self.cells_dir.iterdir() if (d / CONFIG_FILE).exists())

    def _summary(self, run_id: str) -> RunSummary:
        config = self.get_config(run_id)
        status = self.get_status(run_id)
        return RunSummary(
            id=run_id,
            method=config.method.value,
            variant=config.variant_label(),
            seed=config.seeds[0],
            status=RunStatus(status["status"]),
            updated_at=status.get("updated_at"),
        )

    def list_runs(self) -> List[RunSummary]:
        try:
            return [self._summary(rid) for rid in self.run_ids()]
        except Exception as e:
            logger.error(f"Error listing runs: {str(e)}")
            raise

    def get_run(self, run_id: str) -> Optional[RunDetail]:
        if not self.exists(run_id):
            return None
        return RunDetail(
            summary=self._summary(run_id),
            config=self.get_config(run_id),
            error_message=self.get_status(run_id).get("error_message"),
        )

    def delete_run(self, run_id: str) -> bool:
        if not self.exists(run_id):
            logger.warning(f"No cell found for run {run_id}")
            return False
        shutil.rmtree(self.cell_dir(run_id))
        logger.info(f"Deleted cell {run_id}")
        return True

    def get_stats(self) -> Dict[str, Any]:
        runs = self.list_runs()
        counts = {status.value: 0 for status in RunStatus}
        for run in runs:
            counts[run.status.value] += 1
        return {
            "total_runs": len(runs),
            "completed": counts[RunStatus.COMPLETED.value],
            "failed": counts[RunStatus.FAILED.value],
            "pending": counts[RunStatus.PENDING.value],
            "running": counts[RunStatus.RUNNING.value],
            "total_probes": len(self.list_probes()),
            "root": str(self.root),
        }

    def write_summary(self) -> Path:
        """Regenerate summary.json from the per-cell records."""
        payload = {
            "generated_at": datetime.now().isoformat(),
            "stats": self.get_stats(),
            "runs": [r.model_dump(mode="json") for r in self.list_runs()],
        }
        path = self.root / SUMMARY_FILE
        path.write_text(json.dumps(payload, indent=2))
        return path

