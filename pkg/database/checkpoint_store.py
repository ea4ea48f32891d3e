"""
Versioned checkpoint container and the append-only metrics stream.

A checkpoint is a single torch.save file holding a plain dict:

    format_version   int, CHECKPOINT_FORMAT_VERSION
    config_hash      ExperimentConfig.config_hash() of the run
    config           the config as JSON text
    epoch            epochs completed
    global_step      optimizer steps taken
    seed             pretraining seed
    networks         SSLNetworks.state_dict()
    optimizer        optimizer.state_dict() (absent for evaluation snapshots)
    ema              {"tau", "step"} or None

Files are written to a temporary sibling and moved into place with
os.replace, so a failed write leaves the previous checkpoint intact.
"""

import json
import logging
import os
import tempfile
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional

import torch

from models.exceptions import ConfigurationError, ContractError
from models.schemas import ExperimentConfig, MetricsRecord

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
LAST_CHECKPOINT = "last.pt"


def epoch_checkpoint_name(epoch: int) -> str:
    return f"epoch_{epoch:04d}.pt"


def save_checkpoint(
    path: Path,
    config: ExperimentConfig,
    epoch: int,
    global_step: int,
    seed: int,
    network_state: Dict[str, Any],
    optimizer_state: Optional[Dict[str, Any]] = None,
    ema_state: Optional[Dict[str, Any]] = None,
) -> Path:
    """Atomically write a checkpoint container to `path`."""
    path = Path(path)
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config_hash": config.config_hash(),
        "config": config.model_dump_json(),
        "epoch": int(epoch),
        "global_step": int(global_step),
        "seed": int(seed),
        "networks": network_state,
        "optimizer": optimizer_state,
        "ema": ema_state,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            torch.save(payload, fh)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp_name, path)
    except Exception as e:
        logger.error(f"Error writing checkpoint {path}: {str(e)}")
        if os.path.exists(tmp_name):
            os.remove(tmp_name)
        raise
    logger.debug(f"Saved checkpoint {path} (epoch {epoch}, step {global_step})")
    return path


def load_checkpoint(
    path: Path,
    config: Optional[ExperimentConfig] = None,
    map_location: str = "cpu",
) -> Dict[str, Any]:
    """
    Read a checkpoint container and validate its header.

    Args:
        path: Checkpoint file
        config: When given, the stored config hash must match it
        map_location: torch device for the tensors

    Returns:
        The checkpoint dict
    """
    path = Path(path)
    if not path.exists():
        raise ContractError(f"Checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location=map_location, weights_only=True)
    except Exception as e:
        logger.error(f"Error reading checkpoint {path}: {str(e)}")
        raise ContractError(f"Unreadable checkpoint {path}: {e}") from e

    version = payload.get("format_version") if isinstance(payload, dict) else None
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ContractError(f"Unsupported checkpoint format {version} in {path}")
    if config is not None and payload["config_hash"] != config.config_hash():
        raise ConfigurationError(
            f"Checkpoint {path} belongs to config {payload['config_hash']}, not {config.config_hash()}"
        )
    return payload


def checkpoint_config(payload: Dict[str, Any]) -> ExperimentConfig:
    return ExperimentConfig.model_validate_json(payload["config"])


def latest_checkpoint(directory: Path) -> Optional[Path]:
    path = Path(directory) / LAST_CHECKPOINT
    return path if path.exists() else None


def list_epoch_checkpoints(directory: Path) -> List[Path]:
    directory = Path(directory)
    if not directory.exists():
        return []
    return sorted(directory.glob("epoch_*.pt"))


class MetricsWriter:
    """
    Append-only newline-delimited JSON stream of MetricsRecords.

    On resume, records beyond the checkpoint's step are dropped first so
    that the finished file equals the one an uninterrupted run writes.
    """

    def __init__(self, path: Path, resume_step: Optional[int] = None):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if resume_step is None:
            self.path.write_text("")
        else:
            self.truncate_after(resume_step)
        self._fh = open(self.path, "a", encoding="utf-8")

    def truncate_after(self, step: int) -> int:
        """Keep records with step < `step`; returns how many were kept."""
        kept = [r for r in read_metrics(self.path) if r.step < step]
        self.path.write_text("".join(r.model_dump_json() + "\n" for r in kept))
        logger.info(f"Metrics stream {self.path} truncated to {len(kept)} records")
        return len(kept)

    def append(self, record: MetricsRecord) -> None:
        self._fh.write(record.model_dump_json() + "\n")
        self._fh.flush()

    def close(self) -> None:
        if not self._fh.closed:
            self._fh.close()

    def __enter__(self) -> "MetricsWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_metrics(path: Path, limit: Optional[int] = None) -> List[MetricsRecord]:
    path = Path(path)
    if not path.exists():
        return []
    records = [MetricsRecord.model_validate_json(line) for line in _lines(path)]
    return records[:limit] if limit is not None else records


def _lines(path: Path) -> Iterable[str]:
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield line


def append_jsonl(path: Path, payload: Dict[str, Any]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(payload, sort_keys=True, default=str) + "\n")


def read_jsonl(path: Path) -> List[Dict[str, Any]]:
    path = Path(path)
    if not path.exists():
        return []
    return [json.loads(line) for line in _lines(path)]
