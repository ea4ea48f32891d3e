import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch
from torch.utils.data import DataLoader

from config import settings
from database.checkpoint_store import (
    LAST_CHECKPOINT,
    MetricsWriter,
    epoch_checkpoint_name,
    latest_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from database.result_store import ResultStore
from logger_config import run_log
from models.exceptions import ContractError, NumericError, TrainingDivergedError
from models.networks import SSLNetworks, build_networks
from models.schemas import (
    AffineViews,
    ExperimentConfig,
    MetricsRecord,
    OptimizerConfig,
    RepresentationSource,
    RunStatus,
)
from services.affine_module import combined_loss, make_affine_view, transition_loss
from services.ssl_methods import EmaState, ema_state_for, ema_tau, ema_update, forward_bundle, ssl_loss
from services.view_pipeline import (
    AFFINE_STREAM,
    ViewBatchDataset,
    default_root,
    epoch_steps,
    keyed_rng,
    load_dataset,
)

logger = logging.getLogger(__name__)


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """base_lr * (1 + cos(pi * step / total_steps)) / 2."""
    if total_steps <= 0:
        raise ContractError(f"total_steps must be positive, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    return base_lr * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0


def learning_rate(step: int, total_steps: int, steps_per_epoch: int, cfg: OptimizerConfig) -> float:
    """Linear warmup over cfg.warmup_epochs, then the configured decay."""
    warmup = min(cfg.warmup_epochs * steps_per_epoch, total_steps)
    if step < warmup:
        return cfg.learning_rate * (step + 1) / warmup
    if cfg.schedule == "constant":
        return cfg.learning_rate
    return cosine_lr(step - warmup, max(total_steps - warmup, 1), cfg.learning_rate)


def build_optimizer(networks: SSLNetworks, cfg: OptimizerConfig) -> torch.optim.Optimizer:
    """SGD with momentum; biases and normalisation parameters get no weight decay."""
    decay, no_decay = [], []
    for param in networks.trainable_parameters():
        (no_decay if param.ndim <= 1 else decay).append(param)
    return torch.optim.SGD(
        [
            {"params": decay, "weight_decay": cfg.weight_decay},
            {"params": no_decay, "weight_decay": 0.0},
        ],
        lr=cfg.learning_rate,
        momentum=cfg.momentum,
    )


@dataclass
class TrainState:
    """Everything a training step mutates."""

    networks: SSLNetworks
    optimizer: torch.optim.Optimizer
    ema: Optional[EmaState]
    run_id: str
    seed: int
    total_steps: int
    steps_per_epoch: int
    epoch: int = 0
    global_step: int = 0
    clock_start: float = field(default_factory=time.perf_counter)


def init_train_state(config: ExperimentConfig, seed: int, steps_per_epoch: int, device: str = "cpu") -> TrainState:
    torch.manual_seed(seed)
    networks = build_networks(config).to(device)
    return TrainState(
        networks=networks,
        optimizer=build_optimizer(networks, config.optimizer),
        ema=ema_state_for(networks, config.loss.ema_tau),
        run_id=config.with_seed(seed).config_hash(),
        seed=seed,
        total_steps=config.optimizer.epochs * steps_per_epoch,
        steps_per_epoch=steps_per_epoch,
    )


def _step_losses(networks, x1, x2, x1a, x2a, phi1, phi2, config: ExperimentConfig):
    """l_ssl and the per-view affine losses (None when absent)."""
    affine = config.affine
    bundle = forward_bundle(config.method, networks, x1, x2, x1a, x2a, affine.source)
    l_ssl = ssl_loss(config.method, bundle, config.loss)
    if not affine.enabled:
        return l_ssl, None, None

    by_projector = affine.source == RepresentationSource.PROJECTOR
    l_aff1 = transition_loss(
        bundle.z1 if by_projector else bundle.h1,
        bundle.z1a if by_projector else bundle.h1a,
        phi1,
        affine,
        networks.regressor,
    )
    l_aff2 = None
    if phi2 is not None:
        l_aff2 = transition_loss(
            bundle.z2 if by_projector else bundle.h2,
            bundle.z2a if by_projector else bundle.h2a,
            phi2,
            affine,
            networks.regressor,
        )
    return l_ssl, l_aff1, l_aff2


def train_step(
    state: TrainState,
    x1: torch.Tensor,
    x2: torch.Tensor,
    config: ExperimentConfig,
    rng: Optional[np.random.Generator] = None,
    lr: Optional[float] = None,
) -> MetricsRecord:
    """
    One optimizer update on the combined loss.

    The BYOL target moves by EMA after the gradient step. A non-finite loss
    aborts before any parameter changes, with the diagnostic record attached
    to the raised TrainingDivergedError.

    Args:
        state: Networks, optimizer and counters; advanced in place
        x1: First augmented view batch
        x2: Second augmented view batch
        config: Run configuration
        rng: Affine sampling source; defaults to the (seed, epoch, step) stream
        lr: Learning-rate override; defaults to the schedule

    Returns:
        MetricsRecord of the step
    """
    affine = config.affine
    networks = state.networks
    networks.train()
    if rng is None:
        rng = keyed_rng(state.seed, state.epoch, state.global_step, AFFINE_STREAM)
    if lr is None:
        lr = learning_rate(state.global_step, state.total_steps, state.steps_per_epoch, config.optimizer)
    for group in state.optimizer.param_groups:
        group["lr"] = lr

    x1a = x2a = phi1 = phi2 = None
    if affine.enabled:
        x1a, phi1 = make_affine_view(x1, rng, affine)
        if affine.views == AffineViews.BOTH:
            x2a, phi2 = make_affine_view(x2, rng, affine)

    try:
        l_ssl, l_aff1, l_aff2 = _step_losses(networks, x1, x2, x1a, x2a, phi1, phi2, config)
    except NumericError as e:
        nan = float("nan")
        record = MetricsRecord(
            run_id=state.run_id,
            seed=state.seed,
            epoch=state.epoch,
            step=state.global_step,
            l_ssl=nan,
            l_affine=nan if affine.enabled else None,
            total_loss=nan,
            lr=lr,
            wall_clock=time.perf_counter() - state.clock_start,
            status="diverged",
        )
        raise TrainingDivergedError(
            f"Loss undefined at epoch {state.epoch}, step {state.global_step}: {e}", record=record
        ) from e
    total = combined_loss(l_ssl, l_aff1, l_aff2, affine, config.method)

    l_affine = None
    if l_aff1 is not None:
        l_affine = float(l_aff1.detach()) if l_aff2 is None else float(0.5 * (l_aff1 + l_aff2).detach())
    record = MetricsRecord(
        run_id=state.run_id,
        seed=state.seed,
        epoch=state.epoch,
        step=state.global_step,
        l_ssl=float(l_ssl.detach()),
        l_affine=l_affine,
        total_loss=float(total.detach()),
        lr=lr,
        wall_clock=time.perf_counter() - state.clock_start,
    )
    if not torch.isfinite(total):
        record.status = "diverged"
        raise TrainingDivergedError(
            f"Non-finite loss at epoch {state.epoch}, step {state.global_step}", record=record
        )

    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    if config.optimizer.grad_clip_norm is not None:
        torch.nn.utils.clip_grad_norm_(list(networks.trainable_parameters()), config.optimizer.grad_clip_norm)
    state.optimizer.step()

    if state.ema is not None:
        state.ema.tau = ema_tau(config.loss.ema_tau, state.global_step, state.total_steps, config.loss.ema_schedule)
        state.ema = ema_update(networks.online_parameters(), state.ema)

    state.global_step += 1
    return record


@dataclass
class FitResult:
    run_id: str
    checkpoint_path: Optional[Path]
    metrics_path: Path
    epochs_completed: int
    finished: bool
    snapshots: List[Path] = field(default_factory=list)


def _save(path: Path, state: TrainState, config: ExperimentConfig, with_optimizer: bool) -> Path:
    return save_checkpoint(
        path,
        config=config,
        epoch=state.epoch,
        global_step=state.global_step,
        seed=state.seed,
        network_state=state.networks.state_dict(),
        optimizer_state=state.optimizer.state_dict() if with_optimizer else None,
        ema_state=state.ema.state_dict() if state.ema is not None else None,
    )


def restore_train_state(state: TrainState, payload: dict) -> None:
    state.networks.load_state_dict(payload["networks"])
    if payload.get("optimizer") is not None:
        state.optimizer.load_state_dict(payload["optimizer"])
    if state.ema is not None and payload.get("ema"):
        state.ema.tau = payload["ema"]["tau"]
        state.ema.step = payload["ema"]["step"]
    state.epoch = payload["epoch"]
    state.global_step = payload["global_step"]


def fit(
    config: ExperimentConfig,
    seed: Optional[int] = None,
    resume: bool = False,
    stop_after_epoch: Optional[int] = None,
    store: Optional[ResultStore] = None,
) -> FitResult:
    """
    Pretrain one (config, seed) cell.

    Checkpoints every `checkpoint_every` epochs (resumable, with optimizer
    state) and keeps an evaluation snapshot every `eval_every` epochs and at
    the end. With `resume`, training continues from the cell's last
    checkpoint and the metrics stream is cut back to that point first.

    Args:
        config: Experiment configuration
        seed: Pretraining seed; defaults to config.seeds[0]
        resume: Continue from the last checkpoint if one exists
        stop_after_epoch: End the session once this many epochs are done
        store: Result store; defaults to one at the configured output directory

    Returns:
        FitResult with the checkpoint and metrics paths
    """
    seed = config.seeds[0] if seed is None else seed
    cell_config = config.with_seed(seed)
    store = store or ResultStore(config.output_dir or settings.output_dir)
    run_id = store.register(cell_config)
    device = settings.device

    collection = load_dataset(
        config.data.dataset,
        default_root(config.data.root),
        split="train",
        limit=config.data.limit,
        seed=seed,
    )
    steps_per_epoch = epoch_steps(len(collection), config.optimizer.batch_size)

    state = init_train_state(cell_config, seed, steps_per_epoch, device)
    checkpoint_dir = store.checkpoint_dir(run_id)
    resume_step = None
    if resume:
        last = latest_checkpoint(checkpoint_dir)
        if last is not None:
            restore_train_state(state, load_checkpoint(last, cell_config, map_location=device))
            resume_step = state.global_step
            logger.info(f"Resuming {run_id} at epoch {state.epoch}, step {state.global_step}")

    epochs = config.optimizer.epochs
    workers = config.data.num_workers if config.data.num_workers is not None else settings.num_workers
    checkpoint_path = latest_checkpoint(checkpoint_dir)
    store.set_status(run_id, RunStatus.RUNNING)
    logger.info(
        f"Training {run_id}: {config.method.value} {cell_config.variant_label()}, seed {seed}, "
        f"{epochs} epochs x {steps_per_epoch} steps"
    )

    with run_log(store.cell_dir(run_id)), MetricsWriter(store.metrics_path(run_id), resume_step=resume_step) as writer:
        try:
            while state.epoch < epochs:
                if stop_after_epoch is not None and state.epoch >= stop_after_epoch:
                    break
                loader = DataLoader(
                    ViewBatchDataset(collection, config.augmentation, config.optimizer.batch_size, seed, state.epoch),
                    batch_size=None,
                    shuffle=False,
                    num_workers=workers,
                )
                losses = []
                for item in loader:
                    record = train_step(state, item["x1"].to(device), item["x2"].to(device), cell_config)
                    writer.append(record)
                    losses.append(record.total_loss)
                state.epoch += 1
                logger.info(f"[{run_id}] epoch {state.epoch}/{epochs} mean loss {np.mean(losses):.4f}")

                if state.epoch % config.checkpoint_every == 0 or state.epoch == epochs:
                    checkpoint_path = _save(checkpoint_dir / LAST_CHECKPOINT, state, cell_config, with_optimizer=True)
                if state.epoch % config.eval_every == 0 or state.epoch == epochs:
                    _save(checkpoint_dir / epoch_checkpoint_name(state.epoch), state, cell_config, with_optimizer=False)
        except TrainingDivergedError as e:
            writer.append(e.record)
            logger.error(f"[{run_id}] {str(e)}")
            store.set_status(run_id, RunStatus.FAILED, str(e))
            raise
        except Exception as e:
            logger.error(f"[{run_id}] training failed: {str(e)}")
            store.set_status(run_id, RunStatus.FAILED, str(e))
            raise

    finished = state.epoch >= epochs
    store.set_status(run_id, RunStatus.COMPLETED if finished else RunStatus.PENDING)
    snapshots = sorted(checkpoint_dir.glob("epoch_*.pt"))
    return FitResult(
        run_id=run_id,
        checkpoint_path=checkpoint_path,
        metrics_path=store.metrics_path(run_id),
        epochs_completed=state.epoch,
        finished=finished,
        snapshots=snapshots,
    )
