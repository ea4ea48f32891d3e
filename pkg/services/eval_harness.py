"""
Linear-probe evaluation of frozen encoders.

Features are extracted once per split from a copy of the encoder, then a
multinomial logistic regression is fitted with L-BFGS on standardised
features for each random trial. A trial varies the probe's training
subsample and its initialisation; the encoder never changes.
"""

import copy
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
from scipy import stats
from scipy.optimize import minimize
from scipy.special import logsumexp
from torch import nn

from config import settings
from database.checkpoint_store import checkpoint_config, load_checkpoint
from database.result_store import ResultStore
from models.exceptions import ContractError, IngestionError
from models.networks import build_networks
from models.schemas import EvalDatasetSpec, EvaluationWarning, ProbeConfig, ProbeResult
from services.view_pipeline import ImageCollection, default_root, load_dataset

logger = logging.getLogger(__name__)

PROBE_GTOL = 1e-5
CONFIDENCE = 0.95
PROBE_DATA_SEED = 0


@torch.no_grad()
def extract_features(
    encoder: nn.Module,
    collection: ImageCollection,
    resolution: Optional[int] = None,
    batch_size: int = 256,
    device: str = "cpu",
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Post-pool encoder features of every image, in collection order.

    Runs on a deep copy in eval mode, so neither parameters nor normalisation
    statistics of `encoder` change.
    """
    if len(collection) == 0:
        raise ContractError(f"Cannot extract features from an empty split ({collection.name}/{collection.split})")
    snapshot = copy.deepcopy(encoder).to(device).eval()
    chunks = []
    for start in range(0, len(collection), batch_size):
        indices = np.arange(start, min(start + batch_size, len(collection)))
        batch = collection.batch(indices, resolution)
        chunks.append(snapshot(batch.data.to(device)).double().cpu().numpy())
    features = np.concatenate(chunks)
    if not np.isfinite(features).all():
        raise ContractError(f"Encoder produced non-finite features on {collection.name}/{collection.split}")
    return features, collection.labels.copy()


@dataclass
class ProbeModel:
    """Standardiser plus softmax classifier."""

    weights: np.ndarray
    bias: np.ndarray
    mean: np.ndarray
    scale: np.ndarray
    classes: np.ndarray
    converged: bool
    iterations: int

    def decision_function(self, features: np.ndarray) -> np.ndarray:
        return ((features - self.mean) / self.scale) @ self.weights + self.bias

    def predict(self, features: np.ndarray) -> np.ndarray:
        return self.classes[np.argmax(self.decision_function(features), axis=1)]

    def accuracy(self, features: np.ndarray, labels: np.ndarray) -> float:
        if len(labels) == 0:
            raise ContractError("accuracy of an empty evaluation split is undefined")
        return float(np.mean(self.predict(features) == labels))


def _objective(theta: np.ndarray, x: np.ndarray, y: np.ndarray, n_classes: int, reg: float):
    """Mean cross-entropy + reg / (2n) * ||W||^2 and its gradient; the bias is not penalised."""
    n, d = x.shape
    w = theta[: d * n_classes].reshape(d, n_classes)
    b = theta[d * n_classes :]
    logits = x @ w + b
    log_norm = logsumexp(logits, axis=1)
    loss = np.mean(log_norm - logits[np.arange(n), y]) + reg / (2.0 * n) * np.sum(w * w)

    probs = np.exp(logits - log_norm[:, None])
    probs[np.arange(n), y] -= 1.0
    probs /= n
    grad_w = x.T @ probs + (reg / n) * w
    grad_b = probs.sum(axis=0)
    return loss, np.concatenate([grad_w.ravel(), grad_b])


def fit_linear_probe(
    features: np.ndarray,
    labels: np.ndarray,
    reg_strength: float = 1.0,
    max_iter: int = 1000,
    seed: int = 0,
) -> ProbeModel:
    """
    Multinomial logistic regression by L-BFGS.

    Args:
        features: (n, d) training features
        labels: (n,) integer labels, at least two distinct values
        reg_strength: L2 strength on the weights
        max_iter: Iteration cap
        seed: Seed of the weight initialisation

    Returns:
        ProbeModel; `converged` is False when the cap stopped the solver
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if features.ndim != 2 or features.shape[0] != labels.shape[0]:
        raise ContractError(f"features {features.shape} do not match labels {labels.shape}")
    classes, y = np.unique(labels, return_inverse=True)
    if len(classes) < 2:
        raise ContractError("A linear probe needs at least two classes")

    mean = features.mean(axis=0)
    scale = features.std(axis=0)
    scale = np.where(scale > 1e-12, scale, 1.0)
    x = (features - mean) / scale

    d, k = x.shape[1], len(classes)
    rng = np.random.default_rng(seed)
    theta0 = np.concatenate([rng.normal(0.0, 0.01, size=d * k), np.zeros(k)])
    result = minimize(
        _objective,
        theta0,
        args=(x, y, k, reg_strength),
        method="L-BFGS-B",
        jac=True,
        options={"maxiter": max_iter, "gtol": PROBE_GTOL},
    )
    converged = bool(result.success) and int(result.nit) < max_iter
    if not converged:
        logger.warning(f"Linear probe stopped after {result.nit} iterations: {result.message}")

    return ProbeModel(
        weights=result.x[: d * k].reshape(d, k),
        bias=result.x[d * k :],
        mean=mean,
        scale=scale,
        classes=classes,
        converged=converged,
        iterations=int(result.nit),
    )


def confidence_interval(accuracies: Sequence[float], confidence: float = CONFIDENCE) -> Tuple[float, float, bool]:
    """
    Mean and Student-t half width over trials.

    Returns:
        (mean, half_width, degenerate); a single trial gives half width 0
        and degenerate True
    """
    values = np.asarray(accuracies, dtype=np.float64)
    if values.size == 0:
        raise ContractError("confidence_interval needs at least one value")
    mean = float(np.mean(values))
    n = values.size
    if n < 2:
        return mean, 0.0, True
    sem = float(np.std(values, ddof=1)) / np.sqrt(n)
    half = float(stats.t.ppf(0.5 + confidence / 2.0, n - 1)) * sem
    return mean, half, False


def welch_significance(a: Sequence[float], b: Sequence[float], alpha: float = 0.05) -> Optional[bool]:
    """Welch's t-test; None when either side has fewer than two values or no spread at all."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        return None
    if np.var(a) == 0.0 and np.var(b) == 0.0:
        return bool(a.mean() != b.mean())
    p_value = stats.ttest_ind(a, b, equal_var=False).pvalue
    return bool(p_value < alpha)


def run_trials(
    train: Tuple[np.ndarray, np.ndarray],
    held_out: Tuple[np.ndarray, np.ndarray],
    probe: ProbeConfig,
    trials: Optional[int] = None,
) -> Tuple[List[int], List[float], bool]:
    """Fit one probe per trial seed on a subsample of `train`; returns seeds, accuracies and convergence."""
    train_x, train_y = train
    eval_x, eval_y = held_out
    n_trials = trials or probe.trials
    seeds = list(range(n_trials))
    accuracies: List[float] = []
    converged = True
    for trial_seed in seeds:
        rng = np.random.default_rng(trial_seed)
        size = max(2, int(round(probe.subsample_fraction * len(train_y))))
        chosen = np.sort(rng.choice(len(train_y), size=min(size, len(train_y)), replace=False))
        model = fit_linear_probe(train_x[chosen], train_y[chosen], probe.reg_strength, probe.max_iter, seed=trial_seed)
        accuracies.append(model.accuracy(eval_x, eval_y))
        converged = converged and model.converged
    return seeds, accuracies, converged


def evaluate(
    checkpoint: Path,
    datasets: Sequence[EvalDatasetSpec],
    trials: Optional[int] = None,
    probe: Optional[ProbeConfig] = None,
    data_root: Optional[str] = None,
    store: Optional[ResultStore] = None,
) -> List[ProbeResult]:
    """
    Probe one checkpoint on every dataset.

    A dataset whose files are missing is skipped with an EvaluationWarning
    (appended to the store when one is given).

    Args:
        checkpoint: Checkpoint or evaluation snapshot path
        datasets: Downstream datasets and their limits
        trials: Trial count; defaults to the probe config
        probe: Probe settings; defaults to the checkpoint's config
        data_root: Dataset root; defaults to settings.data_root
        store: Result store receiving ProbeResults and warnings

    Returns:
        One ProbeResult per evaluated dataset
    """
    payload = load_checkpoint(checkpoint)
    config = checkpoint_config(payload)
    probe = probe or config.probe
    run_id = payload["config_hash"]
    root = default_root(data_root or config.data.root)
    device = settings.device

    networks = build_networks(config)
    networks.load_state_dict(payload["networks"])
    encoder = networks.encoder

    results: List[ProbeResult] = []
    for spec in datasets:
        try:
            train_split = load_dataset(spec.name, root, "train", spec.train_limit, seed=PROBE_DATA_SEED)
            eval_split = load_dataset(spec.name, root, "eval", spec.eval_limit, seed=PROBE_DATA_SEED)
        except IngestionError as e:
            warning = EvaluationWarning(run_id=run_id, dataset=spec.name, message=str(e))
            logger.warning(f"Skipping {spec.name} for {run_id}: {str(e)}")
            if store is not None:
                store.append_warning(run_id, warning)
            continue

        resolution = config.augmentation.resolution
        train = extract_features(encoder, train_split, resolution, probe.batch_size, device)
        held_out = extract_features(encoder, eval_split, resolution, probe.batch_size, device)
        seeds, accuracies, converged = run_trials(train, held_out, probe, trials)
        mean, half, degenerate = confidence_interval(accuracies)

        result = ProbeResult(
            run_id=run_id,
            method=config.method.value,
            variant=config.variant_label(),
            dataset=spec.name,
            seed=payload["seed"],
            epoch=payload["epoch"],
            checkpoint=str(checkpoint),
            trial_seeds=seeds,
            accuracies=accuracies,
            mean=mean,
            ci_half_width=half,
            degenerate_ci=degenerate,
            n_trials=len(accuracies),
            converged=converged,
        )
        logger.info(
            f"[{run_id}] epoch {result.epoch} {spec.name}: {100 * mean:.2f} ± {100 * half:.2f} "
            f"over {len(accuracies)} trials"
        )
        if store is not None:
            store.append_probe(run_id, result)
        results.append(result)
    return results
