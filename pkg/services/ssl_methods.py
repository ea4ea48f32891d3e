"""
Baseline self-supervised objectives and the forward pass that feeds them.

    simclr        NT-Xent over the 2N - 2 in-batch negatives
    byol          2 - 2 cos(q(z_online), z_target), symmetrised over views
    barlow_twins  cross-correlation of standardised projections pushed to I
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import torch
import torch.nn.functional as F

from models.batches import RepresentationBundle
from models.exceptions import ConfigurationError, ContractError, NumericError
from models.networks import SSLNetworks, running_stats_frozen
from models.schemas import EmaSchedule, LossConfig, RepresentationSource, SSLMethod

logger = logging.getLogger(__name__)

MIN_ROW_NORM = 1e-12
MIN_FEATURE_STD = 1e-12


def parse_method(method) -> SSLMethod:
    try:
        return SSLMethod(method)
    except ValueError as e:
        raise ConfigurationError(f"Unknown SSL method '{method}'; expected one of {[m.value for m in SSLMethod]}") from e


def ntxent_loss(z1: torch.Tensor, z2: torch.Tensor, temperature: float = 0.5) -> torch.Tensor:
    """
    Normalised-temperature cross-entropy.

    Every one of the 2N embeddings is an anchor; its positive is the other
    view of the same image and the remaining 2N - 2 embeddings are negatives.
    """
    if z1.shape != z2.shape or z1.dim() != 2:
        raise ContractError(f"ntxent_loss expects two (N, k) tensors, got {tuple(z1.shape)} and {tuple(z2.shape)}")
    n = z1.shape[0]
    if n < 2:
        raise ContractError("ntxent_loss needs a batch of at least 2 (no negatives otherwise)")
    if temperature <= 0.0:
        raise ContractError(f"temperature must be positive, got {temperature}")

    z = F.normalize(torch.cat([z1, z2], dim=0), dim=1)
    logits = z @ z.T / temperature
    self_mask = torch.eye(2 * n, dtype=torch.bool, device=z.device)
    logits = logits.masked_fill(self_mask, float("-inf"))
    targets = torch.cat([torch.arange(n, 2 * n), torch.arange(0, n)]).to(z.device)
    return F.cross_entropy(logits, targets)


def _check_row_norms(x: torch.Tensor, name: str) -> None:
    norms = x.detach().norm(dim=1)
    if torch.any(norms <= MIN_ROW_NORM):
        raise NumericError(f"{name} has a zero-norm row; cosine similarity is undefined")


def byol_loss(p_online: torch.Tensor, z_target: torch.Tensor) -> torch.Tensor:
    """Mean of 2 - 2 cos(p, z) over rows; no gradient reaches z_target."""
    if p_online.shape != z_target.shape:
        raise ContractError(f"byol_loss shape mismatch: {tuple(p_online.shape)} vs {tuple(z_target.shape)}")
    _check_row_norms(p_online, "p_online")
    _check_row_norms(z_target, "z_target")
    p = F.normalize(p_online, dim=1)
    z = F.normalize(z_target.detach(), dim=1)
    return (2.0 - 2.0 * (p * z).sum(dim=1)).mean()


def symmetric_byol_loss(
    p1: torch.Tensor,
    p2: torch.Tensor,
    target_z1: torch.Tensor,
    target_z2: torch.Tensor,
) -> torch.Tensor:
    """Average of both view assignments, so the value stays in [0, 4]."""
    return 0.5 * (byol_loss(p1, target_z2) + byol_loss(p2, target_z1))


def barlow_twins_loss(z1: torch.Tensor, z2: torch.Tensor, lambda_offdiag: float = 5e-3) -> torch.Tensor:
    if z1.shape != z2.shape or z1.dim() != 2:
        raise ContractError(f"barlow_twins_loss expects two (N, k) tensors, got {tuple(z1.shape)} and {tuple(z2.shape)}")
    n = z1.shape[0]
    if n < 2:
        raise ContractError("barlow_twins_loss needs a batch of at least 2")

    std1 = z1.std(dim=0, correction=0)
    std2 = z2.std(dim=0, correction=0)
    if torch.any(std1.detach() <= MIN_FEATURE_STD) or torch.any(std2.detach() <= MIN_FEATURE_STD):
        raise NumericError("barlow_twins_loss: a feature dimension is constant across the batch")

    z1n = (z1 - z1.mean(dim=0)) / std1
    z2n = (z2 - z2.mean(dim=0)) / std2
    c = z1n.T @ z2n / n

    on_diag = (torch.diagonal(c) - 1.0).pow(2).sum()
    off_diag = c.pow(2).sum() - torch.diagonal(c).pow(2).sum()
    return on_diag + lambda_offdiag * off_diag


# ---------------------------------------------------------------------------
# EMA target
# ---------------------------------------------------------------------------


@dataclass
class EmaState:
    """Target parameters moved towards the online parameters by exponential averaging."""

    params: List[torch.Tensor] = field(default_factory=list)
    tau: float = 0.99
    step: int = 0

    def state_dict(self) -> dict:
        return {"tau": self.tau, "step": self.step}


def ema_tau(base_tau: float, step: int, total_steps: int, schedule: EmaSchedule = EmaSchedule.CONSTANT) -> float:
    """Constant tau, or a cosine ramp from base_tau at step 0 to 1 at total_steps."""
    if schedule == EmaSchedule.CONSTANT or total_steps <= 0:
        return base_tau
    progress = min(max(step / total_steps, 0.0), 1.0)
    return 1.0 - (1.0 - base_tau) * (math.cos(math.pi * progress) + 1.0) / 2.0


@torch.no_grad()
def ema_update(online: Sequence[torch.Tensor], state: EmaState) -> EmaState:
    """target <- tau * target + (1 - tau) * online, in place; returns the advanced state."""
    if len(online) != len(state.params):
        raise ContractError(f"{len(online)} online tensors for {len(state.params)} target tensors")
    for target, source in zip(state.params, online):
        if target.shape != source.shape:
            raise ContractError(f"EMA shape mismatch: {tuple(target.shape)} vs {tuple(source.shape)}")
    tau = state.tau
    for target, source in zip(state.params, online):
        if tau == 0.0:
            target.copy_(source)
        elif tau != 1.0:
            target.mul_(tau).add_(source.detach(), alpha=1.0 - tau)
    return EmaState(params=state.params, tau=tau, step=state.step + 1)


def ema_state_for(networks: SSLNetworks, tau: float, step: int = 0) -> Optional[EmaState]:
    if not networks.has_target:
        return None
    return EmaState(params=[p.data for p in networks.target_parameters()], tau=tau, step=step)


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------


def forward_bundle(
    method,
    networks: SSLNetworks,
    x1: torch.Tensor,
    x2: torch.Tensor,
    x1a: Optional[torch.Tensor] = None,
    x2a: Optional[torch.Tensor] = None,
    source: RepresentationSource = RepresentationSource.ENCODER,
) -> RepresentationBundle:
    """
    Encode both views (and any affine views) with the shared online encoder.

    Affine views never pass through the target network and never move the
    batch-norm running statistics, which track the SSL views only. With
    source g their projector outputs are filled in as well.
    """
    method = parse_method(method)
    n = x1.shape[0]

    h = networks.encoder(torch.cat([x1, x2], dim=0))
    z = networks.projector(h)
    bundle = RepresentationBundle(h1=h[:n], h2=h[n:], z1=z[:n], z2=z[n:])

    if method == SSLMethod.BYOL:
        if networks.predictor is None or not networks.has_target:
            raise ConfigurationError("byol needs a predictor and a target network")
        p = networks.predictor(z)
        bundle.p1, bundle.p2 = p[:n], p[n:]
        with torch.no_grad():
            tz = networks.target_projector(networks.target_encoder(torch.cat([x1, x2], dim=0)))
        bundle.target_z1, bundle.target_z2 = tz[:n].detach(), tz[n:].detach()

    with running_stats_frozen(networks.encoder, networks.projector):
        if x1a is not None:
            bundle.h1a = networks.encoder(x1a)
            if source == RepresentationSource.PROJECTOR:
                bundle.z1a = networks.projector(bundle.h1a)
        if x2a is not None:
            bundle.h2a = networks.encoder(x2a)
            if source == RepresentationSource.PROJECTOR:
                bundle.z2a = networks.projector(bundle.h2a)
    return bundle


def ssl_loss(method, bundle: RepresentationBundle, cfg: LossConfig) -> torch.Tensor:
    """l_ssl of `method` on a populated bundle."""
    method = parse_method(method)
    if method == SSLMethod.SIMCLR:
        return ntxent_loss(bundle.z1, bundle.z2, cfg.temperature)
    if method == SSLMethod.BYOL:
        return symmetric_byol_loss(bundle.p1, bundle.p2, bundle.target_z1, bundle.target_z2)
    return barlow_twins_loss(bundle.z1, bundle.z2, cfg.barlow_lambda)
