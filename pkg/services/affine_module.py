"""
Affine-transformation prediction branch.

An augmented view x is warped by a freshly sampled affine transform phi,
both images are encoded, the pair of representations is aggregated into a
transition vector and a small regressor estimates phi from it. The MSE of
that estimate is added to the SSL loss with weight beta2.
"""

import logging
from typing import Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from models.exceptions import ContractError, NumericError
from models.networks import SSLNetworks, running_stats_frozen
from models.schemas import (
    Aggregation,
    AffineModuleConfig,
    AffineRanges,
    RepresentationSource,
    SSLMethod,
)
from services.affine_geometry import (
    AffineMatrix,
    bounded_warp_matrix,
    build_matrices,
    normalize_param_array,
    sample_affine_param_array,
    warp_tensor,
)

logger = logging.getLogger(__name__)


def aggregate(h: torch.Tensor, ha: torch.Tensor, mode: Aggregation = Aggregation.DIFFERENCE) -> torch.Tensor:
    """Transition vector: h - ha, or [h || ha]."""
    if h.shape != ha.shape:
        raise ContractError(f"Cannot aggregate {tuple(h.shape)} with {tuple(ha.shape)}")
    mode = Aggregation(mode)
    if mode == Aggregation.DIFFERENCE:
        return h - ha
    return torch.cat([h, ha], dim=1)


def predict_phi(t: torch.Tensor, regressor: nn.Module) -> torch.Tensor:
    expected = getattr(regressor, "in_dim", None)
    if expected is not None and t.shape[-1] != expected:
        raise ContractError(f"Regressor expects {expected} inputs, transition vector has {t.shape[-1]}")
    return regressor(t)


def affine_loss(
    phi_true,
    phi_pred: torch.Tensor,
    normalize: bool = False,
    ranges: Optional[AffineRanges] = None,
    columns=None,
) -> torch.Tensor:
    """
    Mean squared error over batch and components.

    `phi_true` holds raw parameters (one column per entry of `columns`).
    With `normalize` they are first mapped into [-1, 1] using `ranges`, the
    space `phi_pred` is expressed in.
    """
    if isinstance(phi_true, torch.Tensor):
        true = phi_true.detach().to(torch.float64).cpu().numpy()
    else:
        true = np.asarray(phi_true, dtype=np.float64)
    if np.isnan(true).any() or torch.isnan(phi_pred).any():
        raise NumericError("affine_loss received NaN inputs")
    if normalize:
        if ranges is None:
            raise ContractError("normalised affine_loss needs the sampling ranges")
        true = normalize_param_array(true, ranges, columns)
    target = torch.as_tensor(true, dtype=phi_pred.dtype, device=phi_pred.device)
    if target.shape != phi_pred.shape:
        raise ContractError(f"phi_true {tuple(target.shape)} does not match phi_pred {tuple(phi_pred.shape)}")
    return F.mse_loss(phi_pred, target)


def combined_loss(
    l_ssl: torch.Tensor,
    l_affine_view1: Optional[torch.Tensor],
    l_affine_view2: Optional[torch.Tensor],
    cfg: AffineModuleConfig,
    method: SSLMethod = SSLMethod.SIMCLR,
) -> torch.Tensor:
    """beta1 * l_ssl + beta2 * l_affine, l_affine averaged over views when both are given."""
    if l_affine_view1 is None:
        return cfg.beta1 * l_ssl
    l_affine = l_affine_view1 if l_affine_view2 is None else 0.5 * (l_affine_view1 + l_affine_view2)
    return cfg.beta1 * l_ssl + cfg.resolved_beta2(method) * l_affine


def affine_matrices(params: np.ndarray, width: int, height: int, bounded: bool) -> np.ndarray:
    """Per-element warp matrices; bounded mode folds in the inscribed-rectangle crop and resize."""
    matrices = build_matrices(params, width, height)
    if not bounded:
        return matrices
    return np.stack([bounded_warp_matrix(AffineMatrix(m, width, height))[0].m for m in matrices])


def make_affine_view(
    x: torch.Tensor,
    rng: np.random.Generator,
    cfg: AffineModuleConfig,
) -> Tuple[torch.Tensor, np.ndarray]:
    """Warp each image of `x` by its own sampled phi; returns the view and the (B, 6) parameters."""
    batch, _, height, width = x.shape
    params = sample_affine_param_array(rng, cfg.components, cfg.ranges, batch)
    matrices = affine_matrices(params, width, height, cfg.bounded)
    return warp_tensor(x, matrices), params


def regression_targets(params: np.ndarray, cfg: AffineModuleConfig) -> np.ndarray:
    """Raw parameters restricted to the active components."""
    return params[:, cfg.components.active_columns()]


def transition_loss(
    reference: torch.Tensor,
    affine_repr: torch.Tensor,
    params: np.ndarray,
    cfg: AffineModuleConfig,
    regressor: nn.Module,
) -> torch.Tensor:
    t = aggregate(reference, affine_repr, cfg.aggregation)
    phi_pred = predict_phi(t, regressor)
    return affine_loss(
        regression_targets(params, cfg),
        phi_pred,
        normalize=cfg.normalize_targets,
        ranges=cfg.ranges,
        columns=cfg.components.active_columns(),
    )


def affine_branch(
    x1: torch.Tensor,
    rng: np.random.Generator,
    cfg: AffineModuleConfig,
    networks: SSLNetworks,
    reference: Optional[torch.Tensor] = None,
) -> Tuple[torch.Tensor, np.ndarray]:
    """
    l_affine for one augmented view.

    Args:
        x1: Augmented view, (B, C, H, W)
        rng: Source of the sampled transforms
        cfg: Affine module configuration
        networks: Online encoder, projector and regressor
        reference: Precomputed representation of x1 (h, or z for source g)

    Returns:
        The MSE and the sampled raw parameters, shape (B, 6)
    """
    if networks.regressor is None:
        raise ContractError("affine_branch needs a regressor network")
    x1a, params = make_affine_view(x1, rng, cfg)

    if reference is None:
        reference = networks.encoder(x1)
        if cfg.source == RepresentationSource.PROJECTOR:
            reference = networks.projector(reference)
    with running_stats_frozen(networks.encoder, networks.projector):
        affine_repr = networks.encoder(x1a)
        if cfg.source == RepresentationSource.PROJECTOR:
            affine_repr = networks.projector(affine_repr)

    return transition_loss(reference, affine_repr, params, cfg, networks.regressor), params
