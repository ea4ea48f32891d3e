"""Encoder f, projector g, predictor q and affine regressor r."""

import copy
import contextlib
import logging
from typing import Iterator, List, Optional

import torch
from torch import nn
from torchvision.models import resnet50

from models.exceptions import ConfigurationError
from models.schemas import (
    Aggregation,
    EncoderArch,
    EncoderSpec,
    ExperimentConfig,
    HeadSpec,
    RepresentationSource,
    SSLMethod,
)

logger = logging.getLogger(__name__)


class SmallConvEncoder(nn.Module):
    """Four conv-BN-ReLU blocks with widths d/8, d/4, d/2, d and global average pooling."""

    def __init__(self, representation_dim: int = 256, in_channels: int = 3):
        super().__init__()
        widths = [representation_dim // 8, representation_dim // 4, representation_dim // 2, representation_dim]
        layers: List[nn.Module] = []
        channels = in_channels
        for i, width in enumerate(widths):
            layers += [
                nn.Conv2d(channels, width, kernel_size=3, padding=1, bias=False),
                nn.BatchNorm2d(width),
                nn.ReLU(inplace=True),
            ]
            if i < len(widths) - 1:
                layers.append(nn.MaxPool2d(2))
            channels = width
        self.features = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.out_dim = representation_dim

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.flatten(self.pool(self.features(x)), 1)


class ResNet50Encoder(nn.Module):
    """torchvision ResNet50 without its classifier; 2048-dimensional output."""

    def __init__(self, small_input_stem: bool = True):
        super().__init__()
        backbone = resnet50(weights=None)
        if small_input_stem:
            # 32/64 px inputs: 3x3 stride-1 stem, no max-pool
            backbone.conv1 = nn.Conv2d(3, 64, kernel_size=3, stride=1, padding=1, bias=False)
            backbone.maxpool = nn.Identity()
        backbone.fc = nn.Identity()
        self.backbone = backbone
        self.out_dim = 2048

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.backbone(x)


class MLPHead(nn.Module):
    """Linear -> BatchNorm -> ReLU -> Linear."""

    def __init__(self, in_dim: int, hidden_dim: int, out_dim: int):
        super().__init__()
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.net = nn.Sequential(
            nn.Linear(in_dim, hidden_dim),
            nn.BatchNorm1d(hidden_dim),
            nn.ReLU(inplace=True),
            nn.Linear(hidden_dim, out_dim),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


def build_encoder(spec: EncoderSpec) -> nn.Module:
    if spec.arch == EncoderArch.SMALL_CONV:
        return SmallConvEncoder(spec.representation_dim)
    if spec.arch == EncoderArch.RESNET50:
        return ResNet50Encoder(spec.small_input_stem)
    raise ConfigurationError(f"Unknown encoder architecture: {spec.arch}")


def build_head(spec: HeadSpec, in_dim: int) -> MLPHead:
    return MLPHead(in_dim, spec.hidden_dim, spec.output_dim)


class SSLNetworks(nn.Module):
    """
    Every trainable and EMA-tracked network of one run.

    The target encoder and projector exist only for BYOL; they receive no
    gradients and are moved by ema updates alone.
    """

    def __init__(
        self,
        encoder: nn.Module,
        projector: MLPHead,
        predictor: Optional[MLPHead] = None,
        regressor: Optional[MLPHead] = None,
        with_target: bool = False,
    ):
        super().__init__()
        self.encoder = encoder
        self.projector = projector
        self.predictor = predictor
        self.regressor = regressor
        self.target_encoder: Optional[nn.Module] = None
        self.target_projector: Optional[nn.Module] = None
        if with_target:
            self.target_encoder = copy.deepcopy(encoder)
            self.target_projector = copy.deepcopy(projector)
            for param in self.target_parameters():
                param.requires_grad = False

    @property
    def has_target(self) -> bool:
        return self.target_encoder is not None

    def online_parameters(self) -> List[nn.Parameter]:
        """Online counterparts of target_parameters(), in the same order."""
        return list(self.encoder.parameters()) + list(self.projector.parameters())

    def target_parameters(self) -> List[nn.Parameter]:
        if not self.has_target:
            return []
        return list(self.target_encoder.parameters()) + list(self.target_projector.parameters())

    def trainable_parameters(self) -> Iterator[nn.Parameter]:
        return (p for p in self.parameters() if p.requires_grad)


def regressor_input_dim(config: ExperimentConfig, representation_dim: int) -> int:
    affine = config.affine
    base = representation_dim if affine.source == RepresentationSource.ENCODER else config.projector.output_dim
    return 2 * base if affine.aggregation == Aggregation.CONCATENATION else base


def build_networks(config: ExperimentConfig) -> SSLNetworks:
    """Instantiate the networks `config` needs, with the current torch seed."""
    encoder = build_encoder(config.encoder)
    d = encoder.out_dim
    projector = build_head(config.projector, d)

    predictor = None
    if config.method == SSLMethod.BYOL:
        predictor = build_head(config.predictor, config.projector.output_dim)

    regressor = None
    if config.affine.enabled:
        regressor = MLPHead(
            regressor_input_dim(config, d),
            config.affine.regressor_hidden_dim,
            config.affine.regressor_output_dim,
        )

    networks = SSLNetworks(
        encoder=encoder,
        projector=projector,
        predictor=predictor,
        regressor=regressor,
        with_target=config.method == SSLMethod.BYOL,
    )
    logger.debug(
        f"Built networks for {config.method.value}: "
        f"{sum(p.numel() for p in networks.trainable_parameters())} trainable parameters"
    )
    return networks


def count_parameters(module: Optional[nn.Module]) -> int:
    return 0 if module is None else sum(p.numel() for p in module.parameters())


@contextlib.contextmanager
def running_stats_frozen(*modules: Optional[nn.Module]):
    """
    Batch-norm layers of `modules` normalise with batch statistics but leave
    their running buffers (and num_batches_tracked) untouched inside the block.
    """
    norms = [
        m
        for module in modules
        if module is not None
        for m in module.modules()
        if isinstance(m, nn.modules.batchnorm._BatchNorm) and m.track_running_stats
    ]
    for m in norms:
        m.track_running_stats = False
    try:
        yield
    finally:
        for m in norms:
            m.track_running_stats = True
