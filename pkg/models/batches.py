"""Runtime containers that carry tensors between the pipeline stages."""

from dataclasses import dataclass, field, replace
from typing import List, Optional

import torch

from models.exceptions import ContractError


@dataclass
class ImageBatch:
    """A batch of images, shape (batch, channels, height, width), values in [0, 1]."""

    data: torch.Tensor
    ids: List[str] = field(default_factory=list)

    def __post_init__(self):
        if self.data.dim() != 4:
            raise ContractError(f"ImageBatch expects a 4-D tensor, got shape {tuple(self.data.shape)}")
        if self.ids and len(self.ids) != self.data.shape[0]:
            raise ContractError(f"{len(self.ids)} ids for a batch of {self.data.shape[0]} images")

    @property
    def batch_size(self) -> int:
        return int(self.data.shape[0])

    @property
    def channels(self) -> int:
        return int(self.data.shape[1])

    @property
    def height(self) -> int:
        return int(self.data.shape[2])

    @property
    def width(self) -> int:
        return int(self.data.shape[3])

    def with_data(self, data: torch.Tensor) -> "ImageBatch":
        return replace(self, data=data)

    def check_values(self) -> None:
        if not torch.isfinite(self.data).all():
            raise ContractError("ImageBatch contains non-finite values")
        if self.data.numel() and (self.data.min() < 0.0 or self.data.max() > 1.0):
            raise ContractError("ImageBatch values must lie in [0, 1]")


@dataclass
class RepresentationBundle:
    """Per-view latents produced by one forward pass."""

    h1: torch.Tensor
    h2: torch.Tensor
    z1: torch.Tensor
    z2: torch.Tensor
    p1: Optional[torch.Tensor] = None
    p2: Optional[torch.Tensor] = None
    target_z1: Optional[torch.Tensor] = None
    target_z2: Optional[torch.Tensor] = None
    h1a: Optional[torch.Tensor] = None
    h2a: Optional[torch.Tensor] = None
    z1a: Optional[torch.Tensor] = None
    z2a: Optional[torch.Tensor] = None

    def check(self) -> None:
        batch = self.h1.shape[0]
        for name, value in vars(self).items():
            if value is None:
                continue
            if value.shape[0] != batch:
                raise ContractError(f"{name} has batch {value.shape[0]}, expected {batch}")
            if not torch.isfinite(value).all():
                raise ContractError(f"{name} contains non-finite values")
