"""Base image encoder."""

from __future__ import annotations

from abc import ABC, abstractmethod
from collections.abc import Sequence

import torch
from torch import nn

from noboxlab.exceptions import ShapeError


class BaseImageEncoder(nn.Module, ABC):
    """Abstract base class for image encoders.

    Encoders take [0, 1] pixels; per-model normalisation happens inside forward so every
    attack budget stays in raw pixel space.
    """

    def __init__(
        self,
        emb_dim: int,
        input_size: tuple[int, int, int],
        mean: Sequence[float],
        std: Sequence[float],
    ) -> None:
        super().__init__()
        self.emb_dim = emb_dim
        self.input_size = input_size
        channels = input_size[2]
        self.register_buffer("mean", _channel_stats(mean, channels))
        self.register_buffer("std", _channel_stats(std, channels))

    @abstractmethod
    def features(self, x: torch.Tensor) -> torch.Tensor:
        """Map normalized images (B, C, H, W) to raw embeddings (B, d)."""
        pass

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w, c = self.input_size
        if tuple(x.shape[1:]) != (c, h, w):
            raise ShapeError(f"encoder expects (B, {c}, {h}, {w}), got {tuple(x.shape)}")
        return self.features((x - self.mean) / self.std)


def _channel_stats(values: Sequence[float], channels: int) -> torch.Tensor:
    values = list(values)
    if len(values) == 1:
        values = values * channels
    if len(values) != channels:
        raise ShapeError(f"expected {channels} normalisation values, got {len(values)}")
    return torch.tensor(values, dtype=torch.float32).view(1, channels, 1, 1)
