"""Compact convolutional encoder for desk-scale runs."""

from __future__ import annotations

import torch
from torch import nn

from noboxlab.encoders.base import BaseImageEncoder


def _stage(in_c: int, out_c: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_c, out_c, kernel_size=3, padding=1, bias=False),
        nn.BatchNorm2d(out_c),
        nn.ReLU(inplace=True),
        nn.Conv2d(out_c, out_c, kernel_size=3, padding=1, bias=False),
        nn.BatchNorm2d(out_c),
        nn.ReLU(inplace=True),
    )


class CompactConvEncoder(BaseImageEncoder):
    """Four conv stages with 2x pooling between them, global average pooling, linear to d."""

    def __init__(
        self,
        emb_dim: int,
        input_size: tuple[int, int, int],
        width: int = 32,
    ) -> None:
        super().__init__(emb_dim, input_size, mean=(0.5,), std=(0.5,))
        channels = input_size[2]
        widths = [width, width * 2, width * 4, width * 4]
        stages: list[nn.Module] = []
        in_c = channels
        for k, out_c in enumerate(widths):
            stages.append(_stage(in_c, out_c))
            if k < len(widths) - 1:
                stages.append(nn.MaxPool2d(2, ceil_mode=True))
            in_c = out_c
        self.body = nn.Sequential(*stages)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.proj = nn.Linear(in_c, emb_dim)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.proj(self.pool(self.body(x)).flatten(1))
