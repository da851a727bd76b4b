"""Image encoders: a compact desk-scale network and pretrained plugins."""

from __future__ import annotations

from typing import TYPE_CHECKING

from noboxlab.encoders.base import BaseImageEncoder
from noboxlab.encoders.compact import CompactConvEncoder
from noboxlab.encoders.plugin import CLIP_MEAN, CLIP_STD, PluginEncoder

if TYPE_CHECKING:
    from noboxlab.zoo import EncoderSpec

__all__ = [
    "CLIP_MEAN",
    "CLIP_STD",
    "BaseImageEncoder",
    "CompactConvEncoder",
    "PluginEncoder",
    "create_encoder",
]


def create_encoder(spec: EncoderSpec) -> BaseImageEncoder:
    """Factory function to create the encoder named by a spec."""
    if spec.kind == "compact-conv":
        return CompactConvEncoder(spec.emb_dim, spec.input_size, width=spec.width)
    elif spec.kind == "plugin":
        assert spec.plugin_ref is not None
        return PluginEncoder(spec.plugin_ref, spec.emb_dim, spec.input_size)
    else:
        raise ValueError(f"Unsupported encoder kind: {spec.kind}")
