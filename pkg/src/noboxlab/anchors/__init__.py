"""Class anchors: head weights, explicit vectors, or embedded class descriptions."""

from __future__ import annotations

import logging
from collections.abc import Sequence
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np
import torch
import torch.nn.functional as F

from noboxlab.anchors.base import DEFAULT_TEMPLATE, BaseEmbeddingService
from noboxlab.anchors.bedrock import BedrockEmbeddingService
from noboxlab.anchors.openai import OpenAIEmbeddingService
from noboxlab.exceptions import ShapeError
from noboxlab.models import ClassAnchorSet

if TYPE_CHECKING:
    from noboxlab.config import AnchorSettings
    from noboxlab.zoo import SupervisoryHead, SurrogateModel

logger = logging.getLogger(__name__)

__all__ = [
    "BaseEmbeddingService",
    "BedrockEmbeddingService",
    "OpenAIEmbeddingService",
    "build_anchor_set",
    "create_embedding_service",
    "explicit_anchor_set",
    "head_anchor_set",
    "text_anchor_set",
]


def create_embedding_service(config: AnchorSettings) -> BaseEmbeddingService:
    """Factory function to create the configured text-embedding service."""
    if config.service == "bedrock":
        return BedrockEmbeddingService(config)
    elif config.service == "openai":
        return OpenAIEmbeddingService(config)
    else:
        raise ValueError(f"Unsupported embedding service: {config.service}")


def head_anchor_set(head: SupervisoryHead) -> ClassAnchorSet:
    """Use the (unit-norm) supervisory-head rows W_j as class anchors."""
    return ClassAnchorSet(F.normalize(head.weight.detach().clone(), dim=1), "head-weights")


def explicit_anchor_set(path: str | Path) -> ClassAnchorSet:
    """Load an (n_classes, d) array from a .npy file and normalize its rows."""
    array = np.load(Path(path))
    if array.ndim != 2:
        raise ShapeError(f"anchor file {path} must hold a 2-d array, got {array.shape}")
    return ClassAnchorSet(F.normalize(torch.from_numpy(array).float(), dim=1), "explicit")


def text_anchor_set(
    service: BaseEmbeddingService,
    class_names: Sequence[str],
    emb_dim: int,
    seed: int = 0,
    template: str = DEFAULT_TEMPLATE,
) -> ClassAnchorSet:
    """Embed prompted class names; widths other than d go through a seeded Gaussian projection."""
    vectors = service.embed_classes(class_names, template)
    if vectors.shape[1] != emb_dim:
        logger.info("projecting %d-d text embeddings to d=%d", vectors.shape[1], emb_dim)
        rng = np.random.default_rng(seed)
        projection = rng.standard_normal((vectors.shape[1], emb_dim)) / np.sqrt(emb_dim)
        vectors = vectors @ projection
    return ClassAnchorSet(F.normalize(torch.from_numpy(vectors).float(), dim=1), "text-embedding")


def build_anchor_set(config: AnchorSettings, surrogate: SurrogateModel) -> ClassAnchorSet:
    """Build the anchors named by the configuration for a given surrogate."""
    if config.provider == "head-weights":
        return head_anchor_set(surrogate.head)
    if config.provider == "explicit":
        assert config.path is not None
        anchors = explicit_anchor_set(config.path)
    else:
        service = create_embedding_service(config)
        anchors = text_anchor_set(
            service, config.class_names, surrogate.spec.emb_dim, config.seed, config.template
        )
    if tuple(anchors.anchors.shape) != (surrogate.n_classes, surrogate.spec.emb_dim):
        raise ShapeError(
            f"anchors {tuple(anchors.anchors.shape)} do not match surrogate "
            f"({surrogate.n_classes}, {surrogate.spec.emb_dim})"
        )
    return anchors
