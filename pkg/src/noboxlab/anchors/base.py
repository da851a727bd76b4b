"""Base text-embedding service for class anchors."""

from __future__ import annotations

from abc import ABC, abstractmethod
from collections.abc import Sequence

import numpy as np

from noboxlab.exceptions import ShapeError

DEFAULT_TEMPLATE = "a photo of a {}."


class BaseEmbeddingService(ABC):
    """Turns class names into one text embedding per class."""

    @abstractmethod
    def embed_batch(self, texts: list[str]) -> list[list[float]]:
        """Embeddings of `texts`, in the same order."""

    def embed_classes(
        self, class_names: Sequence[str], template: str = DEFAULT_TEMPLATE
    ) -> np.ndarray:
        """(n_classes, width) matrix of the prompted class names."""
        prompts = [template.format(name) for name in class_names]
        vectors = np.asarray(self.embed_batch(prompts), dtype=np.float64)
        if vectors.ndim != 2 or vectors.shape[0] != len(prompts):
            raise ShapeError(
                f"embedding service returned shape {vectors.shape} for {len(prompts)} classes"
            )
        return vectors
