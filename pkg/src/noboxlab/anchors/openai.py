"""Class-name embeddings from an OpenAI embedding model."""

from __future__ import annotations

import logging
from typing import TYPE_CHECKING, Any

import openai

from noboxlab.anchors.base import BaseEmbeddingService

if TYPE_CHECKING:
    from noboxlab.config import AnchorSettings

logger = logging.getLogger(__name__)

DEFAULT_MODEL = "text-embedding-3-small"


class OpenAIEmbeddingService(BaseEmbeddingService):
    def __init__(self, config: AnchorSettings) -> None:
        self.config = config
        self.model = config.model or DEFAULT_MODEL
        self._client: openai.OpenAI | None = None

    @property
    def client(self) -> openai.OpenAI:
        """Get or create the OpenAI client."""
        if self._client is None:
            kwargs: dict[str, Any] = {}
            if self.config.api_key:
                kwargs["api_key"] = self.config.api_key
            if self.config.base_url:
                kwargs["base_url"] = self.config.base_url
            self._client = openai.OpenAI(**kwargs)
        return self._client

    def embed_batch(self, texts: list[str]) -> list[list[float]]:
        """All class prompts in one request; the response is re-ordered by index."""
        logger.info("embedding %d class prompts with %s", len(texts), self.model)
        response = self.client.embeddings.create(model=self.model, input=texts)
        ordered = sorted(response.data, key=lambda item: item.index)
        return [list(item.embedding) for item in ordered]
