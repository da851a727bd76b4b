"""Class-name embeddings from a Titan text model on AWS Bedrock."""

from __future__ import annotations

import json
import logging
from typing import TYPE_CHECKING, Any

import boto3

from noboxlab.anchors.base import BaseEmbeddingService

if TYPE_CHECKING:
    from noboxlab.config import AnchorSettings

logger = logging.getLogger(__name__)

DEFAULT_MODEL = "amazon.titan-embed-text-v2:0"


class BedrockEmbeddingService(BaseEmbeddingService):
    """Titan embeds one prompt per request, so class prompts are sent one by one."""

    def __init__(self, config: AnchorSettings) -> None:
        self.config = config
        self.model = config.model or DEFAULT_MODEL
        self._client: Any = None

    @property
    def client(self) -> Any:
        """Get or create the Bedrock runtime client."""
        if self._client is None:
            credentials = {
                key: getattr(self.config, key)
                for key in ("aws_access_key_id", "aws_secret_access_key", "aws_session_token")
                if getattr(self.config, key)
            }
            self._client = boto3.client(
                "bedrock-runtime", region_name=self.config.region, **credentials
            )
        return self._client

    def _invoke(self, prompt: str) -> list[float]:
        response = self.client.invoke_model(
            modelId=self.model,
            body=json.dumps({"inputText": prompt, "normalize": True}),
            contentType="application/json",
            accept="application/json",
        )
        return list(json.loads(response["body"].read())["embedding"])

    def embed_batch(self, texts: list[str]) -> list[list[float]]:
        logger.info("embedding %d class prompts with %s", len(texts), self.model)
        return [self._invoke(text) for text in texts]
