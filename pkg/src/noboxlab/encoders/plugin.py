"""Pretrained encoder plugins loaded from TorchScript checkpoints."""

from __future__ import annotations

import hashlib
import logging
from collections.abc import Sequence
from pathlib import Path

import httpx
import torch

from noboxlab.encoders.base import BaseImageEncoder
from noboxlab.exceptions import ConstructionError

logger = logging.getLogger(__name__)

# CLIP preprocessing statistics
CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)

DEFAULT_CACHE = Path.home() / ".cache" / "noboxlab" / "plugins"


class PluginEncoder(BaseImageEncoder):
    """Wraps a TorchScript image tower mapping (B, C, H, W) to (B, d)."""

    def __init__(
        self,
        plugin_ref: str,
        emb_dim: int,
        input_size: tuple[int, int, int],
        mean: Sequence[float] = CLIP_MEAN,
        std: Sequence[float] = CLIP_STD,
        cache_dir: Path = DEFAULT_CACHE,
    ) -> None:
        super().__init__(emb_dim, input_size, mean=mean, std=std)
        self.plugin_ref = plugin_ref
        path = _resolve_plugin(plugin_ref, cache_dir)
        try:
            self.tower = torch.jit.load(str(path), map_location="cpu")
        except (RuntimeError, ValueError) as exc:
            raise ConstructionError(f"cannot load plugin {plugin_ref}: {exc}") from exc
        self._probe()

    def _probe(self) -> None:
        h, w, c = self.input_size
        was_training = self.tower.training
        self.tower.eval()
        with torch.no_grad():
            out = self.tower(torch.zeros(1, c, h, w))
        self.tower.train(was_training)
        if out.dim() != 2 or out.shape[1] != self.emb_dim:
            raise ConstructionError(
                f"plugin {self.plugin_ref} emits {tuple(out.shape)}, expected (1, {self.emb_dim})"
            )

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.tower(x)


def _resolve_plugin(plugin_ref: str, cache_dir: Path) -> Path:
    """Return a local path for the plugin, downloading http(s) references once."""
    if plugin_ref.startswith(("http://", "https://")):
        return _fetch_plugin(plugin_ref, cache_dir)
    path = Path(plugin_ref).expanduser()
    if not path.exists():
        raise ConstructionError(f"plugin checkpoint {plugin_ref} not found")
    return path


def _fetch_plugin(url: str, cache_dir: Path) -> Path:
    """Download a plugin checkpoint into the cache directory."""
    target = cache_dir / (hashlib.sha256(url.encode("utf-8")).hexdigest()[:16] + ".pt")
    if target.exists():
        return target
    cache_dir.mkdir(parents=True, exist_ok=True)
    logger.info("downloading encoder plugin %s", url)
    try:
        response = httpx.get(url, timeout=120.0, follow_redirects=True)
        response.raise_for_status()
    except httpx.HTTPError as exc:
        raise ConstructionError(f"cannot fetch plugin {url}: {exc}") from exc
    partial = target.with_suffix(".part")
    partial.write_bytes(response.content)
    partial.replace(target)
    return target
