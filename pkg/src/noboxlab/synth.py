"""Small class-structured image datasets for desk-scale experiments."""

from __future__ import annotations

import logging
import math
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from noboxlab.data import write_assignment, write_manifest
from noboxlab.exceptions import DomainError
from noboxlab.models import DatasetManifest, ManifestItem

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.tsv"
ASSIGNMENT_NAME = "assignment.tsv"

# class appearance is fixed across seeds; only phase and noise depend on the seed
_CLASS_SEED = 0x5EED


def _class_params(n_classes: int, channels: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rng = np.random.default_rng(_CLASS_SEED)
    angles = np.pi * np.arange(n_classes) / n_classes
    freqs = 2.0 + (np.arange(n_classes) % 3)
    colours = rng.uniform(0.3, 1.0, size=(n_classes, channels))
    return angles, freqs, colours


def _quantize(values: np.ndarray) -> np.ndarray:
    return np.round(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)


def _toy_uint8(
    n_classes: int, per_class: int, size: int, seed: int, channels: int
) -> tuple[np.ndarray, np.ndarray]:
    if n_classes < 1 or per_class < 1 or size < 1:
        raise DomainError("n_classes, per_class and size must be positive")
    angles, freqs, colours = _class_params(n_classes, channels)
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size

    images = np.empty((n_classes * per_class, size, size, channels), dtype=np.uint8)
    labels = np.repeat(np.arange(n_classes), per_class)
    for c in range(n_classes):
        axis = xx * math.cos(angles[c]) + yy * math.sin(angles[c])
        for i in range(per_class):
            phase = rng.uniform(0.0, 2.0 * np.pi)
            wave = np.sin(2.0 * np.pi * freqs[c] * axis + phase)
            pattern = 0.5 + 0.35 * wave[:, :, None] * colours[c][None, None, :]
            noise = rng.normal(0.0, 0.08, size=(size, size, channels))
            images[c * per_class + i] = _quantize(pattern + noise)
    return images, labels


def toy_tensors(
    n_classes: int = 10, per_class: int = 40, size: int = 32, seed: int = 0, channels: int = 3
) -> tuple[torch.Tensor, torch.Tensor]:
    """Oriented gratings, one orientation/frequency/colour per class, quantized to 8 bits."""
    images, labels = _toy_uint8(n_classes, per_class, size, seed, channels)
    pixels = torch.from_numpy(images).permute(0, 3, 1, 2).float() / 255.0
    return pixels, torch.from_numpy(labels).long()


def write_toy_dataset(
    root: str | Path,
    *,
    name: str = "toy10",
    n_classes: int = 10,
    per_class: int = 40,
    size: int = 32,
    seed: int = 0,
    channels: int = 3,
) -> tuple[Path, Path]:
    """Write PNGs, a manifest and a split assignment under `root`.

    Per class, the first half of the samples is `target-train` and the rest is `test`.
    """
    root = Path(root)
    image_dir = root / "images"
    image_dir.mkdir(parents=True, exist_ok=True)
    images, labels = _toy_uint8(n_classes, per_class, size, seed, channels)

    items: list[ManifestItem] = []
    assignment: dict[str, str] = {}
    for k, (image, label) in enumerate(zip(images, labels.tolist(), strict=True)):
        index = k % per_class
        item_id = f"{name}-c{label:02d}-{index:04d}"
        file_path = f"images/{item_id}.png"
        Image.fromarray(image[:, :, 0] if channels == 1 else image).save(root / file_path)
        items.append(ManifestItem(item_id=item_id, file_path=file_path, label=label))
        assignment[item_id] = "target-train" if index < per_class // 2 else "test"

    manifest = DatasetManifest(
        name=name, items=items, n_classes=n_classes, image_size=(size, size, channels), root=root
    )
    manifest_path = write_manifest(manifest, root / MANIFEST_NAME)
    assignment_path = write_assignment(assignment, root / ASSIGNMENT_NAME)
    logger.info("wrote %d toy images to %s", len(items), root)
    return manifest_path, assignment_path
