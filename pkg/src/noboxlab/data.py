"""Dataset manifests, split registries and batch iteration."""

from __future__ import annotations

import hashlib
import logging
import re
from collections import defaultdict
from collections.abc import Collection, Iterator, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError
from torch.utils.data import DataLoader, Dataset, TensorDataset

from noboxlab.exceptions import (
    AssignmentError,
    DomainError,
    IngestionError,
    PreconditionError,
    RoleNotFoundError,
)
from noboxlab.models import (
    DatasetManifest,
    DisjointnessVerdict,
    ImageBatch,
    LabelVector,
    ManifestItem,
)

logger = logging.getLogger(__name__)

HASH_ALGORITHM = "sha256"

# Images decoded per loader step when filling memory or hashing
_DECODE_CHUNK = 64

_HEADER = re.compile(
    r"^#name=(?P<name>\S+)\s+n_classes=(?P<n>\d+)\s+size=(?P<size>\d+x\d+x\d+)\s*$"
)


# --- manifests -------------------------------------------------------------------------------


def load_manifest(path: str | Path) -> DatasetManifest:
    """Parse a `#name=... n_classes=... size=HxWxC` header plus `id<TAB>path<TAB>label` lines."""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise IngestionError(str(path), str(exc)) from exc
    if not lines:
        raise PreconditionError(f"empty manifest {path}")

    match = _HEADER.match(lines[0])
    if match is None:
        raise PreconditionError(f"bad manifest header in {path}: {lines[0]!r}")
    h, w, c = (int(v) for v in match["size"].split("x"))

    items = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise PreconditionError(f"{path}:{lineno}: expected 3 tab-separated fields")
        item_id, rel_path, label = parts
        items.append(ManifestItem(item_id=item_id, file_path=rel_path, label=int(label)))

    return DatasetManifest(
        name=match["name"],
        items=items,
        n_classes=int(match["n"]),
        image_size=(h, w, c),
        root=path.parent,
    )


def write_manifest(manifest: DatasetManifest, path: str | Path) -> Path:
    """Write a manifest in the format read by load_manifest."""
    path = Path(path)
    h, w, c = manifest.image_size
    lines = [f"#name={manifest.name} n_classes={manifest.n_classes} size={h}x{w}x{c}"]
    lines += [f"{i.item_id}\t{i.file_path}\t{i.label}" for i in manifest.items]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def load_assignment(path: str | Path) -> dict[str, str]:
    """Read an `item_id<TAB>role` split file; every id may appear once."""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise IngestionError(str(path), str(exc)) from exc
    assignment: dict[str, str] = {}
    for lineno, line in enumerate(lines, start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not all(parts):
            raise AssignmentError(f"{path}:{lineno}: expected item_id<TAB>role, got {line!r}")
        item_id, role = parts
        if item_id in assignment:
            raise AssignmentError(f"{path}:{lineno}: item {item_id!r} is assigned twice")
        assignment[item_id] = role
    return assignment


def write_assignment(assignment: Mapping[str, str], path: str | Path) -> Path:
    path = Path(path)
    path.write_text(
        "".join(f"{item_id}\t{role}\n" for item_id, role in assignment.items()), encoding="utf-8"
    )
    return path


def role_items(assignment: Mapping[str, str], role: str) -> list[str]:
    """Item ids assigned to a role, in assignment order."""
    return [item_id for item_id, r in assignment.items() if r == role]


# --- decoding and hashing --------------------------------------------------------------------


def decode_image(path: Path, channels: int) -> np.ndarray:
    """Decode an image file into a uint8 (H, W, C) array."""
    try:
        with Image.open(path) as img:
            img = img.convert("RGB" if channels == 3 else "L")
            array = np.asarray(img, dtype=np.uint8)
    except (OSError, UnidentifiedImageError) as exc:
        raise IngestionError(str(path), str(exc)) from exc
    if array.ndim == 2:
        array = array[:, :, None]
    return array


def content_hash(pixels: np.ndarray) -> str:
    """Hash decoded pixel bytes together with their shape."""
    digest = hashlib.new(HASH_ALGORITHM)
    digest.update("x".join(str(s) for s in pixels.shape).encode("ascii"))
    digest.update(np.ascontiguousarray(pixels).tobytes())
    return digest.hexdigest()


def to_tensor(pixels: np.ndarray, size: tuple[int, int, int]) -> torch.Tensor:
    """Resize to the model input size and convert to a [0, 1] channel-first float tensor."""
    h, w, _ = size
    if pixels.shape[:2] != (h, w):
        mode = "RGB" if pixels.shape[2] == 3 else "L"
        image = Image.fromarray(pixels.squeeze(-1) if mode == "L" else pixels, mode=mode)
        resized = np.asarray(image.resize((w, h), Image.Resampling.BILINEAR), dtype=np.uint8)
        pixels = resized if resized.ndim == 3 else resized[:, :, None]
    return torch.from_numpy(pixels.astype(np.float32) / 255.0).permute(2, 0, 1).contiguous()


class ManifestDataset(Dataset[Any]):
    """Manifest items decoded on access.

    Yields `(pixels, label, item_id)` for model input, or the content hash when `hashed` is set.
    """

    def __init__(
        self,
        manifest: DatasetManifest,
        items: Sequence[ManifestItem] | None = None,
        *,
        hashed: bool = False,
    ) -> None:
        self.manifest = manifest
        self.items = list(manifest.items if items is None else items)
        self.hashed = hashed

    def __len__(self) -> int:
        return len(self.items)

    def __getitem__(self, index: int) -> Any:
        item = self.items[index]
        pixels = decode_image(self.manifest.resolve(item), self.manifest.image_size[2])
        if self.hashed:
            return content_hash(pixels)
        return to_tensor(pixels, self.manifest.image_size), item.label, item.item_id


def _collate(
    samples: Sequence[tuple[torch.Tensor, int, str]],
) -> tuple[ImageBatch, LabelVector]:
    pixels, labels, ids = zip(*samples, strict=True)
    return (
        ImageBatch(torch.stack(pixels), list(ids)),
        LabelVector(torch.tensor(labels, dtype=torch.long)),
    )


def _generator(seed: int | None) -> torch.Generator | None:
    return None if seed is None else torch.Generator().manual_seed(seed)


# --- split registry --------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitRegistry:
    """Content hashes of the images assigned to each split role."""

    role_to_hashes: Mapping[str, frozenset[str]] = field(default_factory=dict)
    algorithm: str = HASH_ALGORITHM

    @property
    def roles(self) -> list[str]:
        return sorted(self.role_to_hashes)

    def hashes(self, role: str) -> frozenset[str]:
        try:
            return self.role_to_hashes[role]
        except KeyError:
            raise RoleNotFoundError(role, self.role_to_hashes) from None

    def save(self, path: str | Path) -> Path:
        """Write `role=hash,hash,...` lines with sorted hashes."""
        path = Path(path)
        lines = [f"#algorithm={self.algorithm}"]
        lines += [f"{role}={','.join(sorted(self.role_to_hashes[role]))}" for role in self.roles]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: str | Path) -> SplitRegistry:
        algorithm = HASH_ALGORITHM
        roles: dict[str, frozenset[str]] = {}
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line.startswith("#algorithm="):
                algorithm = line.split("=", 1)[1].strip()
            elif line.strip() and not line.startswith("#"):
                role, _, joined = line.partition("=")
                roles[role] = frozenset(h for h in joined.split(",") if h)
        return cls(role_to_hashes=roles, algorithm=algorithm)


def build_split_registry(
    manifest: DatasetManifest,
    assignment: Mapping[str, str],
    workers: int = 0,
) -> SplitRegistry:
    """Hash every assigned image and group the hashes by role.

    `workers` is the number of loader processes; 0 decodes in the calling process.
    """
    known = set(manifest.ids)
    unknown = [item_id for item_id in assignment if item_id not in known]
    if unknown:
        raise AssignmentError(f"assignment references unknown items: {', '.join(unknown[:10])}")

    items = [manifest.item(item_id) for item_id in assignment]
    loader = DataLoader(
        ManifestDataset(manifest, items, hashed=True),
        batch_size=_DECODE_CHUNK,
        num_workers=workers,
        collate_fn=list,
    )
    hashes: list[str] = []
    for chunk in loader:
        hashes += chunk

    by_role: dict[str, set[str]] = defaultdict(set)
    counts: dict[str, int] = defaultdict(int)
    for item, digest in zip(items, hashes, strict=True):
        role = assignment[item.item_id]
        by_role[role].add(digest)
        counts[role] += 1

    for role, digests in by_role.items():
        if len(digests) < counts[role]:
            logger.warning(
                "role %r: %d items share pixel content with another item of the role",
                role,
                counts[role] - len(digests),
            )

    return SplitRegistry(role_to_hashes={r: frozenset(h) for r, h in by_role.items()})


def verify_disjointness(registry: SplitRegistry, role_a: str, role_b: str) -> DisjointnessVerdict:
    """Pass iff the two roles share no image content; otherwise list every shared hash."""
    shared = registry.hashes(role_a) & registry.hashes(role_b)
    return DisjointnessVerdict(role_a=role_a, role_b=role_b, offending=tuple(sorted(shared)))


# --- batching --------------------------------------------------------------------------------


def select_items(
    manifest: DatasetManifest,
    role_filter: Collection[str] | None,
    assignment: Mapping[str, str] | None = None,
) -> list[ManifestItem]:
    """Manifest items whose assigned role is in `role_filter`, in manifest order."""
    if role_filter is None:
        return list(manifest.items)
    if assignment is None:
        raise PreconditionError("a role filter needs the split assignment")
    wanted = set(role_filter)
    return [item for item in manifest.items if assignment.get(item.item_id) in wanted]


def iterate_batches(
    manifest: DatasetManifest,
    role_filter: Collection[str] | None,
    batch_size: int,
    shuffle_seed: int | None = None,
    *,
    assignment: Mapping[str, str] | None = None,
    workers: int = 0,
) -> Iterator[tuple[ImageBatch, LabelVector]]:
    """Yield every item of the filtered roles exactly once, in manifest order or a seeded shuffle.

    `role_filter` names split roles and is resolved through `assignment`; None keeps every item.
    """
    if batch_size < 1:
        raise DomainError(f"batch_size must be >= 1, got {batch_size}")
    items = select_items(manifest, role_filter, assignment)
    if not items:
        return
    yield from DataLoader(
        ManifestDataset(manifest, items),
        batch_size=batch_size,
        shuffle=shuffle_seed is not None,
        generator=_generator(shuffle_seed),
        num_workers=workers,
        collate_fn=_collate,
    )


class TensorBatchSource:
    """In-memory images re-batched every epoch with a deterministic shuffle."""

    def __init__(
        self,
        pixels: torch.Tensor,
        labels: torch.Tensor,
        ids: Sequence[str] | None = None,
        batch_size: int = 32,
        seed: int | None = 0,
    ) -> None:
        if batch_size < 1:
            raise DomainError(f"batch_size must be >= 1, got {batch_size}")
        self.pixels = pixels
        self.labels = labels.long()
        self.ids = list(ids) if ids is not None else [f"s{i:06d}" for i in range(len(labels))]
        self.batch_size = batch_size
        self.seed = seed
        ImageBatch(self.pixels, self.ids)

    @classmethod
    def from_manifest(
        cls,
        manifest: DatasetManifest,
        roles: Collection[str] | None = None,
        *,
        assignment: Mapping[str, str] | None = None,
        batch_size: int = 32,
        seed: int | None = 0,
        workers: int = 0,
    ) -> TensorBatchSource:
        """Decode the items of `roles` once and keep them in memory."""
        pixels, labels, ids = [], [], []
        for batch, y in iterate_batches(
            manifest, roles, _DECODE_CHUNK, assignment=assignment, workers=workers
        ):
            pixels.append(batch.pixels)
            labels.append(y.labels)
            ids += batch.ids
        if not ids:
            h, w, c = manifest.image_size
            return cls(
                torch.empty(0, c, h, w),
                torch.empty(0, dtype=torch.long),
                [],
                batch_size=batch_size,
                seed=seed,
            )
        return cls(torch.cat(pixels), torch.cat(labels), ids, batch_size=batch_size, seed=seed)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0

    def with_batch_size(self, batch_size: int) -> TensorBatchSource:
        return TensorBatchSource(self.pixels, self.labels, self.ids, batch_size, self.seed)

    def subset(self, item_ids: Collection[str]) -> TensorBatchSource:
        wanted = set(item_ids)
        index = [k for k, item_id in enumerate(self.ids) if item_id in wanted]
        return TensorBatchSource(
            self.pixels[index],
            self.labels[index],
            [self.ids[k] for k in index],
            self.batch_size,
            self.seed,
        )

    def batches(self, epoch: int = 0) -> Iterator[tuple[ImageBatch, LabelVector]]:
        """Batches of one epoch, shuffled with `seed + epoch` (stored order when seed is None)."""
        if not len(self):
            return
        loader = DataLoader(
            TensorDataset(self.pixels, self.labels, torch.arange(len(self))),
            batch_size=self.batch_size,
            shuffle=self.seed is not None,
            generator=_generator(None if self.seed is None else self.seed + epoch),
        )
        for pixels, labels, index in loader:
            yield (
                ImageBatch(pixels, [self.ids[k] for k in index.tolist()]),
                LabelVector(labels),
            )

    def __iter__(self) -> Iterator[tuple[ImageBatch, LabelVector]]:
        return self.batches(0)


def subsample_per_class(
    items: Sequence[ManifestItem], proportion: float, seed: int = 0
) -> list[ManifestItem]:
    """Keep max(1, round(p * n_c)) items of every class, chosen with a seeded shuffle."""
    if not 0.0 < proportion <= 1.0:
        raise DomainError(f"proportion must lie in (0, 1], got {proportion}")
    by_class: dict[int, list[ManifestItem]] = defaultdict(list)
    for item in items:
        by_class[item.label].append(item)
    rng = np.random.default_rng(seed)
    kept: set[str] = set()
    for label in sorted(by_class):
        members = by_class[label]
        k = max(1, round(proportion * len(members)))
        for index in rng.permutation(len(members))[:k]:
            kept.add(members[index].item_id)
    return [item for item in items if item.item_id in kept]
