"""Data models for noboxlab."""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from datetime import datetime, timezone

UTC = timezone.utc
from fractions import Fraction
from pathlib import Path
from typing import Any, Literal

import torch

from noboxlab.exceptions import (
    BudgetViolationError,
    DomainError,
    PreconditionError,
    ShapeError,
)

UNIT_NORM_TOL = 1e-6

BoundMode = Literal["tanh-scale", "hard-clip"]
OptimizerName = Literal["sgd", "adamw"]
AnchorProvider = Literal["text-embedding", "head-weights", "explicit"]


@dataclass(frozen=True)
class ManifestItem:
    """One image of a dataset manifest."""

    item_id: str
    file_path: str
    label: int


@dataclass
class DatasetManifest:
    """A labelled image dataset rooted at a directory."""

    name: str
    items: list[ManifestItem]
    n_classes: int
    image_size: tuple[int, int, int]  # (height, width, channels)
    root: Path = field(default_factory=Path)

    def __post_init__(self) -> None:
        if self.n_classes < 1:
            raise DomainError(f"n_classes must be >= 1, got {self.n_classes}")
        seen: set[str] = set()
        for item in self.items:
            if item.item_id in seen:
                raise PreconditionError(f"duplicate item_id {item.item_id!r} in {self.name}")
            seen.add(item.item_id)
            if not 0 <= item.label < self.n_classes:
                raise DomainError(
                    f"label {item.label} of {item.item_id!r} outside [0, {self.n_classes})"
                )

    def item(self, item_id: str) -> ManifestItem:
        """Look up an item by id."""
        for item in self.items:
            if item.item_id == item_id:
                return item
        raise KeyError(item_id)

    def resolve(self, item: ManifestItem) -> Path:
        """Absolute path of an item's image file."""
        return self.root / item.file_path

    @property
    def ids(self) -> list[str]:
        return [item.item_id for item in self.items]


@dataclass
class ImageBatch:
    """A batch of images in pixel space, shape (batch, channels, height, width)."""

    pixels: torch.Tensor
    ids: list[str]

    def __post_init__(self) -> None:
        if self.pixels.dim() != 4:
            raise ShapeError(f"pixels must be rank 4, got shape {tuple(self.pixels.shape)}")
        if self.pixels.shape[0] != len(self.ids):
            raise ShapeError(
                f"batch axis {self.pixels.shape[0]} does not match {len(self.ids)} ids"
            )
        if self.pixels.numel() and (
            not torch.isfinite(self.pixels).all()
            or self.pixels.min() < 0.0
            or self.pixels.max() > 1.0
        ):
            raise DomainError("pixels must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def spatial_size(self) -> tuple[int, int, int]:
        """(height, width, channels) of the batch."""
        _, c, h, w = self.pixels.shape
        return (h, w, c)


@dataclass
class LabelVector:
    """Integer class labels aligned with an ImageBatch."""

    labels: torch.Tensor

    def __post_init__(self) -> None:
        if self.labels.dim() != 1:
            raise ShapeError(f"labels must be rank 1, got shape {tuple(self.labels.shape)}")
        self.labels = self.labels.long()

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def check(self, n_classes: int, batch: ImageBatch | None = None) -> None:
        """Validate label range and, optionally, alignment with a batch."""
        if batch is not None and len(self) != len(batch):
            raise ShapeError(f"{len(self)} labels for a batch of {len(batch)}")
        if len(self) and (self.labels.min() < 0 or self.labels.max() >= n_classes):
            raise DomainError(f"labels outside [0, {n_classes})")


@dataclass
class EmbeddingBatch:
    """A batch of d-dimensional embeddings."""

    vectors: torch.Tensor
    unit_norm: bool = False

    def __post_init__(self) -> None:
        if self.vectors.dim() != 2:
            raise ShapeError(f"embeddings must be rank 2, got {tuple(self.vectors.shape)}")
        if self.unit_norm and self.vectors.shape[0]:
            norms = self.vectors.detach().norm(dim=1)
            if (norms - 1.0).abs().max() > UNIT_NORM_TOL:
                raise PreconditionError("unit_norm embeddings must have rows of norm 1")

    @classmethod
    def normalized(cls, vectors: torch.Tensor) -> EmbeddingBatch:
        """Row-normalize vectors and flag the result as unit norm."""
        return cls(torch.nn.functional.normalize(vectors, dim=1), unit_norm=True)

    def __len__(self) -> int:
        return int(self.vectors.shape[0])

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])


@dataclass
class ClassAnchorSet:
    """Unit vectors that represent each class in embedding space."""

    anchors: torch.Tensor
    provider: AnchorProvider

    def __post_init__(self) -> None:
        if self.anchors.dim() != 2:
            raise ShapeError(f"anchors must be rank 2, got {tuple(self.anchors.shape)}")
        norms = self.anchors.detach().norm(dim=1)
        if norms.numel() and (norms - 1.0).abs().max() > UNIT_NORM_TOL:
            raise PreconditionError("class anchors must be unit vectors")

    @property
    def n_classes(self) -> int:
        return int(self.anchors.shape[0])


@dataclass(frozen=True)
class ContrastiveConfig:
    """Temperature of the image-text contrastive loss."""

    tau: float = 0.07

    def __post_init__(self) -> None:
        if not self.tau > 0:
            raise DomainError(f"tau must be positive, got {self.tau}")


@dataclass(frozen=True)
class MarginConfig:
    """Additive angular margin settings."""

    m: float = 0.15
    s: float = 30.0
    numeric_eps: float = 1e-7

    def __post_init__(self) -> None:
        if not 0.0 <= self.m < math.pi / 2:
            raise DomainError(f"margin m must lie in [0, pi/2), got {self.m}")
        if not self.s > 0:
            raise DomainError(f"scale s must be positive, got {self.s}")
        if not 0.0 <= self.numeric_eps < 0.5:
            raise DomainError(f"numeric_eps must lie in [0, 0.5), got {self.numeric_eps}")


@dataclass(frozen=True)
class TrainSchedule:
    """Optimizer and learning-rate schedule of a training loop."""

    optimizer: OptimizerName = "sgd"
    lr_init: float = 0.01
    lr_min: float = 0.0
    batch_size: int = 128
    epochs: int = 300
    anneal: bool = True
    seed: int = 0
    momentum: float = 0.9
    weight_decay: float = 5e-4

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise DomainError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise DomainError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr_min < 0 or self.lr_init < self.lr_min:
            raise DomainError(
                f"need 0 <= lr_min <= lr_init, got lr_min={self.lr_min} lr_init={self.lr_init}"
            )


@dataclass(frozen=True)
class AttackBudget:
    """l-inf perturbation budget in pixel units."""

    epsilon: float = 16 / 255
    bound_mode: BoundMode = "tanh-scale"

    def __post_init__(self) -> None:
        if not 0.0 <= self.epsilon <= 1.0:
            raise DomainError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if self.bound_mode not in ("tanh-scale", "hard-clip"):
            raise DomainError(f"unknown bound_mode {self.bound_mode!r}")


@dataclass(frozen=True)
class PgdConfig:
    """Projected gradient descent settings (FGSM is steps=1, step_size=epsilon)."""

    epsilon: float = 16 / 255
    steps: int = 10
    step_size: float | None = None  # defaults to epsilon / 4
    random_start: bool = False
    seed: int = 0
    debug: bool = False

    def __post_init__(self) -> None:
        if not 0.0 <= self.epsilon <= 1.0:
            raise DomainError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if self.steps < 0:
            raise DomainError(f"steps must be >= 0, got {self.steps}")
        if self.step_size is not None and not self.step_size > 0:
            raise DomainError(f"step_size must be positive, got {self.step_size}")

    @property
    def alpha(self) -> float:
        """Effective step size."""
        return self.step_size if self.step_size is not None else self.epsilon / 4


def budget_tolerance(dtype: torch.dtype) -> float:
    """One representable unit at pixel magnitude 1."""
    return float(torch.finfo(dtype).eps)


@dataclass
class AdversarialBatch:
    """Adversarial images together with the realized perturbation size."""

    adversarial: ImageBatch
    source_ids: list[str]
    max_abs_delta: float
    epsilon: float
    per_sample_delta: torch.Tensor = field(default_factory=lambda: torch.empty(0))

    def __post_init__(self) -> None:
        if self.source_ids != self.adversarial.ids:
            raise ShapeError("adversarial ids must match their clean sources")
        limit = self.epsilon + budget_tolerance(self.adversarial.pixels.dtype)
        if self.max_abs_delta > limit:
            over = [
                sid
                for sid, d in zip(self.source_ids, self.per_sample_delta.tolist(), strict=False)
                if d > limit
            ] or list(self.source_ids)
            raise BudgetViolationError(over, f"max |delta| {self.max_abs_delta} > {self.epsilon}")

    @classmethod
    def from_pair(
        cls, clean: ImageBatch, adversarial: torch.Tensor, epsilon: float
    ) -> AdversarialBatch:
        """Wrap adversarial pixels and measure them against the clean batch."""
        if adversarial.shape != clean.pixels.shape:
            raise ShapeError(
                f"adversarial shape {tuple(adversarial.shape)} != {tuple(clean.pixels.shape)}"
            )
        adversarial = adversarial.detach()
        delta = (adversarial - clean.pixels).abs().flatten(1)
        per_sample = delta.max(dim=1).values if delta.numel() else torch.zeros(len(clean))
        return cls(
            adversarial=ImageBatch(adversarial, list(clean.ids)),
            source_ids=list(clean.ids),
            max_abs_delta=float(per_sample.max()) if per_sample.numel() else 0.0,
            epsilon=epsilon,
            per_sample_delta=per_sample,
        )


@dataclass(frozen=True)
class DisjointnessVerdict:
    """Result of comparing two split roles."""

    role_a: str
    role_b: str
    offending: tuple[str, ...] = ()
    note: str | None = None

    @property
    def passed(self) -> bool:
        return not self.offending

    def to_dict(self) -> dict[str, Any]:
        data: dict[str, Any] = {
            "role_a": self.role_a,
            "role_b": self.role_b,
            "passed": self.passed,
            "offending": list(self.offending),
        }
        if self.note:
            data["note"] = self.note
        return data


@dataclass
class EpochRecord:
    """Summary of one training epoch."""

    epoch: int
    loss: float
    acc: float
    lr: float
    min_margin: float | None = None
    fooling_rate: float | None = None


@dataclass
class TrainingTrace:
    """Per-epoch records of a training loop."""

    columns: tuple[str, ...] = ("epoch", "loss", "acc", "lr", "min_margin")
    records: list[EpochRecord] = field(default_factory=list)
    baseline_min_margin: float | None = None

    def __len__(self) -> int:
        return len(self.records)

    def append(self, record: EpochRecord) -> None:
        self.records.append(record)

    def write_csv(self, path: str | Path) -> Path:
        """Write one line per epoch; floats use a fixed repr so reruns are byte-identical."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = [",".join(self.columns)]
        for record in self.records:
            values = [_format_cell(getattr(record, column)) for column in self.columns]
            lines.append(",".join(values))
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path


def _format_cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.10g}"
    return str(value)


@dataclass
class EvaluationReport:
    """Clean accuracy, adversarial accuracy and ASR of one attack on one target."""

    dataset: str
    target_id: str
    provenance: str
    attacker_id: str
    clean_accuracy: float
    adversarial_accuracy: float
    asr: float
    n_samples: int
    epsilon: float
    seed: int
    flags: tuple[str, ...] = ()
    craft_seconds: float = 0.0

    def __post_init__(self) -> None:
        for name in ("clean_accuracy", "adversarial_accuracy"):
            value = getattr(self, name)
            if not 0.0 <= value <= 100.0:
                raise DomainError(f"{name} must lie in [0, 100], got {value}")
        if self.asr != self.clean_accuracy - self.adversarial_accuracy:
            raise PreconditionError(
                f"asr {self.asr} != clean {self.clean_accuracy} - adv {self.adversarial_accuracy}"
            )

    @classmethod
    def from_counts(
        cls,
        *,
        clean_correct: int,
        adversarial_correct: int,
        n_samples: int,
        **fields: Any,
    ) -> EvaluationReport:
        """Build a report from exact correct-counts; rounding happens only when rendering."""
        clean = percentage(clean_correct, n_samples)
        adv = percentage(adversarial_correct, n_samples)
        return cls(
            clean_accuracy=clean,
            adversarial_accuracy=adv,
            asr=clean - adv,
            n_samples=n_samples,
            **fields,
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "dataset": self.dataset,
            "target": self.target_id,
            "provenance": self.provenance,
            "attacker": self.attacker_id,
            "clean": self.clean_accuracy,
            "adv": self.adversarial_accuracy,
            "asr": self.asr,
            "n_samples": self.n_samples,
            "epsilon": self.epsilon,
            "seed": self.seed,
            "flags": list(self.flags),
            "craft_seconds": self.craft_seconds,
        }


def percentage(correct: int, total: int) -> float:
    """100 * correct / total computed as an exact rational before conversion."""
    if total <= 0:
        return 0.0
    return float(Fraction(100 * correct, total))


@dataclass
class RunManifest:
    """Record of one orchestrated run."""

    run_id: str
    command: str
    config_hash: str
    seed: int
    started_at: str = field(default_factory=lambda: utcnow())
    finished_at: str | None = None
    status: Literal["running", "ok", "failed", "dry"] = "running"
    artifacts: dict[str, list[str]] = field(default_factory=dict)
    disjointness: dict[str, dict[str, Any]] = field(default_factory=dict)
    tool_version: str = ""
    error: str | None = None
    plan: list[str] = field(default_factory=list)

    def add_artifact(self, kind: str, path: str | Path) -> None:
        self.artifacts.setdefault(kind, []).append(str(path))

    def artifact_paths(self) -> Sequence[str]:
        return [p for paths in self.artifacts.values() for p in paths]

    def to_dict(self) -> dict[str, Any]:
        return {
            "run_id": self.run_id,
            "command": self.command,
            "status": self.status,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "started_at": self.started_at,
            "finished_at": self.finished_at,
            "artifacts": self.artifacts,
            "disjointness": self.disjointness,
            "tool_version": self.tool_version,
            "error": self.error,
            "plan": self.plan,
        }


def utcnow() -> str:
    return datetime.now(UTC).isoformat(timespec="seconds")
