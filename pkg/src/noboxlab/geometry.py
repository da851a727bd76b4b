"""Similarity, contrastive-loss and margin mathematics of image/text embedding spaces."""

from __future__ import annotations

import csv
import logging
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Literal

import numpy as np
import torch
import torch.nn.functional as F

from noboxlab.exceptions import DomainError, PreconditionError, ShapeError
from noboxlab.models import (
    UNIT_NORM_TOL,
    ClassAnchorSet,
    ContrastiveConfig,
    EmbeddingBatch,
    LabelVector,
)

logger = logging.getLogger(__name__)

ContrastiveForm = Literal["softmax", "relative", "distance"]

VectorLike = torch.Tensor | np.ndarray | Sequence[float]


def _vector(v: VectorLike) -> torch.Tensor:
    t = torch.as_tensor(v, dtype=torch.float64) if not isinstance(v, torch.Tensor) else v
    return t.detach().to(torch.float64).flatten()


def cosine_similarity(u: VectorLike, v: VectorLike) -> float:
    """Normalized dot product, clamped to [-1, 1]."""
    a, b = _vector(u), _vector(v)
    if a.shape != b.shape:
        raise ShapeError(f"vectors differ in length: {a.numel()} vs {b.numel()}")
    na, nb = a.norm(), b.norm()
    if na == 0 or nb == 0:
        raise DomainError("cosine similarity is undefined for zero vectors")
    return float(torch.clamp(torch.dot(a, b) / (na * nb), -1.0, 1.0))


def _require_unit(name: str, v: torch.Tensor) -> None:
    if abs(float(v.norm()) - 1.0) > UNIT_NORM_TOL:
        raise PreconditionError(f"{name} must be unit norm, got norm {float(v.norm())}")


def margin_delta(f: VectorLike, anchor_pos: VectorLike, anchor_neg: VectorLike) -> float:
    """h(f, pos) - h(f, neg) for unit vectors."""
    vf, vp, vn = _vector(f), _vector(anchor_pos), _vector(anchor_neg)
    for name, v in (("f", vf), ("anchor_pos", vp), ("anchor_neg", vn)):
        _require_unit(name, v)
    return cosine_similarity(vf, vp) - cosine_similarity(vf, vn)


def margin_delta_distance(f: VectorLike, anchor_pos: VectorLike, anchor_neg: VectorLike) -> float:
    """The same margin written with squared Euclidean distances (unit vectors only)."""
    vf, vp, vn = _vector(f), _vector(anchor_pos), _vector(anchor_neg)
    for name, v in (("f", vf), ("anchor_pos", vp), ("anchor_neg", vn)):
        _require_unit(name, v)
    return 0.5 * float((vf - vn).pow(2).sum() - (vf - vp).pow(2).sum())


def clip_contrastive_loss(
    img: EmbeddingBatch,
    txt: EmbeddingBatch,
    cfg: ContrastiveConfig | None = None,
    form: ContrastiveForm = "softmax",
) -> torch.Tensor:
    """Symmetric image-text contrastive loss in one of three algebraically equal forms.

    softmax  : mean -log(exp(h_ii/t) / sum_j exp(h_ji/t)) plus the transposed direction
    relative : mean log(sum_j exp((h_ji - h_ii)/t)) plus the transposed direction
    distance : relative form with h_ji - h_ii = (|x_i - y_i|^2 - |x_j - y_i|^2) / 2
    """
    cfg = cfg or ContrastiveConfig()
    if len(img) != len(txt):
        raise ShapeError(f"batch sizes differ: {len(img)} images vs {len(txt)} texts")
    if len(img) < 1:
        raise ShapeError("contrastive loss needs at least one pair")
    if img.dim != txt.dim:
        raise ShapeError(f"embedding widths differ: {img.dim} vs {txt.dim}")
    tau = cfg.tau

    if form == "distance":
        if not (img.unit_norm and txt.unit_norm):
            raise PreconditionError("the distance form requires unit-norm embeddings")
        x, y = img.vectors, txt.vectors
        dist = (x[:, None, :] - y[None, :, :]).pow(2).sum(-1)  # dist[j, i] = |x_j - y_i|^2
        diag = torch.diagonal(dist)
        image_side = torch.logsumexp(0.5 * (diag[None, :] - dist) / tau, dim=0)
        text_side = torch.logsumexp(0.5 * (diag[:, None] - dist) / tau, dim=1)
        return image_side.mean() + text_side.mean()

    x = F.normalize(img.vectors, dim=1)
    y = F.normalize(txt.vectors, dim=1)
    sim = x @ y.T  # sim[j, i] = h(x_j, y_i)
    diag = torch.diagonal(sim)

    if form == "softmax":
        # column i: images competing for text i; row i: texts competing for image i
        image_side = -torch.diagonal(torch.log_softmax(sim / tau, dim=0))
        text_side = -torch.diagonal(torch.log_softmax(sim / tau, dim=1))
        return image_side.mean() + text_side.mean()
    if form == "relative":
        image_side = torch.logsumexp((sim - diag[None, :]) / tau, dim=0)
        text_side = torch.logsumexp((sim - diag[:, None]) / tau, dim=1)
        return image_side.mean() + text_side.mean()
    raise ValueError(f"Unsupported contrastive form: {form}")


@dataclass
class ClassMarginStats:
    """Margin statistics of the samples of one class."""

    present: bool
    n_samples: int = 0
    mean_own_similarity: float | None = None
    max_other_similarity: float | None = None
    min_margin: float | None = None
    mean_margin: float | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "present": self.present,
            "n_samples": self.n_samples,
            "mean_own_similarity": self.mean_own_similarity,
            "max_other_similarity": self.max_other_similarity,
            "min_margin": self.min_margin,
            "mean_margin": self.mean_margin,
        }


@dataclass
class MarginAudit:
    """Per-class margins of an embedding set against class anchors."""

    per_class: dict[int, ClassMarginStats] = field(default_factory=dict)
    provider: str = "head-weights"

    @property
    def min_margin(self) -> float:
        """Smallest margin over every present class."""
        values = [s.min_margin for s in self.per_class.values() if s.min_margin is not None]
        return min(values) if values else float("nan")

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {str(c): s.to_dict() for c, s in sorted(self.per_class.items())}
        out["overall_min_margin"] = self.min_margin
        out["provider"] = self.provider
        return out


def class_margin_audit(
    embs: EmbeddingBatch, labels: LabelVector, anchors: ClassAnchorSet
) -> MarginAudit:
    """For each class c: statistics of h(f, anchor_c) - h(f, anchor_c') over its samples."""
    n_classes = anchors.n_classes
    if n_classes < 2:
        raise DomainError("a margin audit needs at least two classes")
    if not embs.unit_norm:
        raise PreconditionError("class_margin_audit requires unit-norm embeddings")
    if len(labels) != len(embs):
        raise ShapeError(f"{len(labels)} labels for {len(embs)} embeddings")
    if embs.dim != anchors.anchors.shape[1]:
        raise ShapeError(f"embedding width {embs.dim} != anchor width {anchors.anchors.shape[1]}")
    labels.check(n_classes)

    vectors = embs.vectors.detach().to(torch.float64)
    sims = vectors @ anchors.anchors.detach().to(torch.float64).T
    y = labels.labels

    audit = MarginAudit(provider=anchors.provider)
    for c in range(n_classes):
        rows = sims[y == c]
        if rows.shape[0] == 0:
            audit.per_class[c] = ClassMarginStats(present=False)
            continue
        own = rows[:, c]
        others = torch.cat([rows[:, :c], rows[:, c + 1 :]], dim=1)
        margins = own[:, None] - others
        audit.per_class[c] = ClassMarginStats(
            present=True,
            n_samples=int(rows.shape[0]),
            mean_own_similarity=float(own.mean()),
            max_other_similarity=float(others.max()),
            min_margin=float(margins.min()),
            mean_margin=float(margins.mean()),
        )
    return audit


def export_embeddings(
    embs: EmbeddingBatch,
    labels: LabelVector,
    ids: Sequence[str],
    path: str | Path,
) -> Path:
    """Write `id,label,e_0,...,e_{d-1}` rows for external projection tools."""
    if not len(embs) == len(labels) == len(ids):
        raise ShapeError(f"misaligned export: {len(embs)} / {len(labels)} / {len(ids)}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    values = embs.vectors.detach().to(torch.float64).cpu().numpy()
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["id", "label", *(f"e_{k}" for k in range(embs.dim))])
        for item_id, label, row in zip(ids, labels.labels.tolist(), values, strict=True):
            writer.writerow([item_id, label, *(format(v, ".12g") for v in row)])
    logger.info("exported %d embeddings to %s", len(ids), path)
    return path
