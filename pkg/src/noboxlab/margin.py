"""Margin-aware fine-tuning of the surrogate with an additive angular margin loss."""

from __future__ import annotations

import logging
import math
from collections.abc import Iterable, Iterator, Sequence
from typing import Protocol

import torch
import torch.nn.functional as F
from tqdm import tqdm

from noboxlab.anchors import head_anchor_set
from noboxlab.data import SplitRegistry, verify_disjointness
from noboxlab.exceptions import DisjointnessError, PreconditionError, ShapeError
from noboxlab.geometry import class_margin_audit
from noboxlab.models import (
    UNIT_NORM_TOL,
    DisjointnessVerdict,
    EmbeddingBatch,
    EpochRecord,
    ImageBatch,
    LabelVector,
    MarginConfig,
    TrainingTrace,
    TrainSchedule,
)
from noboxlab.training import (
    check_finite,
    cosine_annealing_lr,
    epoch_lr,
    evaluating,
    make_optimizer,
    model_device,
    set_lr,
)
from noboxlab.zoo import SupervisoryHead, SurrogateModel

logger = logging.getLogger(__name__)

__all__ = [
    "BatchSource",
    "arcface_logits",
    "arcface_loss",
    "cosine_annealing_lr",
    "finetune_surrogate",
    "surrogate_min_margin",
]


class BatchSource(Protocol):
    """Anything that yields the (ImageBatch, LabelVector) pairs of an epoch."""

    def batches(self, epoch: int = 0) -> Iterator[tuple[ImageBatch, LabelVector]]: ...


def arcface_logits(
    emb: EmbeddingBatch,
    head: SupervisoryHead,
    labels: LabelVector,
    cfg: MarginConfig,
) -> torch.Tensor:
    """s*cos(a_j) for foreign classes and s*cos(a_y + m) for the labelled class.

    cos(a + m) uses cos(a)cos(m) - sin(a)sin(m) on the clamped cosine; no easy-margin fallback
    is applied when cos(a_y) <= 0.
    """
    if not emb.unit_norm:
        raise PreconditionError("arcface_logits needs unit-norm embeddings")
    row_norms = head.weight.detach().norm(dim=1)
    if (row_norms - 1.0).abs().max() > UNIT_NORM_TOL:
        raise PreconditionError("supervisory head rows must have unit norm")
    if emb.dim != head.weight.shape[1]:
        raise ShapeError(f"embedding width {emb.dim} != head width {head.weight.shape[1]}")
    labels.check(head.n_classes)
    if len(labels) != len(emb):
        raise ShapeError(f"{len(labels)} labels for {len(emb)} embeddings")

    eps = cfg.numeric_eps
    cos = head(emb.vectors).clamp(-1.0 + eps, 1.0 - eps)
    sin = torch.sqrt(1.0 - cos * cos)
    phi = cos * math.cos(cfg.m) - sin * math.sin(cfg.m)
    target = F.one_hot(labels.labels, head.n_classes).bool()
    return cfg.s * torch.where(target, phi, cos)


def arcface_loss(
    emb: EmbeddingBatch,
    head: SupervisoryHead,
    labels: LabelVector,
    cfg: MarginConfig,
) -> torch.Tensor:
    """Mean cross-entropy of the margin logits."""
    return F.cross_entropy(arcface_logits(emb, head, labels, cfg), labels.labels)


def _check_disjoint(
    registry: SplitRegistry, tune_role: str, protected_roles: Iterable[str]
) -> list[DisjointnessVerdict]:
    verdicts = []
    for role in protected_roles:
        if role not in registry.roles:
            logger.info("protected role %r is not registered; skipping its check", role)
            continue
        verdict = verify_disjointness(registry, tune_role, role)
        if not verdict.passed:
            raise DisjointnessError(tune_role, role, verdict.offending)
        verdicts.append(verdict)
    return verdicts


@torch.no_grad()
def surrogate_min_margin(model: SurrogateModel, data: BatchSource) -> float | None:
    """Smallest inter-class margin of the data against the head rows (None below 2 classes)."""
    if model.n_classes < 2:
        return None
    device = model_device(model)
    embs, labels = [], []
    with evaluating(model):
        for batch, y in data.batches(0):
            embs.append(model.embed(batch.pixels.to(device)).cpu())
            labels.append(y.labels)
    if not embs:
        return None
    audit = class_margin_audit(
        EmbeddingBatch.normalized(torch.cat(embs)),
        LabelVector(torch.cat(labels)),
        head_anchor_set(model.head),
    )
    return audit.min_margin


def finetune_surrogate(
    model: SurrogateModel,
    data: BatchSource,
    sched: TrainSchedule,
    cfg: MarginConfig,
    *,
    registry: SplitRegistry | None = None,
    tune_role: str | None = None,
    protected_roles: Sequence[str] = ("target-train",),
    freeze_encoder: bool = False,
    config_hash: str | None = None,
    progress: bool = False,
) -> tuple[SurrogateModel, TrainingTrace]:
    """Fine-tune encoder and head with the margin loss; head rows are re-normalized every step."""
    verdicts: list[DisjointnessVerdict] = []
    if registry is not None and tune_role is not None:
        verdicts = _check_disjoint(registry, tune_role, protected_roles)

    device = model_device(model)
    model.logit_scale.fill_(cfg.s)
    model.set_encoder_trainable(not freeze_encoder)
    model.head.normalize_()
    params = [p for p in model.parameters() if p.requires_grad]

    trace = TrainingTrace(columns=("epoch", "loss", "acc", "lr", "min_margin"))
    trace.baseline_min_margin = surrogate_min_margin(model, data)

    optimizer = make_optimizer(params, sched)
    step = 0
    for epoch in tqdm(range(sched.epochs), desc="finetune", disable=not progress):
        lr = epoch_lr(sched, epoch)
        set_lr(optimizer, lr)
        model.train()
        if freeze_encoder:
            model.encoder.eval()

        loss_sum, correct, seen = 0.0, 0, 0
        for batch, labels in data.batches(epoch):
            labels.check(model.n_classes, batch)
            x = batch.pixels.to(device)
            y = LabelVector(labels.labels.to(device))
            emb = EmbeddingBatch(model.embed(x), unit_norm=True)
            loss = arcface_loss(emb, model.head, y, cfg)
            check_finite(loss, step)

            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            model.head.normalize_()

            with torch.no_grad():
                predicted = model.head(emb.vectors).argmax(dim=1)
            loss_sum += float(loss) * len(batch)
            correct += int((predicted == y.labels).sum())
            seen += len(batch)
            step += 1

        record = EpochRecord(
            epoch=epoch,
            loss=loss_sum / max(seen, 1),
            acc=correct / max(seen, 1),
            lr=lr,
            min_margin=surrogate_min_margin(model, data),
        )
        trace.append(record)
        logger.info(
            "finetune epoch %d: loss=%.4f acc=%.3f lr=%.5f min_margin=%s",
            epoch,
            record.loss,
            record.acc,
            lr,
            record.min_margin,
        )

    model.set_encoder_trainable(True)
    model.eval()
    model.metadata.update(
        {
            "config_hash": config_hash,
            "epoch": sched.epochs,
            "extra": {
                **model.metadata.get("extra", {}),
                "margin": {"m": cfg.m, "s": cfg.s, "numeric_eps": cfg.numeric_eps},
                "freeze_encoder": freeze_encoder,
                "disjointness": [v.to_dict() for v in verdicts],
            },
        }
    )
    return model, trace
