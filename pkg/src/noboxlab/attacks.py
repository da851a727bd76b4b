"""Gradient-sign baseline attacks and adversarial training of target models."""

from __future__ import annotations

import logging
from collections.abc import Callable
from dataclasses import replace

import torch
import torch.nn.functional as F
from torch import nn
from tqdm import tqdm

from noboxlab.exceptions import (
    BudgetViolationError,
    DomainError,
    NonFiniteGradientError,
    ShapeError,
)
from noboxlab.margin import BatchSource
from noboxlab.models import (
    AdversarialBatch,
    EpochRecord,
    ImageBatch,
    LabelVector,
    PgdConfig,
    TrainingTrace,
    TrainSchedule,
    budget_tolerance,
)
from noboxlab.training import (
    check_finite,
    epoch_lr,
    evaluating,
    make_optimizer,
    model_device,
    set_lr,
)
from noboxlab.zoo import Provenance, TargetModel, TargetSpec, build_target

logger = logging.getLogger(__name__)

Attacker = Callable[[ImageBatch, LabelVector], ImageBatch | AdversarialBatch]


def _check_iterate(
    x_adv: torch.Tensor, x: torch.Tensor, epsilon: float, step: int, ids: list[str]
) -> None:
    limit = epsilon + budget_tolerance(x_adv.dtype)
    delta = (x_adv - x).abs().flatten(1).max(dim=1).values
    outside = (x_adv < 0).flatten(1).any(dim=1) | (x_adv > 1).flatten(1).any(dim=1)
    bad = (delta > limit) | outside
    if bool(bad.any()):
        offending = [ids[i] for i in bad.nonzero().flatten().tolist()]
        raise BudgetViolationError(offending, f"PGD iterate {step} left the epsilon ball")


def _pgd(
    model: nn.Module, x: torch.Tensor, y: torch.Tensor, cfg: PgdConfig, ids: list[str]
) -> torch.Tensor:
    eps = cfg.epsilon
    x = x.detach()
    if eps == 0:
        return x.clone()

    if cfg.random_start:
        gen = torch.Generator().manual_seed(cfg.seed)
        noise = torch.empty(x.shape, dtype=x.dtype).uniform_(-eps, eps, generator=gen)
        x_adv = (x + noise.to(x.device)).clamp(0.0, 1.0)
    else:
        x_adv = x.clone()

    lower, upper = x - eps, x + eps
    for step in range(cfg.steps):
        x_adv.requires_grad_(True)
        logits = model(x_adv)
        if y.numel() and int(y.max()) >= logits.shape[1]:
            raise DomainError(f"labels exceed the {logits.shape[1]} classes of the model")
        loss = F.cross_entropy(logits, y)
        (grad,) = torch.autograd.grad(loss, x_adv)
        if not torch.isfinite(grad).all():
            raise NonFiniteGradientError(step)
        x_adv = x_adv.detach() + cfg.alpha * grad.sign()
        x_adv = torch.max(torch.min(x_adv, upper), lower).clamp(0.0, 1.0)
        if cfg.debug:
            _check_iterate(x_adv, x, eps, step, ids)
    return x_adv.detach()


def pgd_attack(
    model: nn.Module, batch: ImageBatch, labels: LabelVector, cfg: PgdConfig
) -> AdversarialBatch:
    """Iterated sign-gradient ascent on cross-entropy, projected to the epsilon-ball and [0, 1]."""
    if len(labels) != len(batch):
        raise ShapeError(f"{len(labels)} labels for a batch of {len(batch)}")
    device = model_device(model)
    with evaluating(model):
        adversarial = _pgd(
            model, batch.pixels.to(device), labels.labels.to(device), cfg, list(batch.ids)
        )
    return AdversarialBatch.from_pair(batch, adversarial.to(batch.pixels.device), cfg.epsilon)


def fgsm_attack(
    model: nn.Module, batch: ImageBatch, labels: LabelVector, epsilon: float
) -> AdversarialBatch:
    """Single step of size epsilon without random start."""
    cfg = PgdConfig(epsilon=epsilon, steps=1, step_size=epsilon or None, random_start=False)
    return pgd_attack(model, batch, labels, cfg)


def pgd_attacker(model: nn.Module, cfg: PgdConfig) -> Attacker:
    """Wrap PGD against `model` (typically the surrogate) as an evaluation attacker."""

    def attack(batch: ImageBatch, labels: LabelVector) -> AdversarialBatch:
        return pgd_attack(model, batch, labels, cfg)

    return attack


def _fit_target(
    model: TargetModel,
    data: BatchSource,
    sched: TrainSchedule,
    *,
    pgd: PgdConfig | None,
    mix_ratio: float,
    progress: bool,
) -> TrainingTrace:
    device = model_device(model)
    optimizer = make_optimizer(model.parameters(), sched)
    trace = TrainingTrace(columns=("epoch", "loss", "acc", "lr"))
    step = 0
    desc = "adv-train" if pgd is not None else "train-target"

    for epoch in tqdm(range(sched.epochs), desc=desc, disable=not progress):
        lr = epoch_lr(sched, epoch)
        set_lr(optimizer, lr)
        loss_sum, correct, seen = 0.0, 0, 0
        for batch, labels in data.batches(epoch):
            labels.check(model.n_classes, batch)
            x = batch.pixels.to(device)
            y = labels.labels.to(device)
            if pgd is not None:
                step_cfg = replace(pgd, seed=pgd.seed + step)
                with evaluating(model):
                    x_adv = _pgd(model, x, y, step_cfg, list(batch.ids))
                n_clean = round(mix_ratio * len(batch))
                x = torch.cat([x[:n_clean], x_adv[n_clean:]]) if n_clean else x_adv

            model.train()
            logits = model(x)
            loss = F.cross_entropy(logits, y)
            check_finite(loss, step)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()

            loss_sum += float(loss) * len(batch)
            correct += int((logits.detach().argmax(dim=1) == y).sum())
            seen += len(batch)
            step += 1

        record = EpochRecord(
            epoch=epoch, loss=loss_sum / max(seen, 1), acc=correct / max(seen, 1), lr=lr
        )
        trace.append(record)
        logger.info(
            "%s epoch %d: loss=%.4f acc=%.3f lr=%.5f", desc, epoch, record.loss, record.acc, lr
        )
    model.eval()
    return trace


def _train(
    spec: TargetSpec,
    data: BatchSource,
    sched: TrainSchedule,
    provenance: Provenance,
    *,
    pgd: PgdConfig | None,
    mix_ratio: float,
    seed: int | None,
    device: str | torch.device,
    config_hash: str | None,
    progress: bool,
) -> tuple[TargetModel, TrainingTrace]:
    model = build_target(spec, seed=sched.seed if seed is None else seed, provenance=provenance)
    model.to(device)
    trace = _fit_target(model, data, sched, pgd=pgd, mix_ratio=mix_ratio, progress=progress)
    model.metadata.update({"config_hash": config_hash, "epoch": sched.epochs})
    return model, trace


def train_target(
    spec: TargetSpec,
    data: BatchSource,
    sched: TrainSchedule,
    *,
    seed: int | None = None,
    device: str | torch.device = "cpu",
    config_hash: str | None = None,
    progress: bool = False,
) -> tuple[TargetModel, TrainingTrace]:
    """Standard cross-entropy training of a target classifier."""
    return _train(
        spec,
        data,
        sched,
        "standard",
        pgd=None,
        mix_ratio=0.0,
        seed=seed,
        device=device,
        config_hash=config_hash,
        progress=progress,
    )


def adversarial_train(
    spec: TargetSpec,
    data: BatchSource,
    pgd: PgdConfig,
    sched: TrainSchedule,
    *,
    mix_ratio: float = 0.0,
    seed: int | None = None,
    device: str | torch.device = "cpu",
    config_hash: str | None = None,
    progress: bool = False,
) -> tuple[TargetModel, TrainingTrace]:
    """Train on PGD examples crafted against the current model at every step.

    `mix_ratio` keeps that fraction of each batch clean; 0 trains on adversarial examples only.
    """
    if not 0.0 <= mix_ratio <= 1.0:
        raise DomainError(f"mix_ratio must lie in [0, 1], got {mix_ratio}")
    model, trace = _train(
        spec,
        data,
        sched,
        "pgd10-robust",
        pgd=pgd,
        mix_ratio=mix_ratio,
        seed=seed,
        device=device,
        config_hash=config_hash,
        progress=progress,
    )
    model.metadata["extra"] = {
        "pgd": {
            "epsilon": pgd.epsilon,
            "steps": pgd.steps,
            "step_size": pgd.alpha,
            "random_start": pgd.random_start,
        },
        "mix_ratio": mix_ratio,
    }
    return model, trace
