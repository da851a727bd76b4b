"""Helpers shared by every training loop: seeding, optimizers, schedules, freezing."""

from __future__ import annotations

import math
import random
from collections.abc import Iterable, Iterator
from contextlib import contextmanager

import numpy as np
import torch
from torch import nn

from noboxlab.exceptions import DomainError, NonFiniteLossError
from noboxlab.models import TrainSchedule


def seed_everything(seed: int) -> None:
    """Seed python, numpy and torch, and ask torch for deterministic kernels."""
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def cosine_annealing_lr(t: float, horizon: int, lr_init: float, lr_min: float = 0.0) -> float:
    """lr_min + (lr_init - lr_min) * (1 + cos(pi * t / T)) / 2."""
    if horizon < 1:
        raise DomainError(f"horizon must be >= 1, got {horizon}")
    if not 0 <= t <= horizon:
        raise DomainError(f"t={t} outside [0, {horizon}]")
    return lr_min + 0.5 * (lr_init - lr_min) * (1.0 + math.cos(math.pi * t / horizon))


def epoch_lr(sched: TrainSchedule, epoch: int) -> float:
    """Learning rate of an epoch under the schedule (constant when annealing is off)."""
    if not sched.anneal or sched.epochs < 1:
        return sched.lr_init
    return cosine_annealing_lr(epoch, sched.epochs, sched.lr_init, sched.lr_min)


def make_optimizer(params: Iterable[nn.Parameter], sched: TrainSchedule) -> torch.optim.Optimizer:
    params = list(params)
    if sched.optimizer == "sgd":
        return torch.optim.SGD(
            params, lr=sched.lr_init, momentum=sched.momentum, weight_decay=sched.weight_decay
        )
    elif sched.optimizer == "adamw":
        return torch.optim.AdamW(params, lr=sched.lr_init, weight_decay=sched.weight_decay)
    else:
        raise ValueError(f"Unsupported optimizer: {sched.optimizer}")


def set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def check_finite(loss: torch.Tensor, step: int) -> None:
    if not torch.isfinite(loss):
        raise NonFiniteLossError(step, float(loss))


def model_device(model: nn.Module) -> torch.device:
    for param in model.parameters():
        return param.device
    return torch.device("cpu")


@contextmanager
def frozen(model: nn.Module) -> Iterator[nn.Module]:
    """Evaluation mode with gradients disabled for every parameter; restored on exit."""
    flags = [p.requires_grad for p in model.parameters()]
    was_training = model.training
    model.eval()
    for param in model.parameters():
        param.requires_grad_(False)
    try:
        yield model
    finally:
        for param, flag in zip(model.parameters(), flags, strict=True):
            param.requires_grad_(flag)
        model.train(was_training)


@contextmanager
def evaluating(model: nn.Module) -> Iterator[nn.Module]:
    """Temporarily switch a model to evaluation mode."""
    was_training = model.training
    model.eval()
    try:
        yield model
    finally:
        model.train(was_training)
