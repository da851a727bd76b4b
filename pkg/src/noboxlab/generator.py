"""Residual U-Net generator that crafts l-inf bounded adversarial examples."""

from __future__ import annotations

import csv
import io
import logging
import os
from collections.abc import Iterable
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, ClassVar

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from torch import nn
from tqdm import tqdm

from noboxlab.exceptions import DomainError, PersistenceError, ShapeError
from noboxlab.margin import BatchSource
from noboxlab.models import (
    AdversarialBatch,
    AttackBudget,
    EpochRecord,
    ImageBatch,
    LabelVector,
    TrainingTrace,
    TrainSchedule,
)
from noboxlab.training import (
    check_finite,
    epoch_lr,
    evaluating,
    frozen,
    make_optimizer,
    model_device,
    set_lr,
)

logger = logging.getLogger(__name__)

ADVERSARIAL_MANIFEST = "adversarial_manifest.tsv"


@dataclass(frozen=True)
class GeneratorSpec:
    """Shape of the encoder-decoder generator."""

    channels: int = 3
    depth: int = 3
    width: int = 32
    res_blocks: int = 1

    def __post_init__(self) -> None:
        if self.depth < 1:
            raise DomainError(f"depth must be >= 1, got {self.depth}")
        if self.width < 1 or self.channels < 1:
            raise DomainError("width and channels must be positive")
        if self.res_blocks < 0:
            raise DomainError(f"res_blocks must be >= 0, got {self.res_blocks}")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> GeneratorSpec:
        return cls(**data)


class ResnetBlock(nn.Module):
    """Two reflect-padded 3x3 convolutions with an identity shortcut."""

    def __init__(self, dim: int) -> None:
        super().__init__()
        self.conv_block = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(dim, dim, kernel_size=3, bias=False),
            nn.BatchNorm2d(dim),
            nn.ReLU(inplace=True),
            nn.ReflectionPad2d(1),
            nn.Conv2d(dim, dim, kernel_size=3, bias=False),
            nn.BatchNorm2d(dim),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.conv_block(x)


def _down(in_c: int, out_c: int, res_blocks: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_c, out_c, 4, 2, 1),
        nn.BatchNorm2d(out_c),
        nn.LeakyReLU(0.2),
        *(ResnetBlock(out_c) for _ in range(res_blocks)),
    )


def _up(in_c: int, out_c: int, res_blocks: int) -> nn.Sequential:
    return nn.Sequential(
        nn.ConvTranspose2d(in_c, out_c, 4, 2, 1),
        nn.BatchNorm2d(out_c),
        nn.ReLU(),
        *(ResnetBlock(out_c) for _ in range(res_blocks)),
    )


class GeneratorModel(nn.Module):
    """U-Net mapping images to an unbounded residual of the same shape.

    The last convolution starts at zero, so an untrained generator yields a zero residual.
    """

    kind: ClassVar[str] = "generator"

    def __init__(self, spec: GeneratorSpec) -> None:
        super().__init__()
        self.spec = spec
        w, c = spec.width, spec.channels
        widths = [w * 2**i for i in range(spec.depth + 1)]

        self.stem = nn.Sequential(
            nn.Conv2d(c, w, 3, 1, 1), nn.BatchNorm2d(w), nn.ReLU(inplace=True)
        )
        self.downs = nn.ModuleList(
            _down(widths[i], widths[i + 1], spec.res_blocks) for i in range(spec.depth)
        )
        ups = []
        for i in reversed(range(spec.depth)):
            in_c = widths[i + 1] if i == spec.depth - 1 else 2 * widths[i + 1]
            ups.append(_up(in_c, widths[i], spec.res_blocks))
        self.ups = nn.ModuleList(ups)
        self.head = nn.Conv2d(2 * w, c, 3, 1, 1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)
        self.metadata: dict[str, Any] = {}

    @property
    def multiple(self) -> int:
        return int(2**self.spec.depth)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != self.spec.channels:
            raise ShapeError(
                f"generator expects (B, {self.spec.channels}, H, W), got {tuple(x.shape)}"
            )
        h, w = x.shape[-2:]
        padded = _pad_to_multiple(x, self.multiple)

        skips = [self.stem(padded)]
        for down in self.downs:
            skips.append(down(skips[-1]))
        out = skips.pop()
        for up in self.ups:
            out = torch.cat([up(out), skips.pop()], dim=1)
        return self.head(out)[..., :h, :w]

    def describe(self) -> dict[str, Any]:
        return {"spec": self.spec.to_dict()}

    @classmethod
    def rebuild(cls, meta: dict[str, Any]) -> GeneratorModel:
        return cls(GeneratorSpec.from_dict(meta["spec"]))


def _pad_to_multiple(x: torch.Tensor, multiple: int) -> torch.Tensor:
    h, w = x.shape[-2:]
    pad_h, pad_w = (-h) % multiple, (-w) % multiple
    if not pad_h and not pad_w:
        return x
    mode = "reflect" if pad_h < h and pad_w < w else "replicate"
    return F.pad(x, (0, pad_w, 0, pad_h), mode=mode)


def build_generator(spec: GeneratorSpec, seed: int = 0) -> GeneratorModel:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = GeneratorModel(spec)
    model.metadata["seed"] = seed
    return model


def _bounded(raw: torch.Tensor, x: torch.Tensor, budget: AttackBudget) -> torch.Tensor:
    if raw.shape != x.shape:
        raise ShapeError(f"residual shape {tuple(raw.shape)} != image shape {tuple(x.shape)}")
    eps = budget.epsilon
    if budget.bound_mode == "tanh-scale":
        delta = eps * torch.tanh(raw)
    else:
        delta = raw.clamp(-eps, eps)
    return (x + delta).clamp(0.0, 1.0)


def bound_perturbation(raw: torch.Tensor, x: ImageBatch, budget: AttackBudget) -> ImageBatch:
    """Map an unbounded residual to pixels within epsilon of `x` and inside [0, 1]."""
    return ImageBatch(_bounded(raw, x.pixels, budget), list(x.ids))


def _adversarial_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    if labels.numel() and int(labels.max()) >= logits.shape[1]:
        raise DomainError(f"labels exceed the {logits.shape[1]} classes of the surrogate")
    return -F.cross_entropy(logits, labels)


def generator_loss(
    surrogate: nn.Module, x_adv: ImageBatch | torch.Tensor, labels: LabelVector
) -> torch.Tensor:
    """Negative mean cross-entropy of the surrogate on adversarial pixels."""
    pixels = x_adv.pixels if isinstance(x_adv, ImageBatch) else x_adv
    return _adversarial_loss(surrogate(pixels), labels.labels.to(pixels.device))


def train_generator(
    generator: GeneratorModel,
    surrogate: nn.Module,
    data: BatchSource,
    sched: TrainSchedule,
    budget: AttackBudget,
    *,
    config_hash: str | None = None,
    progress: bool = False,
) -> tuple[GeneratorModel, TrainingTrace]:
    """Train the generator against a frozen surrogate; only generator parameters move."""
    device = model_device(generator)
    optimizer = make_optimizer(generator.parameters(), sched)
    trace = TrainingTrace(columns=("epoch", "loss", "fooling_rate", "lr"))
    step = 0

    with frozen(surrogate):
        for epoch in tqdm(range(sched.epochs), desc="train-gen", disable=not progress):
            lr = epoch_lr(sched, epoch)
            set_lr(optimizer, lr)
            generator.train()

            loss_sum, fooled, seen = 0.0, 0, 0
            for batch, labels in data.batches(epoch):
                x = batch.pixels.to(device)
                y = labels.labels.to(device)
                x_adv = _bounded(generator(x), x, budget)
                logits = surrogate(x_adv)
                loss = _adversarial_loss(logits, y)
                check_finite(loss, step)

                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                optimizer.step()

                loss_sum += float(loss) * len(batch)
                fooled += int((logits.detach().argmax(dim=1) != y).sum())
                seen += len(batch)
                logger.debug("train-gen step %d: loss=%.5f", step, float(loss))
                step += 1

            fooling_rate = fooled / max(seen, 1)
            trace.append(
                EpochRecord(
                    epoch=epoch,
                    loss=loss_sum / max(seen, 1),
                    acc=1.0 - fooling_rate,
                    lr=lr,
                    fooling_rate=fooling_rate,
                )
            )
            logger.info(
                "train-gen epoch %d: loss=%.4f fooling_rate=%.3f lr=%.6f",
                epoch,
                trace.records[-1].loss,
                fooling_rate,
                lr,
            )

    generator.eval()
    generator.metadata.update(
        {
            "config_hash": config_hash,
            "epoch": sched.epochs,
            "extra": {
                **generator.metadata.get("extra", {}),
                "budget": {"epsilon": budget.epsilon, "bound_mode": budget.bound_mode},
            },
        }
    )
    return generator, trace


@torch.no_grad()
def craft_adversarial(
    generator: GeneratorModel, batch: ImageBatch, budget: AttackBudget
) -> AdversarialBatch:
    """x' = bound(G(x)); a pure function of generator parameters, batch and budget."""
    if batch.pixels.shape[1] != generator.spec.channels:
        raise ShapeError(
            f"generator expects {generator.spec.channels} channels, got {batch.pixels.shape[1]}"
        )
    device = model_device(generator)
    with evaluating(generator):
        x = batch.pixels.to(device)
        adversarial = _bounded(generator(x), x, budget).to(batch.pixels.device)
    return AdversarialBatch.from_pair(batch, adversarial, budget.epsilon)


def dump_adversarial(
    adv: AdversarialBatch | Iterable[AdversarialBatch], out_dir: str | Path
) -> Path:
    """Write one PNG per adversarial image plus a TSV manifest; returns the manifest path.

    The manifest lists every batch passed in and replaces any manifest already in `out_dir`.
    """
    out_dir = Path(out_dir)
    manifest_path = out_dir / ADVERSARIAL_MANIFEST
    batches = [adv] if isinstance(adv, AdversarialBatch) else adv
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        buffer = io.StringIO()
        writer = csv.writer(buffer, delimiter="\t", lineterminator="\n")
        writer.writerow(["item_id", "file", "max_abs_delta", "epsilon"])
        for batch in batches:
            pixels = batch.adversarial.pixels.detach().cpu()
            deltas = batch.per_sample_delta.tolist()
            for i, item_id in enumerate(batch.source_ids):
                name = f"{item_id}.png"
                image = (pixels[i].permute(1, 2, 0).numpy() * 255.0).round().astype(np.uint8)
                Image.fromarray(image[:, :, 0] if image.shape[2] == 1 else image).save(
                    out_dir / name
                )
                writer.writerow(
                    [item_id, name, format(deltas[i], ".10g"), format(batch.epsilon, ".10g")]
                )
        tmp = manifest_path.with_name(manifest_path.name + ".tmp")
        tmp.write_text(buffer.getvalue(), encoding="utf-8")
        os.replace(tmp, manifest_path)
    except OSError as exc:
        raise PersistenceError(f"cannot write adversarial images to {out_dir}: {exc}") from exc
    return manifest_path
