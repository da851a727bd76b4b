"""Perturbation bounding, the generator network and its training loop."""

from __future__ import annotations

import csv
import math
from pathlib import Path

import pytest
import torch
from torch import nn

from noboxlab.data import TensorBatchSource
from noboxlab.exceptions import BudgetViolationError, DomainError, ShapeError
from noboxlab.generator import (
    ADVERSARIAL_MANIFEST,
    GeneratorModel,
    GeneratorSpec,
    bound_perturbation,
    build_generator,
    craft_adversarial,
    dump_adversarial,
    generator_loss,
    train_generator,
)
from noboxlab.models import AdversarialBatch, AttackBudget, ImageBatch, LabelVector, TrainSchedule
from noboxlab.zoo import EncoderSpec, SurrogateModel, build_surrogate, parameter_digest

BUDGETS = [0.0, 8 / 255, 16 / 255]


def _batch(n: int = 8, size: int = 32, seed: int = 0) -> ImageBatch:
    gen = torch.Generator().manual_seed(seed)
    return ImageBatch(torch.rand(n, 3, size, size, generator=gen), [f"x{i}" for i in range(n)])


def _noisy_generator(spec: GeneratorSpec) -> GeneratorModel:
    generator = build_generator(spec, seed=1)
    with torch.no_grad():
        generator.head.weight.normal_(0.0, 1.0, generator=torch.Generator().manual_seed(2))
    return generator


def _assert_within(adv: torch.Tensor, clean: torch.Tensor, epsilon: float) -> None:
    tolerance = torch.finfo(adv.dtype).eps
    assert bool(((adv - clean).abs() <= epsilon + tolerance).all())
    assert bool((adv >= 0).all()) and bool((adv <= 1).all())


def test_zero_residual_is_identity() -> None:
    x = _batch()

    out = bound_perturbation(torch.zeros_like(x.pixels), x, AttackBudget())

    assert torch.equal(out.pixels, x.pixels)
    assert out.ids == x.ids


def test_tanh_saturation_reaches_the_budget() -> None:
    x = ImageBatch(torch.full((1, 3, 4, 4), 0.5), ["a"])

    out = bound_perturbation(torch.full_like(x.pixels, 1e4), x, AttackBudget(epsilon=16 / 255))

    torch.testing.assert_close(out.pixels, x.pixels + 16 / 255)


@pytest.mark.parametrize("mode", ["tanh-scale", "hard-clip"])
@pytest.mark.parametrize("epsilon", BUDGETS)
def test_bounded_pixels_respect_the_budget(mode: str, epsilon: float) -> None:
    x = _batch()
    raw = 5 * torch.randn(x.pixels.shape, generator=torch.Generator().manual_seed(3))

    out = bound_perturbation(raw, x, AttackBudget(epsilon=epsilon, bound_mode=mode))

    assert out.pixels.numel() >= 10_000
    _assert_within(out.pixels, x.pixels, epsilon)


def test_bound_perturbation_shape_mismatch() -> None:
    x = _batch(n=2)

    with pytest.raises(ShapeError):
        bound_perturbation(torch.zeros(2, 3, 8, 8), x, AttackBudget())


@pytest.mark.parametrize("size", [(16, 16), (13, 17), (32, 24)])
def test_generator_keeps_spatial_shape(size: tuple[int, int]) -> None:
    generator = build_generator(GeneratorSpec(depth=3, width=4))

    out = generator(torch.rand(2, 3, *size))

    assert out.shape == (2, 3, *size)


def test_generator_rejects_wrong_channels() -> None:
    with pytest.raises(ShapeError):
        build_generator(GeneratorSpec(width=4))(torch.rand(1, 1, 16, 16))


def test_untrained_generator_is_identity() -> None:
    x = _batch()

    adv = craft_adversarial(build_generator(GeneratorSpec(width=4)), x, AttackBudget())

    assert torch.equal(adv.adversarial.pixels, x.pixels)
    assert adv.max_abs_delta == 0.0


@pytest.mark.parametrize("mode", ["tanh-scale", "hard-clip"])
@pytest.mark.parametrize("epsilon", BUDGETS)
def test_crafted_batches_respect_the_budget(mode: str, epsilon: float) -> None:
    x = _batch()
    generator = _noisy_generator(GeneratorSpec(depth=2, width=4))

    adv = craft_adversarial(generator, x, AttackBudget(epsilon=epsilon, bound_mode=mode))

    _assert_within(adv.adversarial.pixels, x.pixels, epsilon)
    assert adv.max_abs_delta <= epsilon + torch.finfo(torch.float32).eps
    if epsilon == 0:
        assert torch.equal(adv.adversarial.pixels, x.pixels)
    else:
        assert adv.max_abs_delta > 0


def test_crafting_is_deterministic() -> None:
    x = _batch()
    generator = _noisy_generator(GeneratorSpec(depth=2, width=4))

    first = craft_adversarial(generator, x, AttackBudget())
    second = craft_adversarial(generator, x, AttackBudget())

    assert torch.equal(first.adversarial.pixels, second.adversarial.pixels)


def test_adversarial_batch_rejects_out_of_budget_pixels() -> None:
    x = _batch(n=2)
    pixels = x.pixels.clone()
    pixels[1] = (pixels[1] + 0.2).clamp(0, 1)

    with pytest.raises(BudgetViolationError) as info:
        AdversarialBatch.from_pair(x, pixels, 8 / 255)
    assert info.value.ids == ("x1",)


class _Uniform(nn.Module):
    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.zeros(x.shape[0], 10) + 0.0 * x.sum()


def test_loss_of_a_uniform_predictor() -> None:
    x = _batch(n=4, size=8)

    loss = generator_loss(_Uniform(), x, LabelVector(torch.tensor([0, 3, 5, 9])))

    assert float(loss) == pytest.approx(-math.log(10), abs=1e-6)


def test_loss_of_a_confident_predictor() -> None:
    class Confident(nn.Module):
        def forward(self, x: torch.Tensor) -> torch.Tensor:
            logits = torch.full((x.shape[0], 10), -50.0)
            logits[:, 2] = 50.0
            return logits

    loss = generator_loss(Confident(), _batch(n=2, size=8), LabelVector(torch.tensor([2, 2])))

    assert -1e-6 < float(loss) <= 0.0


def test_loss_rejects_unknown_classes() -> None:
    with pytest.raises(DomainError):
        generator_loss(_Uniform(), _batch(n=1, size=8), LabelVector(torch.tensor([10])))


def test_loss_gradient_matches_finite_differences() -> None:
    surrogate = build_surrogate(EncoderSpec(emb_dim=4, input_size=(8, 8, 1), width=2), 3, seed=0)
    surrogate = surrogate.double().eval()
    x = torch.rand(2, 1, 8, 8, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    x = (0.1 + 0.8 * x).requires_grad_(True)
    labels = LabelVector(torch.tensor([0, 2]))

    assert torch.autograd.gradcheck(
        lambda pixels: generator_loss(surrogate, pixels, labels), (x,), atol=1e-6, rtol=1e-4
    )


def test_training_never_touches_the_surrogate(
    tiny_surrogate: SurrogateModel, toy_source: TensorBatchSource
) -> None:
    generator = build_generator(GeneratorSpec(depth=2, width=4))
    surrogate_digest = parameter_digest(tiny_surrogate)
    generator_digest = parameter_digest(generator)
    sched = TrainSchedule(optimizer="adamw", epochs=2, batch_size=6, lr_init=1e-3)

    generator, trace = train_generator(
        generator, tiny_surrogate, toy_source, sched, AttackBudget(), config_hash="h"
    )

    assert parameter_digest(tiny_surrogate) == surrogate_digest
    assert parameter_digest(generator) != generator_digest
    assert all(p.requires_grad for p in tiny_surrogate.parameters())
    assert [r.epoch for r in trace.records] == [0, 1]
    assert all(0.0 <= (r.fooling_rate or 0.0) <= 1.0 for r in trace.records)
    assert generator.metadata["extra"]["budget"]["epsilon"] == AttackBudget().epsilon


def test_training_without_epochs_keeps_the_generator(
    tiny_surrogate: SurrogateModel, toy_source: TensorBatchSource
) -> None:
    generator = build_generator(GeneratorSpec(depth=2, width=4))
    digest = parameter_digest(generator)

    generator, trace = train_generator(
        generator, tiny_surrogate, toy_source, TrainSchedule(epochs=0), AttackBudget()
    )

    assert parameter_digest(generator) == digest
    assert len(trace) == 0


def test_dump_adversarial(tmp_path: Path) -> None:
    x = _batch(n=3, size=8)
    adv = craft_adversarial(
        _noisy_generator(GeneratorSpec(depth=1, width=4)), x, AttackBudget(epsilon=8 / 255)
    )

    dump_adversarial(adv, tmp_path / "adv")
    manifest = dump_adversarial(adv, tmp_path / "adv")

    assert manifest.name == ADVERSARIAL_MANIFEST
    with manifest.open(newline="") as handle:
        rows = list(csv.reader(handle, delimiter="\t"))
    assert rows[0] == ["item_id", "file", "max_abs_delta", "epsilon"]
    assert [r[0] for r in rows[1:]] == ["x0", "x1", "x2"]
    assert (tmp_path / "adv" / "x0.png").exists()
    assert all(float(r[2]) <= float(r[3]) + 1e-6 for r in rows[1:])


def test_dump_adversarial_lists_every_batch(tmp_path: Path) -> None:
    generator = _noisy_generator(GeneratorSpec(depth=1, width=4))
    budget = AttackBudget(epsilon=4 / 255)
    first = craft_adversarial(generator, _batch(n=2, size=8), budget)
    pixels = torch.rand(3, 3, 8, 8, generator=torch.Generator().manual_seed(1))
    second = craft_adversarial(generator, ImageBatch(pixels, ["y0", "y1", "y2"]), budget)

    manifest = dump_adversarial(iter([first, second]), tmp_path)

    with manifest.open(newline="") as handle:
        rows = list(csv.reader(handle, delimiter="\t"))
    assert [r[0] for r in rows[1:]] == ["x0", "x1", "y0", "y1", "y2"]
    assert not (tmp_path / (ADVERSARIAL_MANIFEST + ".tmp")).exists()
