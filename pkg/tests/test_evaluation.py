"""Classification, attack success rate and report rendering."""

from __future__ import annotations

import json
from pathlib import Path
from statistics import fmean

import pytest
import torch
from torch import nn

from noboxlab.data import TensorBatchSource
from noboxlab.evaluation import (
    attack_success_rate,
    classify,
    evaluate,
    generator_attacker,
    identity_attacker,
    render_report,
)
from noboxlab.exceptions import (
    BudgetViolationError,
    DomainError,
    PreconditionError,
    ShapeError,
)
from noboxlab.generator import GeneratorSpec, build_generator
from noboxlab.models import AttackBudget, EvaluationReport, ImageBatch, LabelVector
from noboxlab.zoo import TargetSpec, build_target


class _Threshold(nn.Module):
    """Class 0 when the first pixel is at most 0.5, class 1 otherwise."""

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        first = x[:, 0, 0, 0]
        return torch.stack([0.5 - first, first - 0.5], dim=1)


def _report(
    dataset: str, clean: float, adv: float, target: str = "small-cnn", attacker: str = "gen"
) -> EvaluationReport:
    return EvaluationReport(
        dataset=dataset,
        target_id=target,
        provenance="standard",
        attacker_id=attacker,
        clean_accuracy=clean,
        adversarial_accuracy=adv,
        asr=clean - adv,
        n_samples=100,
        epsilon=16 / 255,
        seed=0,
    )


def test_classify_one_hot_and_ties() -> None:
    logits = torch.tensor([[0.0, 1.0, 0.0], [2.0, 2.0, 2.0], [0.0, 3.0, 3.0]])
    batch = ImageBatch(torch.zeros(3, 1, 1, 1), ["a", "b", "c"])

    predicted = classify(lambda _: logits, batch)

    assert predicted.labels.tolist() == [1, 0, 1]


def test_classify_matches_a_row_scan() -> None:
    logits = torch.randn(50, 7, generator=torch.Generator().manual_seed(0))
    batch = ImageBatch(torch.zeros(50, 1, 1, 1), [str(i) for i in range(50)])

    predicted = classify(lambda _: logits, batch).labels.tolist()

    expected = [max(range(7), key=lambda j, row=row: (row[j], -j)) for row in logits.tolist()]
    assert predicted == expected


def test_classify_checks_the_input_size() -> None:
    target = build_target(TargetSpec(n_classes=3, input_size=(16, 16, 3), width=4))

    with pytest.raises(ShapeError):
        classify(target, ImageBatch(torch.zeros(1, 3, 8, 8), ["a"]))


def test_attack_success_rate_examples() -> None:
    assert attack_success_rate(80, 20) == 60
    assert attack_success_rate(100, 0) == 100
    assert attack_success_rate(70.00, 74.84) == pytest.approx(-4.84)
    with pytest.raises(DomainError):
        attack_success_rate(101, 0)


def test_report_identity_is_enforced() -> None:
    with pytest.raises(PreconditionError):
        EvaluationReport(
            dataset="d",
            target_id="t",
            provenance="standard",
            attacker_id="a",
            clean_accuracy=80.0,
            adversarial_accuracy=20.0,
            asr=50.0,
            n_samples=10,
            epsilon=0.1,
            seed=0,
        )


def _scripted_source() -> TensorBatchSource:
    values = [0.2] * 9 + [0.8]
    pixels = torch.tensor(values).view(10, 1, 1, 1)
    return TensorBatchSource(pixels, torch.zeros(10, dtype=torch.long), batch_size=4, seed=None)


def test_scripted_oracle_report() -> None:
    def push_six_over(batch: ImageBatch, labels: LabelVector) -> ImageBatch:
        pixels = batch.pixels.clone()
        for k, item_id in enumerate(batch.ids):
            if int(item_id[1:]) < 6:
                pixels[k] = 0.7
        return ImageBatch(pixels, batch.ids)

    report = evaluate(
        _Threshold(),
        push_six_over,
        _scripted_source(),
        AttackBudget(epsilon=0.5),
        dataset="scripted",
        attacker_id="push",
    )

    assert (report.clean_accuracy, report.adversarial_accuracy, report.asr) == (90.0, 30.0, 60.0)
    assert report.n_samples == 10
    assert report.target_id == "_Threshold"


def test_attack_that_helps_gives_negative_asr() -> None:
    def pull_back(batch: ImageBatch, labels: LabelVector) -> ImageBatch:
        return ImageBatch(batch.pixels.clamp(max=0.4), batch.ids)

    report = evaluate(
        _Threshold(),
        pull_back,
        _scripted_source(),
        AttackBudget(epsilon=0.5),
        dataset="scripted",
        attacker_id="pull",
    )

    assert report.asr == -10.0


def test_identity_attacker_has_zero_asr(toy_source: TensorBatchSource) -> None:
    target = build_target(TargetSpec(n_classes=3, input_size=(16, 16, 3), width=4))

    report = evaluate(
        target, identity_attacker, toy_source, AttackBudget(), dataset="toy", attacker_id="id"
    )

    assert report.asr == 0.0


def test_over_budget_attacker_fails_the_run() -> None:
    def cheat(batch: ImageBatch, labels: LabelVector) -> ImageBatch:
        return ImageBatch(torch.ones_like(batch.pixels), batch.ids)

    with pytest.raises(BudgetViolationError) as info:
        evaluate(
            _Threshold(),
            cheat,
            _scripted_source(),
            AttackBudget(epsilon=0.1),
            dataset="scripted",
            attacker_id="cheat",
        )
    assert info.value.ids[0] == "s000000"


def test_evaluation_does_not_depend_on_batch_size(toy_source: TensorBatchSource) -> None:
    target = build_target(TargetSpec(n_classes=3, input_size=(16, 16, 3), width=4)).eval()
    generator = build_generator(GeneratorSpec(depth=2, width=4), seed=0)
    with torch.no_grad():
        generator.head.weight.normal_(0.0, 0.5, generator=torch.Generator().manual_seed(0))
    budget = AttackBudget(epsilon=16 / 255)
    attacker = generator_attacker(generator, budget)

    reports = [
        evaluate(
            target,
            attacker,
            toy_source.with_batch_size(size),
            budget,
            dataset="toy",
            attacker_id="gen",
        )
        for size in (1, 32)
    ]

    assert reports[0].clean_accuracy == reports[1].clean_accuracy
    assert reports[0].adversarial_accuracy == reports[1].adversarial_accuracy


def test_render_single_report(tmp_path: Path) -> None:
    path = render_report([_report("toy", 80.0, 20.0)], tmp_path / "report.txt")

    lines = path.read_text().splitlines()
    assert lines[0].split() == ["target", "/", "attacker", "toy", "Average"]
    assert lines[2].split()[-2:] == ["60.00", "60.00"]


def test_render_average_over_datasets(tmp_path: Path) -> None:
    reports = [_report("a", 80.0, 20.0), _report("b", 50.0, 10.0)]

    path = render_report(reports, tmp_path / "report.txt")

    assert path.read_text().splitlines()[2].split()[-3:] == ["60.00", "40.00", "50.00"]
    twin = json.loads(path.with_suffix(".json").read_text())
    assert twin[0]["average"] == 50.0
    assert [row["dataset"] for row in twin[0]["rows"]] == ["a", "b"]


def test_render_mixed_signs(tmp_path: Path) -> None:
    reports = [
        _report("a", 70.00, 74.84),
        _report("b", 90.0, 12.5),
        _report("c", 33.33, 40.0),
        _report("a", 90.0, 30.0, target="wide-cnn"),
    ]

    path = render_report(reports, tmp_path / "report.txt")

    text = path.read_text()
    assert "-4.84" in text
    assert "-6.67" in text
    twin = json.loads(path.with_suffix(".json").read_text())
    for table in twin:
        recomputed = fmean(row["asr"] for row in table["rows"])
        assert table["average"] == pytest.approx(recomputed, abs=0.005)
    rows = text.splitlines()
    wide = next(line for line in rows if line.startswith("wide-cnn"))
    assert wide.split()[-4:] == ["60.00", "-", "-", "60.00"]


def test_render_flags_and_duplicates(tmp_path: Path) -> None:
    flagged = _report("toy", 80.0, 20.0)
    flagged.flags = ("tune-eval-overlap",)

    text = render_report([flagged], tmp_path / "r.txt").read_text()

    assert "flags: tune-eval-overlap" in text
    with pytest.raises(PreconditionError):
        render_report([flagged, flagged], tmp_path / "dup.txt")
    with pytest.raises(PreconditionError):
        render_report([], tmp_path / "empty.txt")
