"""Accuracy, attack success rate and report tables."""

from __future__ import annotations

import json
import logging
import os
import time
from collections.abc import Callable, Sequence
from pathlib import Path
from statistics import fmean
from typing import Any

import torch
from torch import nn

from noboxlab.attacks import Attacker
from noboxlab.exceptions import DomainError, PersistenceError, PreconditionError, ShapeError
from noboxlab.generator import GeneratorModel, craft_adversarial
from noboxlab.margin import BatchSource
from noboxlab.models import (
    AdversarialBatch,
    AttackBudget,
    EvaluationReport,
    ImageBatch,
    LabelVector,
)
from noboxlab.training import evaluating, model_device

logger = logging.getLogger(__name__)

Classifier = nn.Module | Callable[[torch.Tensor], torch.Tensor]


@torch.no_grad()
def classify(model: Classifier, batch: ImageBatch) -> LabelVector:
    """Arg-max class per sample; ties resolve to the lowest class index."""
    input_size = getattr(model, "input_size", None)
    if input_size is not None and batch.spatial_size != tuple(input_size):
        raise ShapeError(f"model expects {tuple(input_size)}, batch is {batch.spatial_size}")
    if isinstance(model, nn.Module):
        with evaluating(model):
            logits = model(batch.pixels.to(model_device(model)))
    else:
        logits = model(batch.pixels)
    if logits.dim() != 2 or logits.shape[0] != len(batch):
        raise ShapeError(f"expected ({len(batch)}, n_classes) logits, got {tuple(logits.shape)}")
    return LabelVector(torch.argmax(logits, dim=1).cpu())


def attack_success_rate(clean_acc: float, adv_acc: float) -> float:
    """clean - adversarial accuracy, in percent; negative when the attack helps the target."""
    for name, value in (("clean_acc", clean_acc), ("adv_acc", adv_acc)):
        if not 0.0 <= value <= 100.0:
            raise DomainError(f"{name} must lie in [0, 100], got {value}")
    return clean_acc - adv_acc


def identity_attacker(batch: ImageBatch, labels: LabelVector) -> ImageBatch:
    return batch


def generator_attacker(generator: GeneratorModel, budget: AttackBudget) -> Attacker:
    def attack(batch: ImageBatch, labels: LabelVector) -> AdversarialBatch:
        return craft_adversarial(generator, batch, budget)

    return attack


def _verified(
    clean: ImageBatch, crafted: ImageBatch | AdversarialBatch, budget: AttackBudget
) -> AdversarialBatch:
    adversarial = crafted.adversarial if isinstance(crafted, AdversarialBatch) else crafted
    if adversarial.ids != clean.ids:
        raise ShapeError("attacker returned samples that do not match the clean batch")
    pixels = adversarial.pixels.to(clean.pixels.device)
    return AdversarialBatch.from_pair(clean, pixels, budget.epsilon)


def evaluate(
    target: Classifier,
    attacker: Attacker,
    data: BatchSource,
    budget: AttackBudget,
    *,
    dataset: str,
    attacker_id: str,
    target_id: str | None = None,
    seed: int = 0,
    flags: Sequence[str] = (),
) -> EvaluationReport:
    """Clean and adversarial accuracy of `target` over the same samples, in the same order.

    Every crafted batch is re-checked against the budget; a violation aborts the evaluation.
    """
    clean_correct = adversarial_correct = n_samples = 0
    craft_seconds = 0.0
    for batch, labels in data.batches(0):
        if len(labels) != len(batch):
            raise ShapeError(f"{len(labels)} labels for a batch of {len(batch)}")
        y = labels.labels
        clean_correct += int((classify(target, batch).labels == y).sum())

        started = time.perf_counter()
        crafted = attacker(batch, labels)
        craft_seconds += time.perf_counter() - started
        adversarial = _verified(batch, crafted, budget)

        adversarial_correct += int((classify(target, adversarial.adversarial).labels == y).sum())
        n_samples += len(batch)

    if n_samples == 0:
        raise PreconditionError(f"no samples to evaluate on {dataset}")

    report = EvaluationReport.from_counts(
        clean_correct=clean_correct,
        adversarial_correct=adversarial_correct,
        n_samples=n_samples,
        dataset=dataset,
        target_id=target_id or _target_name(target),
        provenance=getattr(target, "provenance", "standard"),
        attacker_id=attacker_id,
        epsilon=budget.epsilon,
        seed=seed,
        flags=tuple(flags),
        craft_seconds=craft_seconds,
    )
    logger.info(
        "%s on %s [%s]: clean=%.2f adv=%.2f asr=%.2f (n=%d)",
        attacker_id,
        report.target_id,
        dataset,
        report.clean_accuracy,
        report.adversarial_accuracy,
        report.asr,
        n_samples,
    )
    return report


def _target_name(target: Classifier) -> str:
    spec = getattr(target, "spec", None)
    return str(getattr(spec, "arch", None) or type(target).__name__)


def _row_label(report: EvaluationReport) -> str:
    return f"{report.target_id} ({report.provenance}) / {report.attacker_id}"


def _group(
    reports: Sequence[EvaluationReport],
) -> tuple[list[str], dict[str, dict[str, EvaluationReport]]]:
    datasets: list[str] = []
    rows: dict[str, dict[str, EvaluationReport]] = {}
    for report in reports:
        if report.dataset not in datasets:
            datasets.append(report.dataset)
        cells = rows.setdefault(_row_label(report), {})
        if report.dataset in cells:
            raise PreconditionError(
                f"duplicate report for {_row_label(report)} on {report.dataset}"
            )
        cells[report.dataset] = report
    return datasets, rows


def render_report(reports: Sequence[EvaluationReport], path: str | Path) -> Path:
    """Write an ASR table (targets by datasets, plus Average) and its JSON twin."""
    if not reports:
        raise PreconditionError("render_report needs at least one report")
    path = Path(path)
    datasets, rows = _group(reports)

    header = ["target / attacker", *datasets, "Average"]
    table = [header]
    tables: list[dict[str, Any]] = []
    for label, cells in rows.items():
        average = fmean(round(r.asr, 2) for r in cells.values())
        table.append(
            [
                label,
                *(f"{cells[d].asr:.2f}" if d in cells else "-" for d in datasets),
                f"{average:.2f}",
            ]
        )
        first = next(iter(cells.values()))
        tables.append(
            {
                "target": first.target_id,
                "provenance": first.provenance,
                "attacker": first.attacker_id,
                "rows": [
                    {
                        "dataset": r.dataset,
                        "clean": r.clean_accuracy,
                        "adv": r.adversarial_accuracy,
                        "asr": r.asr,
                        "n_samples": r.n_samples,
                        "epsilon": r.epsilon,
                        "seed": r.seed,
                        "flags": list(r.flags),
                        "craft_seconds": r.craft_seconds,
                    }
                    for r in cells.values()
                ],
                "average": average,
            }
        )

    widths = [max(len(row[i]) for row in table) for i in range(len(header))]
    lines = [
        "  ".join(
            cell.ljust(widths[i]) if i == 0 else cell.rjust(widths[i])
            for i, cell in enumerate(row)
        ).rstrip()
        for row in table
    ]
    lines.insert(1, "  ".join("-" * w for w in widths))
    flags = sorted({flag for r in reports for flag in r.flags})
    if flags:
        lines.append("")
        lines.append("flags: " + ", ".join(flags))

    json_path = path.with_suffix(".json")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        _write_text(path, "\n".join(lines) + "\n")
        _write_text(json_path, json.dumps(tables, indent=2) + "\n")
    except OSError as exc:
        raise PersistenceError(f"cannot write report {path}: {exc}") from exc
    logger.info("wrote report %s", path)
    return path


def _write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)
