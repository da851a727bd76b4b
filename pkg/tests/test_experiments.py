"""Desk-scale directional experiments on a 10-class toy dataset (`pytest -m slow`)."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from statistics import fmean
from typing import Any

import pytest

from noboxlab.config import RunSettings, load_config
from noboxlab.lab import run_pipeline
from noboxlab.models import RunManifest
from noboxlab.synth import write_toy_dataset

pytestmark = pytest.mark.slow

SEEDS = (0, 1, 2)

SETTINGS = [
    "data.workers=0",
    "encoder.emb_dim=32",
    "encoder.width=16",
    "finetune.epochs=20",
    "finetune.batch_size=32",
    "finetune.lr_init=0.05",
    "generator.epochs=10",
    "generator.batch_size=32",
    "generator.lr_init=1e-3",
    "generator.width=16",
    "target.epochs=10",
    "target.batch_size=32",
    "target.width=16",
    "target.robust=true",
    "budget.epsilon=16/255",
    "compare.variants=plain,margin",
]

Result = tuple[RunManifest, list[dict[str, Any]]]


@pytest.fixture(scope="module")
def toy10(tmp_path_factory: pytest.TempPathFactory) -> tuple[Path, Path]:
    root = tmp_path_factory.mktemp("toy10")
    return write_toy_dataset(root, n_classes=10, per_class=40, size=32, seed=0)


def _settings(toy10: tuple[Path, Path], seed: int, output: Path) -> RunSettings:
    manifest, assignment = toy10
    overrides = [f"data.manifest={manifest}", f"data.assignment={assignment}", *SETTINGS]
    return load_config(overrides=[*overrides, f"output.root={output}"], seed=seed)


def _run(settings: RunSettings) -> Result:
    manifest = run_pipeline(settings, "compare-surrogates")
    return manifest, json.loads(Path(manifest.artifacts["report-json"][0]).read_text())


@pytest.fixture(scope="module")
def runs(
    toy10: tuple[Path, Path], tmp_path_factory: pytest.TempPathFactory
) -> dict[int, Result]:
    output = tmp_path_factory.mktemp("runs")
    return {seed: _run(_settings(toy10, seed, output)) for seed in SEEDS}


def _asr(report: list[dict[str, Any]], target: str, attacker: str) -> float:
    table = next(t for t in report if t["target"] == target and t["attacker"] == attacker)
    return float(table["average"])


def _mean_asr(runs: dict[int, Result], target: str, attacker: str) -> float:
    return fmean(_asr(report, target, attacker) for _, report in runs.values())


def test_margin_surrogate_transfers_at_least_as_well(runs: dict[int, Result]) -> None:
    margin = _mean_asr(runs, "target-standard", "generator[margin]")
    plain = _mean_asr(runs, "target-standard", "generator[plain]")

    assert margin >= plain


def test_margin_finetuning_widens_the_minimum_margin(runs: dict[int, Result]) -> None:
    for seed, (manifest, _) in runs.items():
        trace = next(p for p in manifest.artifacts["trace"] if "surrogate-margin" in p)
        with open(trace, newline="") as handle:
            rows = list(csv.DictReader(handle))

        assert float(rows[-1]["min_margin"]) > float(rows[0]["min_margin"]), seed


def test_robust_target_is_harder_to_fool(runs: dict[int, Result]) -> None:
    standard = _mean_asr(runs, "target-standard", "generator[margin]")
    robust = _mean_asr(runs, "target-robust", "generator[margin]")

    assert robust < standard


def test_reruns_are_byte_identical(
    runs: dict[int, Result],
    toy10: tuple[Path, Path],
    tmp_path_factory: pytest.TempPathFactory,
) -> None:
    first, report = runs[SEEDS[0]]

    again, rerun = _run(_settings(toy10, SEEDS[0], tmp_path_factory.mktemp("rerun")))

    assert [Path(p).read_bytes() for p in again.artifacts["trace"]] == [
        Path(p).read_bytes() for p in first.artifacts["trace"]
    ]
    assert [t["rows"][0]["asr"] for t in rerun] == [t["rows"][0]["asr"] for t in report]
