"""Shared fixtures: tiny toy datasets and models that train in well under a second."""

from __future__ import annotations

from pathlib import Path

import pytest
import torch

from noboxlab.data import TensorBatchSource
from noboxlab.synth import toy_tensors, write_toy_dataset
from noboxlab.zoo import EncoderSpec, SurrogateModel, build_surrogate

TINY_SIZE = 16
TINY_CLASSES = 3


@pytest.fixture
def toy_source() -> TensorBatchSource:
    pixels, labels = toy_tensors(n_classes=TINY_CLASSES, per_class=4, size=TINY_SIZE, seed=1)
    return TensorBatchSource(pixels, labels, batch_size=6, seed=0)


@pytest.fixture
def tiny_encoder_spec() -> EncoderSpec:
    return EncoderSpec(emb_dim=8, input_size=(TINY_SIZE, TINY_SIZE, 3), width=4)


@pytest.fixture
def tiny_surrogate(tiny_encoder_spec: EncoderSpec) -> SurrogateModel:
    return build_surrogate(tiny_encoder_spec, TINY_CLASSES, seed=0)


@pytest.fixture(scope="session")
def toy_dataset(tmp_path_factory: pytest.TempPathFactory) -> tuple[Path, Path]:
    """(manifest, assignment) of a 3-class, 6-per-class toy dataset on disk."""
    root = tmp_path_factory.mktemp("toy")
    return write_toy_dataset(
        root, name="toy3", n_classes=TINY_CLASSES, per_class=6, size=TINY_SIZE, seed=0
    )


@pytest.fixture
def tiny_config(tmp_path: Path, toy_dataset: tuple[Path, Path]) -> Path:
    """Config file for a full pipeline run that finishes in seconds on a CPU."""
    manifest, assignment = toy_dataset
    path = tmp_path / "tiny.cfg"
    path.write_text(
        "\n".join(
            [
                "# tiny end-to-end run",
                "seed=0",
                f"data.manifest={manifest}",
                f"data.assignment={assignment}",
                "data.workers=0",
                "encoder.emb_dim=8",
                "encoder.width=4",
                "finetune.epochs=1",
                "finetune.batch_size=6",
                "finetune.lr_init=0.05",
                "generator.epochs=1",
                "generator.batch_size=6",
                "generator.depth=2",
                "generator.width=4",
                "generator.res_blocks=0",
                "target.epochs=1",
                "target.batch_size=6",
                "target.width=4",
                "budget.epsilon=16/255",
                f"output.root={tmp_path / 'runs'}",
            ]
        )
        + "\n",
        encoding="utf-8",
    )
    return path


@pytest.fixture(autouse=True)
def _single_thread() -> None:
    torch.set_num_threads(1)
