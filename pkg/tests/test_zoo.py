"""Encoders, surrogate and target models, and checkpoint persistence."""

from __future__ import annotations

import json
from pathlib import Path
from unittest.mock import MagicMock, patch

import pytest
import torch
from torch import nn

from noboxlab.encoders import PluginEncoder, create_encoder
from noboxlab.exceptions import (
    CheckpointNotFoundError,
    CheckpointShapeError,
    ConstructionError,
    IntegrityError,
    PreconditionError,
    ShapeError,
)
from noboxlab.generator import GeneratorSpec, build_generator
from noboxlab.models import ClassAnchorSet
from noboxlab.zoo import (
    EncoderSpec,
    SurrogateModel,
    TargetSpec,
    build_surrogate,
    build_target,
    parameter_digest,
    persist_checkpoint,
    read_checkpoint_meta,
    restore_checkpoint,
)


def test_surrogate_shapes() -> None:
    model = build_surrogate(EncoderSpec(emb_dim=64), n_classes=10).eval()
    x = torch.rand(2, 3, 32, 32)

    emb, logits = model.forward_features(x)

    assert emb.shape == (2, 64)
    assert logits.shape == (2, 10)
    torch.testing.assert_close(emb.norm(dim=1), torch.ones(2))


def test_single_class_surrogate() -> None:
    model = build_surrogate(EncoderSpec(emb_dim=4, width=4), n_classes=1).eval()

    assert model(torch.rand(3, 3, 32, 32)).shape == (3, 1)


def test_same_seed_builds_identical_models() -> None:
    spec = EncoderSpec(emb_dim=8, width=4)

    first = parameter_digest(build_surrogate(spec, 3, seed=5))
    second = parameter_digest(build_surrogate(spec, 3, seed=5))
    other = parameter_digest(build_surrogate(spec, 3, seed=6))

    assert first == second
    assert first != other


def test_encoder_rejects_wrong_input_size(tiny_surrogate: SurrogateModel) -> None:
    with pytest.raises(ShapeError):
        tiny_surrogate(torch.rand(1, 3, 32, 32))


def test_encoder_spec_validation() -> None:
    with pytest.raises(PreconditionError):
        EncoderSpec(kind="plugin")
    with pytest.raises(PreconditionError):
        EncoderSpec(plugin_ref="tower.pt")


def test_load_anchors(tiny_surrogate: SurrogateModel) -> None:
    anchors = ClassAnchorSet(torch.eye(3, 8), provider="explicit")

    tiny_surrogate.load_anchors(anchors)

    assert torch.equal(tiny_surrogate.head.weight.detach(), torch.eye(3, 8))
    with pytest.raises(ShapeError):
        tiny_surrogate.load_anchors(ClassAnchorSet(torch.eye(2, 8), provider="explicit"))


@pytest.mark.parametrize("arch", ["small-cnn", "wide-cnn"])
def test_target_shapes(arch: str) -> None:
    model = build_target(TargetSpec(arch=arch, n_classes=10, width=8)).eval()

    assert model(torch.rand(2, 3, 32, 32)).shape == (2, 10)
    assert model.provenance == "standard"
    with pytest.raises(ShapeError):
        model(torch.rand(2, 3, 16, 16))


def _scripted_tower(path: Path, out_dim: int) -> Path:
    tower = torch.jit.script(nn.Sequential(nn.Flatten(), nn.Linear(3 * 16 * 16, out_dim)))
    torch.jit.save(tower, str(path))
    return path


def test_plugin_encoder(tmp_path: Path) -> None:
    ref = _scripted_tower(tmp_path / "tower.pt", 8)
    spec = EncoderSpec(kind="plugin", plugin_ref=str(ref), emb_dim=8, input_size=(16, 16, 3))

    encoder = create_encoder(spec)

    assert isinstance(encoder, PluginEncoder)
    assert encoder(torch.rand(2, 3, 16, 16)).shape == (2, 8)


def test_plugin_encoder_with_wrong_width(tmp_path: Path) -> None:
    ref = _scripted_tower(tmp_path / "tower.pt", 5)

    with pytest.raises(ConstructionError, match="expected"):
        PluginEncoder(str(ref), 8, (16, 16, 3))


def test_missing_plugin(tmp_path: Path) -> None:
    with pytest.raises(ConstructionError, match="not found"):
        PluginEncoder(str(tmp_path / "absent.pt"), 8, (16, 16, 3))


def test_plugin_is_downloaded_once(tmp_path: Path) -> None:
    blob = _scripted_tower(tmp_path / "tower.pt", 8).read_bytes()
    response = MagicMock(content=blob)
    cache = tmp_path / "cache"

    with patch("noboxlab.encoders.plugin.httpx.get", return_value=response) as get:
        PluginEncoder("https://models.example/tower.pt", 8, (16, 16, 3), cache_dir=cache)
        PluginEncoder("https://models.example/tower.pt", 8, (16, 16, 3), cache_dir=cache)

    get.assert_called_once()
    assert len(list(cache.glob("*.pt"))) == 1


def test_surrogate_checkpoint_round_trip(tiny_surrogate: SurrogateModel, tmp_path: Path) -> None:
    tiny_surrogate.eval()
    x = torch.rand(4, 3, 16, 16)

    path = persist_checkpoint(tiny_surrogate, tmp_path / "surrogate", epoch=3, config_hash="cfg")
    restored = restore_checkpoint(path)

    assert path.name == "surrogate.pt"
    assert isinstance(restored, SurrogateModel)
    assert torch.equal(restored(x), tiny_surrogate(x))
    assert restored.metadata["epoch"] == 3
    assert restored.metadata["config_hash"] == "cfg"
    assert parameter_digest(restored) == parameter_digest(tiny_surrogate)


def test_saving_twice_records_the_same_digest(
    tiny_surrogate: SurrogateModel, tmp_path: Path
) -> None:
    first = read_checkpoint_meta(persist_checkpoint(tiny_surrogate, tmp_path / "a.pt"))
    second = read_checkpoint_meta(persist_checkpoint(tiny_surrogate, tmp_path / "b.pt"))

    assert first["digest"] == second["digest"]
    assert first["kind"] == "surrogate"


def test_target_and_generator_checkpoints(tmp_path: Path) -> None:
    target = build_target(TargetSpec(n_classes=3, input_size=(16, 16, 3), width=4))
    target.provenance = "pgd10-robust"
    generator = build_generator(GeneratorSpec(depth=2, width=4))

    restored_target = restore_checkpoint(persist_checkpoint(target, tmp_path / "t.pt"))
    restored_gen = restore_checkpoint(
        persist_checkpoint(generator, tmp_path / "g.pt"), expected=GeneratorSpec(depth=2, width=4)
    )

    assert restored_target.provenance == "pgd10-robust"
    assert restored_target.spec == target.spec
    assert parameter_digest(restored_gen) == parameter_digest(generator)


def test_corrupted_checkpoint(tiny_surrogate: SurrogateModel, tmp_path: Path) -> None:
    path = persist_checkpoint(tiny_surrogate, tmp_path / "s.pt")
    blob = bytearray(path.read_bytes())
    blob[len(blob) // 2] ^= 0xFF
    path.write_bytes(bytes(blob))

    with pytest.raises(IntegrityError):
        restore_checkpoint(path)


def test_tampered_sidecar(tiny_surrogate: SurrogateModel, tmp_path: Path) -> None:
    path = persist_checkpoint(tiny_surrogate, tmp_path / "s.pt")
    meta_path = path.with_suffix(".json")
    meta = json.loads(meta_path.read_text())
    meta["digest"] = "0" * 64
    meta_path.write_text(json.dumps(meta))

    with pytest.raises(IntegrityError):
        restore_checkpoint(path)


def test_missing_checkpoint(tmp_path: Path) -> None:
    with pytest.raises(CheckpointNotFoundError):
        restore_checkpoint(tmp_path / "nothing.pt")


def test_checkpoint_with_other_embedding_width(tmp_path: Path) -> None:
    model = build_surrogate(EncoderSpec(emb_dim=32, width=4), n_classes=3)
    path = persist_checkpoint(model, tmp_path / "s.pt")

    with pytest.raises(CheckpointShapeError, match="emb_dim: checkpoint 32 vs expected 64"):
        restore_checkpoint(path, expected=EncoderSpec(emb_dim=64, width=4))
