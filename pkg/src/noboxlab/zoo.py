"""Surrogate and target models, and their checkpoints."""

from __future__ import annotations

import hashlib
import io
import json
import logging
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, ClassVar, Literal, Protocol

import torch
import torch.nn.functional as F
from torch import nn

from noboxlab.encoders import BaseImageEncoder, create_encoder
from noboxlab.exceptions import (
    CheckpointNotFoundError,
    CheckpointShapeError,
    DomainError,
    IntegrityError,
    PersistenceError,
    PreconditionError,
    ShapeError,
)
from noboxlab.models import ClassAnchorSet

logger = logging.getLogger(__name__)

Provenance = Literal["standard", "pgd10-robust"]


# --- specs -----------------------------------------------------------------------------------


@dataclass(frozen=True)
class EncoderSpec:
    """Which image encoder a surrogate uses."""

    kind: Literal["compact-conv", "plugin"] = "compact-conv"
    emb_dim: int = 64
    input_size: tuple[int, int, int] = (32, 32, 3)
    plugin_ref: str | None = None
    width: int = 32

    def __post_init__(self) -> None:
        if self.emb_dim < 2:
            raise DomainError(f"emb_dim must be >= 2, got {self.emb_dim}")
        if (self.kind == "plugin") != (self.plugin_ref is not None):
            raise PreconditionError("plugin_ref is required iff kind == 'plugin'")
        object.__setattr__(self, "input_size", tuple(self.input_size))

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> EncoderSpec:
        return cls(**{**data, "input_size": tuple(data["input_size"])})


@dataclass(frozen=True)
class TargetSpec:
    """Architecture of a target classifier."""

    arch: Literal["small-cnn", "wide-cnn"] = "small-cnn"
    n_classes: int = 10
    input_size: tuple[int, int, int] = (32, 32, 3)
    width: int = 32

    def __post_init__(self) -> None:
        if self.n_classes < 1:
            raise DomainError(f"n_classes must be >= 1, got {self.n_classes}")
        if self.arch not in ("small-cnn", "wide-cnn"):
            raise DomainError(f"unknown target arch {self.arch!r}")
        object.__setattr__(self, "input_size", tuple(self.input_size))

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> TargetSpec:
        return cls(**{**data, "input_size": tuple(data["input_size"])})


class Checkpointable(Protocol):
    """Models that can be rebuilt from their sidecar metadata."""

    kind: ClassVar[str]
    metadata: dict[str, Any]

    def describe(self) -> dict[str, Any]: ...

    def state_dict(self) -> dict[str, Any]: ...


# --- surrogate -------------------------------------------------------------------------------


class SupervisoryHead(nn.Module):
    """Linear head with zero bias whose rows are kept at unit norm."""

    def __init__(self, n_classes: int, emb_dim: int) -> None:
        super().__init__()
        self.weight = nn.Parameter(F.normalize(torch.randn(n_classes, emb_dim), dim=1))
        self.register_buffer("bias", torch.zeros(n_classes))

    @torch.no_grad()
    def normalize_(self) -> None:
        """Re-project every row onto the unit sphere."""
        self.weight.copy_(F.normalize(self.weight, dim=1))

    def forward(self, emb: torch.Tensor) -> torch.Tensor:
        return F.linear(emb, self.weight, self.bias)

    @property
    def n_classes(self) -> int:
        return int(self.weight.shape[0])


class SurrogateModel(nn.Module):
    """Encoder followed by a supervisory head; logits are scaled cosines."""

    kind: ClassVar[str] = "surrogate"

    def __init__(
        self,
        encoder: BaseImageEncoder,
        head: SupervisoryHead,
        spec: EncoderSpec,
        logit_scale: float = 30.0,
    ) -> None:
        super().__init__()
        if encoder.emb_dim != head.weight.shape[1]:
            raise ShapeError(
                f"encoder emits d={encoder.emb_dim}, head expects d={head.weight.shape[1]}"
            )
        self.encoder = encoder
        self.head = head
        self.spec = spec
        self.register_buffer("logit_scale", torch.tensor(float(logit_scale)))
        self.metadata: dict[str, Any] = {}

    @property
    def n_classes(self) -> int:
        return self.head.n_classes

    @property
    def input_size(self) -> tuple[int, int, int]:
        return self.spec.input_size

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        """Unit-norm embeddings of a pixel batch."""
        return F.normalize(self.encoder(x), dim=1)

    def forward_features(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        emb = self.embed(x)
        return emb, self.logit_scale * self.head(emb)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward_features(x)[1]

    @torch.no_grad()
    def load_anchors(self, anchors: ClassAnchorSet) -> None:
        """Initialise head rows from class anchors (zero-shot style head)."""
        if tuple(anchors.anchors.shape) != tuple(self.head.weight.shape):
            raise ShapeError(
                f"anchors {tuple(anchors.anchors.shape)} do not fit head "
                f"{tuple(self.head.weight.shape)}"
            )
        self.head.weight.copy_(anchors.anchors.to(self.head.weight.dtype))

    def set_encoder_trainable(self, trainable: bool) -> None:
        for param in self.encoder.parameters():
            param.requires_grad_(trainable)

    def describe(self) -> dict[str, Any]:
        return {"spec": self.spec.to_dict(), "n_classes": self.n_classes}

    @classmethod
    def rebuild(cls, meta: dict[str, Any]) -> SurrogateModel:
        return build_surrogate(EncoderSpec.from_dict(meta["spec"]), meta["n_classes"])


def build_surrogate(
    spec: EncoderSpec,
    n_classes: int,
    seed: int = 0,
    logit_scale: float = 30.0,
) -> SurrogateModel:
    """Build encoder + unit-row head, initialised from `seed` without touching global RNG."""
    if n_classes < 1:
        raise DomainError(f"n_classes must be >= 1, got {n_classes}")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        encoder = create_encoder(spec)
        head = SupervisoryHead(n_classes, spec.emb_dim)
    model = SurrogateModel(encoder, head, spec, logit_scale=logit_scale)
    model.metadata["seed"] = seed
    return model


# --- targets ---------------------------------------------------------------------------------


def _conv_bn(in_c: int, out_c: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_c, out_c, 3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(out_c),
        nn.ReLU(inplace=True),
    )


class _ResidualBlock(nn.Module):
    def __init__(self, in_c: int, out_c: int, stride: int) -> None:
        super().__init__()
        self.body = nn.Sequential(
            _conv_bn(in_c, out_c, stride),
            nn.Conv2d(out_c, out_c, 3, padding=1, bias=False),
            nn.BatchNorm2d(out_c),
        )
        self.skip: nn.Module = nn.Identity()
        if stride != 1 or in_c != out_c:
            self.skip = nn.Sequential(
                nn.Conv2d(in_c, out_c, 1, stride=stride, bias=False), nn.BatchNorm2d(out_c)
            )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.relu(self.body(x) + self.skip(x))


def _small_cnn(spec: TargetSpec) -> nn.Module:
    w, c = spec.width, spec.input_size[2]
    return nn.Sequential(
        _conv_bn(c, w),
        nn.MaxPool2d(2),
        _conv_bn(w, 2 * w),
        nn.MaxPool2d(2),
        _conv_bn(2 * w, 4 * w),
        nn.AdaptiveAvgPool2d(2),
        nn.Flatten(),
        nn.Linear(16 * w, 128),
        nn.ReLU(inplace=True),
        nn.Linear(128, spec.n_classes),
    )


def _wide_cnn(spec: TargetSpec) -> nn.Module:
    w, c = spec.width * 2, spec.input_size[2]
    return nn.Sequential(
        _conv_bn(c, w),
        _ResidualBlock(w, w, 1),
        _ResidualBlock(w, 2 * w, 2),
        _ResidualBlock(2 * w, 2 * w, 2),
        nn.AdaptiveAvgPool2d(1),
        nn.Flatten(),
        nn.Linear(2 * w, spec.n_classes),
    )


class TargetModel(nn.Module):
    """A classifier the attacker never sees; maps pixels to logits."""

    kind: ClassVar[str] = "target"

    def __init__(self, spec: TargetSpec, provenance: Provenance = "standard") -> None:
        super().__init__()
        self.spec = spec
        self.provenance = provenance
        self.net = _small_cnn(spec) if spec.arch == "small-cnn" else _wide_cnn(spec)
        self.register_buffer("mean", torch.full((1, spec.input_size[2], 1, 1), 0.5))
        self.register_buffer("std", torch.full((1, spec.input_size[2], 1, 1), 0.25))
        self.metadata: dict[str, Any] = {}

    @property
    def n_classes(self) -> int:
        return self.spec.n_classes

    @property
    def input_size(self) -> tuple[int, int, int]:
        return self.spec.input_size

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w, c = self.input_size
        if tuple(x.shape[1:]) != (c, h, w):
            raise ShapeError(f"target expects (B, {c}, {h}, {w}), got {tuple(x.shape)}")
        return self.net((x - self.mean) / self.std)

    def describe(self) -> dict[str, Any]:
        return {"spec": self.spec.to_dict(), "provenance": self.provenance}

    @classmethod
    def rebuild(cls, meta: dict[str, Any]) -> TargetModel:
        return cls(TargetSpec.from_dict(meta["spec"]), provenance=meta["provenance"])


def build_target(
    spec: TargetSpec, seed: int = 0, provenance: Provenance = "standard"
) -> TargetModel:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = TargetModel(spec, provenance=provenance)
    model.metadata["seed"] = seed
    return model


# --- checkpoints -----------------------------------------------------------------------------


def parameter_digest(model: nn.Module) -> str:
    """SHA-256 over the sorted state dict (names, dtypes, shapes and raw bytes)."""
    digest = hashlib.sha256()
    state = model.state_dict()
    for name in sorted(state):
        tensor = state[name].detach().cpu().contiguous()
        digest.update(name.encode("utf-8"))
        digest.update(str(tensor.dtype).encode("ascii"))
        digest.update(str(tuple(tensor.shape)).encode("ascii"))
        digest.update(tensor.numpy().tobytes() if tensor.numel() else b"")
    return digest.hexdigest()


def _paths(path: str | Path) -> tuple[Path, Path]:
    path = Path(path)
    blob = path if path.suffix == ".pt" else path.with_suffix(".pt")
    return blob, blob.with_suffix(".json")


def persist_checkpoint(
    model: Checkpointable,
    path: str | Path,
    *,
    epoch: int | None = None,
    config_hash: str | None = None,
    extra: dict[str, Any] | None = None,
) -> Path:
    """Write `<stem>.pt` (state dict) and `<stem>.json` (spec, seed, epoch, hashes)."""
    blob_path, meta_path = _paths(path)
    buffer = io.BytesIO()
    torch.save(model.state_dict(), buffer)
    blob = buffer.getvalue()

    meta = {
        "kind": model.kind,
        **model.describe(),
        "seed": model.metadata.get("seed"),
        "epoch": epoch if epoch is not None else model.metadata.get("epoch"),
        "config_hash": config_hash or model.metadata.get("config_hash"),
        "digest": parameter_digest(model),  # type: ignore[arg-type]
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
        "extra": {**model.metadata.get("extra", {}), **(extra or {})},
    }
    try:
        blob_path.parent.mkdir(parents=True, exist_ok=True)
        _atomic_write(blob_path, blob)
        _atomic_write(meta_path, (json.dumps(meta, indent=2, sort_keys=True) + "\n").encode())
    except OSError as exc:
        raise PersistenceError(f"cannot write checkpoint {blob_path}: {exc}") from exc
    logger.info("saved %s checkpoint %s", model.kind, blob_path)
    return blob_path


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def read_checkpoint_meta(path: str | Path) -> dict[str, Any]:
    """Read a checkpoint sidecar without loading parameters."""
    _, meta_path = _paths(path)
    if not meta_path.exists():
        raise CheckpointNotFoundError(f"checkpoint metadata {meta_path} not found")
    try:
        meta: dict[str, Any] = json.loads(meta_path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise IntegrityError(f"corrupt checkpoint metadata {meta_path}: {exc}") from exc
    return meta


def _check_expected(meta: dict[str, Any], expected: Any) -> None:
    wanted = expected.to_dict()
    found = meta.get("spec", {})
    diffs = [
        f"{key}: checkpoint {found.get(key)!r} vs expected {value!r}"
        for key, value in wanted.items()
        if _normal(found.get(key)) != _normal(value)
    ]
    if diffs:
        raise CheckpointShapeError("incompatible checkpoint spec (" + "; ".join(diffs) + ")")


def _normal(value: Any) -> Any:
    return list(value) if isinstance(value, tuple) else value


def _builder(kind: str) -> Any:
    if kind == SurrogateModel.kind:
        return SurrogateModel
    if kind == TargetModel.kind:
        return TargetModel
    if kind == "generator":
        from noboxlab.generator import GeneratorModel

        return GeneratorModel
    raise IntegrityError(f"unknown checkpoint kind {kind!r}")


def restore_checkpoint(path: str | Path, expected: Any | None = None) -> Any:
    """Load a checkpoint written by persist_checkpoint and verify its integrity.

    `expected` is an EncoderSpec, TargetSpec or GeneratorSpec the checkpoint must match.
    """
    blob_path, _ = _paths(path)
    if not blob_path.exists():
        raise CheckpointNotFoundError(f"checkpoint {blob_path} not found")
    meta = read_checkpoint_meta(blob_path)

    blob = blob_path.read_bytes()
    if hashlib.sha256(blob).hexdigest() != meta.get("blob_sha256"):
        raise IntegrityError(f"checkpoint {blob_path} does not match its recorded digest")
    if expected is not None:
        _check_expected(meta, expected)

    try:
        state = torch.load(io.BytesIO(blob), map_location="cpu", weights_only=True)
    except Exception as exc:
        raise IntegrityError(f"cannot decode checkpoint {blob_path}: {exc}") from exc

    model = _builder(meta["kind"]).rebuild(meta)
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise CheckpointShapeError(f"checkpoint {blob_path} does not fit its spec: {exc}") from exc
    if parameter_digest(model) != meta["digest"]:
        raise IntegrityError(f"parameters of {blob_path} do not match the recorded digest")

    model.metadata.update(
        {
            "seed": meta.get("seed"),
            "epoch": meta.get("epoch"),
            "config_hash": meta.get("config_hash"),
            "extra": meta.get("extra", {}),
            "checkpoint": str(blob_path),
        }
    )
    model.eval()
    return model
