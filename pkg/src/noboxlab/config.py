"""Configuration module for noboxlab."""

from __future__ import annotations

import hashlib
import json
import math
import os
import re
from collections.abc import Iterable, Sequence
from fractions import Fraction
from pathlib import Path
from typing import Annotated, Any, Literal, TypedDict

from pydantic import (
    BaseModel,
    BeforeValidator,
    ConfigDict,
    Field,
    ValidationError,
    field_validator,
    model_validator,
)

from noboxlab.exceptions import ConfigError
from noboxlab.models import AttackBudget, MarginConfig, PgdConfig, TrainSchedule

OUTPUT_ROOT_ENV = "NOBOXLAB_OUTPUT_ROOT"

_FRACTION = re.compile(r"^\s*-?\d+(\.\d*)?\s*/\s*\d+(\.\d*)?\s*$")


def _number(value: Any) -> Any:
    """Accept `16/255` style fractions wherever a float is expected."""
    if isinstance(value, str) and _FRACTION.match(value):
        num, den = (Fraction(part.strip()) for part in value.split("/"))
        return float(num / den)
    return value


def _comma_list(value: Any) -> Any:
    if isinstance(value, str):
        return [part.strip() for part in value.split(",") if part.strip()]
    return value


Num = Annotated[float, BeforeValidator(_number)]
NumList = Annotated[list[Num], BeforeValidator(_comma_list)]
StrList = Annotated[list[str], BeforeValidator(_comma_list)]
PathList = Annotated[list[Path], BeforeValidator(_comma_list)]


# Raw configuration layout, as produced by parse_config_text
class DataConfigDict(TypedDict, total=False):
    """Dataset inputs."""

    manifest: str
    assignment: str
    workers: str


class BudgetConfigDict(TypedDict, total=False):
    """Attack budget."""

    epsilon: str  # e.g. '16/255'
    bound_mode: str  # 'tanh-scale' or 'hard-clip'


class ScheduleConfigDict(TypedDict, total=False):
    """Optimizer keys shared by every training section."""

    optimizer: str
    lr_init: str
    lr_min: str
    batch_size: str
    epochs: str
    anneal: str
    momentum: str
    weight_decay: str


class RunConfigDict(TypedDict, total=False):
    """Configuration dictionary for a run; every leaf is the raw string from the file."""

    seed: str
    data: DataConfigDict
    roles: dict[str, str]
    encoder: dict[str, str]
    anchors: dict[str, str]
    margin: dict[str, str]
    finetune: ScheduleConfigDict
    generator: dict[str, str]
    budget: BudgetConfigDict
    pgd: dict[str, str]
    target: dict[str, str]
    surrogate: dict[str, str]
    ablation: dict[str, str]
    compare: dict[str, str]
    synth: dict[str, str]
    output: dict[str, str]
    runtime: dict[str, str]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DataSettings(_Section):
    """Dataset manifest and split assignment."""

    manifest: Path | None = None
    assignment: Path | None = None
    workers: int = Field(default=0, ge=0)


class RoleSettings(_Section):
    """Names of the split roles a run reads."""

    tune: str = "test"
    eval: str = "test"
    target_train: str = "target-train"


class EncoderSettings(_Section):
    kind: Literal["compact-conv", "plugin"] = "compact-conv"
    emb_dim: int = Field(default=64, ge=2)
    width: int = Field(default=32, ge=1)
    plugin_ref: str | None = None
    freeze: bool = False


class AnchorSettings(_Section):
    """Where class anchors come from; text anchors use a remote embedding service."""

    provider: Literal["head-weights", "explicit", "text-embedding"] = "head-weights"
    path: Path | None = None
    class_names: StrList = Field(default_factory=list)
    template: str = "a photo of a {}."
    service: Literal["openai", "bedrock"] = "openai"
    model: str | None = None
    api_key: str | None = None
    base_url: str | None = None
    region: str = "us-east-1"
    aws_access_key_id: str | None = None
    aws_secret_access_key: str | None = None
    aws_session_token: str | None = None
    seed: int = 0


class MarginSettings(_Section):
    m: Num = Field(default=0.15, ge=0.0, lt=math.pi / 2)
    s: Num = Field(default=30.0, gt=0.0)
    numeric_eps: Num = Field(default=1e-7, ge=0.0, lt=0.5)

    def to_config(self) -> MarginConfig:
        return MarginConfig(m=self.m, s=self.s, numeric_eps=self.numeric_eps)


class ScheduleSettings(_Section):
    optimizer: Literal["sgd", "adamw"] = "sgd"
    lr_init: Num = Field(default=0.01, ge=0.0)
    lr_min: Num = Field(default=0.0, ge=0.0)
    batch_size: int = Field(default=128, ge=1)
    epochs: int = Field(default=300, ge=0)
    anneal: bool = True
    momentum: Num = Field(default=0.9, ge=0.0)
    weight_decay: Num = Field(default=5e-4, ge=0.0)

    @model_validator(mode="after")
    def _lr_floor_below_start(self) -> ScheduleSettings:
        if self.lr_min > self.lr_init:
            raise ValueError(f"lr_min ({self.lr_min}) must not exceed lr_init ({self.lr_init})")
        return self

    def to_schedule(self, seed: int) -> TrainSchedule:
        return TrainSchedule(
            optimizer=self.optimizer,
            lr_init=self.lr_init,
            lr_min=self.lr_min,
            batch_size=self.batch_size,
            epochs=self.epochs,
            anneal=self.anneal,
            seed=seed,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
        )


class GeneratorSettings(ScheduleSettings):
    """Generator architecture, checkpoint and training schedule."""

    optimizer: Literal["sgd", "adamw"] = "adamw"
    lr_init: Num = Field(default=1e-4, ge=0.0)
    batch_size: int = Field(default=64, ge=1)
    epochs: int = Field(default=90, ge=0)
    weight_decay: Num = Field(default=1e-2, ge=0.0)
    depth: int = Field(default=3, ge=1)
    width: int = Field(default=32, ge=1)
    res_blocks: int = Field(default=1, ge=0)
    checkpoint: Path | None = None


class BudgetSettings(_Section):
    epsilon: Num | None = Field(default=None, ge=0.0, le=1.0)
    bound_mode: Literal["tanh-scale", "hard-clip"] = "tanh-scale"

    def to_budget(self) -> AttackBudget:
        if self.epsilon is None:
            raise ConfigError("budget.epsilon", "required")
        return AttackBudget(epsilon=self.epsilon, bound_mode=self.bound_mode)


class PgdSettings(_Section):
    epsilon: Num | None = Field(default=None, ge=0.0, le=1.0)
    steps: int = Field(default=10, ge=0)
    step_size: Num | None = Field(default=None, gt=0.0)
    random_start: bool = True
    eval_random_start: bool = False
    seed: int = 0
    mix_ratio: Num = Field(default=0.0, ge=0.0, le=1.0)
    debug: bool = False

    def to_config(self, *, for_training: bool = True) -> PgdConfig:
        if self.epsilon is None:
            raise ConfigError("pgd.epsilon", "required")
        return PgdConfig(
            epsilon=self.epsilon,
            steps=self.steps,
            step_size=self.step_size,
            random_start=self.random_start if for_training else self.eval_random_start,
            seed=self.seed,
            debug=self.debug,
        )


class TargetSettings(ScheduleSettings):
    """Target architecture, training schedule and the checkpoints evaluated against."""

    arch: Literal["small-cnn", "wide-cnn"] = "small-cnn"
    width: int = Field(default=32, ge=1)
    epochs: int = Field(default=30, ge=0)
    robust: bool = False
    checkpoints: PathList = Field(default_factory=list)


class SurrogateSettings(_Section):
    checkpoint: Path | None = None


class AblationSettings(_Section):
    proportions: NumList = Field(default_factory=lambda: [0.1, 0.25, 0.5, 0.75, 1.0])


class CompareSettings(_Section):
    variants: StrList = Field(default_factory=lambda: ["vanilla", "plain", "margin"])


class SynthSettings(_Section):
    root: Path | None = None
    name: str = "toy10"
    n_classes: int = Field(default=10, ge=1)
    per_class: int = Field(default=40, ge=2)
    size: int = Field(default=32, ge=8)
    channels: int = Field(default=3, ge=1, le=3)

    @field_validator("channels")
    @classmethod
    def _grey_or_rgb(cls, value: int) -> int:
        if value not in (1, 3):
            raise ValueError("channels must be 1 or 3")
        return value


class OutputSettings(_Section):
    root: Path | None = None


class RuntimeSettings(_Section):
    progress: bool = False
    device: str = "cpu"


class RunSettings(_Section):
    """Validated configuration of one run."""

    seed: int = 0
    data: DataSettings = DataSettings()
    roles: RoleSettings = RoleSettings()
    encoder: EncoderSettings = EncoderSettings()
    anchors: AnchorSettings = AnchorSettings()
    margin: MarginSettings = MarginSettings()
    finetune: ScheduleSettings = ScheduleSettings()
    generator: GeneratorSettings = GeneratorSettings()
    budget: BudgetSettings = BudgetSettings()
    pgd: PgdSettings = PgdSettings()
    target: TargetSettings = TargetSettings()
    surrogate: SurrogateSettings = SurrogateSettings()
    ablation: AblationSettings = AblationSettings()
    compare: CompareSettings = CompareSettings()
    synth: SynthSettings = SynthSettings()
    output: OutputSettings = OutputSettings()
    runtime: RuntimeSettings = RuntimeSettings()

    def lookup(self, dotted: str) -> Any:
        value: Any = self
        for part in dotted.split("."):
            value = getattr(value, part)
        return value

    @property
    def output_root(self) -> Path:
        if self.output.root is not None:
            return self.output.root
        return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))

    def config_hash(self) -> str:
        """SHA-256 over every semantically meaningful key."""
        payload = self.model_dump(mode="json", exclude={"output", "runtime"})
        canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


# Keys each command needs before any compute starts
REQUIRED_KEYS: dict[str, tuple[str, ...]] = {
    "synth": ("synth.root",),
    "finetune": ("data.manifest", "data.assignment"),
    "train-gen": ("data.manifest", "data.assignment", "surrogate.checkpoint", "budget.epsilon"),
    "attack": ("data.manifest", "data.assignment", "generator.checkpoint", "budget.epsilon"),
    "eval": ("data.manifest", "data.assignment", "generator.checkpoint", "budget.epsilon"),
    "train-target": ("data.manifest", "data.assignment"),
    "adv-train": ("data.manifest", "data.assignment", "pgd.epsilon"),
    "audit": ("data.manifest", "data.assignment", "surrogate.checkpoint"),
    "export-emb": ("data.manifest", "data.assignment", "surrogate.checkpoint"),
    "pipeline": ("data.manifest", "data.assignment", "budget.epsilon"),
    "compare-surrogates": ("data.manifest", "data.assignment", "budget.epsilon"),
    "ablate-proportion": ("data.manifest", "data.assignment", "budget.epsilon"),
}

_PATH_KEYS = ("data.manifest", "data.assignment", "surrogate.checkpoint", "generator.checkpoint")


def parse_config_text(text: str, source: str = "<config>") -> RunConfigDict:
    """Parse `dotted.key=value` lines into a nested mapping of raw strings."""
    tree: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}", f"expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        _assign(tree, key, value)
    return tree  # type: ignore[return-value]


def _assign(tree: dict[str, Any], dotted: str, value: str) -> None:
    parts = dotted.split(".")
    node = tree
    for part in parts[:-1]:
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise ConfigError(dotted, f"{part!r} is a value, not a section")
        node = child
    node[parts[-1]] = value


def _resolve_paths(tree: dict[str, Any], base: Path) -> None:
    """Interpret relative path values of a file relative to that file's directory."""
    for dotted in (*_PATH_KEYS, "synth.root", "anchors.path"):
        section, _, key = dotted.partition(".")
        node = tree.get(section)
        if isinstance(node, dict) and isinstance(node.get(key), str):
            path = Path(node[key])
            if not path.is_absolute():
                node[key] = str(base / path)
    target = tree.get("target")
    if isinstance(target, dict) and isinstance(target.get("checkpoints"), str):
        resolved = [
            str(p if p.is_absolute() else base / p)
            for p in (Path(v) for v in _comma_list(target["checkpoints"]))
        ]
        target["checkpoints"] = ",".join(resolved)


def _merge(into: dict[str, Any], other: dict[str, Any]) -> None:
    for key, value in other.items():
        if isinstance(value, dict) and isinstance(into.get(key), dict):
            _merge(into[key], value)
        else:
            into[key] = value


def load_config(
    paths: Sequence[str | Path] = (),
    overrides: Iterable[str] = (),
    seed: int | None = None,
) -> RunSettings:
    """Layer config files (later wins), then `key=value` overrides, then --seed."""
    tree: dict[str, Any] = {}
    for path in paths:
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(str(path), f"cannot read config file: {exc}") from exc
        layer = dict(parse_config_text(text, source=str(path)))
        _resolve_paths(layer, path.parent)
        _merge(tree, layer)
    for override in overrides:
        if "=" not in override:
            raise ConfigError(override, "overrides must look like key=value")
        key, value = override.split("=", 1)
        _assign(tree, key.strip(), value.strip())
    if seed is not None:
        tree["seed"] = str(seed)
    return validate_config(tree)


def validate_config(tree: dict[str, Any] | RunConfigDict) -> RunSettings:
    try:
        return RunSettings.model_validate(tree)
    except ValidationError as exc:
        error = exc.errors()[0]
        key = ".".join(str(part) for part in error["loc"]) or "<root>"
        message = "unknown key" if error["type"] == "extra_forbidden" else error["msg"]
        raise ConfigError(key, message) from exc


def require(settings: RunSettings, command: str) -> None:
    """Check the keys a command needs and that referenced input paths exist."""
    if command not in REQUIRED_KEYS:
        raise ConfigError("command", f"unknown command {command!r}")
    for key in REQUIRED_KEYS[command]:
        if settings.lookup(key) is None:
            raise ConfigError(key, f"required by '{command}'")
    for key in _PATH_KEYS:
        value = settings.lookup(key)
        if value is not None and key in REQUIRED_KEYS[command] and not _exists(value):
            raise ConfigError(key, f"path {value} does not exist")
    if command == "eval" and not settings.target.checkpoints:
        raise ConfigError("target.checkpoints", "required by 'eval'")
    for path in settings.target.checkpoints:
        if not _exists(path):
            raise ConfigError("target.checkpoints", f"path {path} does not exist")
    if settings.encoder.kind == "plugin" and not settings.encoder.plugin_ref:
        raise ConfigError("encoder.plugin_ref", "required when encoder.kind=plugin")
    if settings.anchors.provider == "explicit" and settings.anchors.path is None:
        raise ConfigError("anchors.path", "required when anchors.provider=explicit")
    if settings.anchors.provider == "text-embedding" and not settings.anchors.class_names:
        raise ConfigError("anchors.class_names", "required when anchors.provider=text-embedding")


def _exists(path: Path) -> bool:
    return path.exists() or path.with_suffix(".pt").exists()
