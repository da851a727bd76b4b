"""Error types for noboxlab."""

from __future__ import annotations

from collections.abc import Iterable


class NoBoxLabError(Exception):
    """Base class for every error raised by noboxlab."""


class ConfigError(NoBoxLabError, ValueError):
    """A configuration key is missing, malformed or out of range."""

    def __init__(self, key: str, message: str) -> None:
        super().__init__(f"{key}: {message}")
        self.key = key


class AssignmentError(NoBoxLabError, ValueError):
    """A split assignment references items the manifest does not contain."""


class IngestionError(NoBoxLabError, OSError):
    """An image file could not be read or decoded."""

    def __init__(self, path: str, reason: str) -> None:
        super().__init__(f"cannot ingest {path}: {reason}")
        self.path = path


class RoleNotFoundError(NoBoxLabError, KeyError):
    """A split role is not present in the registry."""

    def __init__(self, role: str, available: Iterable[str]) -> None:
        names = ", ".join(sorted(available)) or "<none>"
        super().__init__(f"unknown role {role!r} (available: {names})")
        self.role = role


class DisjointnessError(NoBoxLabError):
    """Surrogate-tuning data overlaps a protected role."""

    def __init__(self, role_a: str, role_b: str, offending: Iterable[str]) -> None:
        self.offending = tuple(sorted(offending))
        preview = ", ".join(h[:12] for h in self.offending[:5])
        more = "" if len(self.offending) <= 5 else f" (+{len(self.offending) - 5} more)"
        super().__init__(
            f"roles {role_a!r} and {role_b!r} share {len(self.offending)} images: {preview}{more}"
        )
        self.role_a = role_a
        self.role_b = role_b


class ShapeError(NoBoxLabError, ValueError):
    """Array shapes do not match the contract of an operation."""


class PreconditionError(NoBoxLabError, ValueError):
    """Inputs violate a documented precondition (e.g. unit norm)."""


class DomainError(NoBoxLabError, ValueError):
    """An argument is outside the domain of a function."""


class ConstructionError(NoBoxLabError, RuntimeError):
    """A model could not be constructed from its spec."""


class CheckpointError(NoBoxLabError):
    """Base class for checkpoint persistence failures."""


class CheckpointNotFoundError(CheckpointError, FileNotFoundError):
    """The checkpoint blob or its sidecar does not exist."""


class IntegrityError(CheckpointError, ValueError):
    """The checkpoint content does not match its recorded digest."""


class CheckpointShapeError(CheckpointError, ShapeError):
    """The checkpoint spec is incompatible with the expected model spec."""


class PersistenceError(CheckpointError, OSError):
    """Writing a checkpoint failed."""


class NonFiniteLossError(NoBoxLabError, RuntimeError):
    """A training loss became NaN or infinite."""

    def __init__(self, step: int, value: float) -> None:
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step


class NonFiniteGradientError(NoBoxLabError, RuntimeError):
    """An attack gradient became NaN or infinite."""

    def __init__(self, step: int) -> None:
        super().__init__(f"non-finite input gradient at attack step {step}")
        self.step = step


class BudgetViolationError(NoBoxLabError, RuntimeError):
    """Crafted samples leave the l-inf ball or the pixel range."""

    def __init__(self, ids: Iterable[str], detail: str = "") -> None:
        self.ids = tuple(ids)
        preview = ", ".join(self.ids[:10])
        suffix = f": {detail}" if detail else ""
        super().__init__(f"{len(self.ids)} samples violate the budget ({preview}){suffix}")


class RunExistsError(NoBoxLabError, FileExistsError):
    """The run directory already exists."""
