"""noboxlab - No-box adversarial examples from margin fine-tuned surrogates."""

__version__ = "0.1.0"

from noboxlab.config import RunSettings, load_config  # noqa: E402
from noboxlab.lab import Lab, run_pipeline  # noqa: E402
from noboxlab.models import AdversarialBatch, EvaluationReport, RunManifest  # noqa: E402

__all__ = [
    "AdversarialBatch",
    "EvaluationReport",
    "Lab",
    "RunManifest",
    "RunSettings",
    "load_config",
    "run_pipeline",
]
