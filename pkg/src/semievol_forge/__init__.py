"""semievol-forge: a semi-supervised fine-tuning orchestrator.

Propagates knowledge from a small labeled pool into a larger unlabeled pool
(by warm-up fine-tuning and by retrieved in-context references), mines the
unlabeled pool with collaborating model configurations, keeps only the
confident pseudo-responses by response-entropy percentile, and re-tunes the
base model on the combined data. A deterministic simulated backend makes
the whole loop verifiable at desk scale.
"""
from .data import Answer, Dataset, SplitResult, TaskRecord, dump_jsonl, load_jsonl, merge, split
from .errors import (
    CapabilityError,
    ParseError,
    ProviderError,
    SemiEvolError,
    SimulationError,
    TemplateError,
    TransportError,
    ValidationError,
)
from .pipeline import Pipeline, PipelineConfig, PipelineState, audit_test_isolation
from .selection import entropy, percentile_threshold

__version__ = "0.1.0"

__all__ = [
    "Answer",
    "CapabilityError",
    "Dataset",
    "ParseError",
    "Pipeline",
    "PipelineConfig",
    "PipelineState",
    "ProviderError",
    "SemiEvolError",
    "SimulationError",
    "SplitResult",
    "TaskRecord",
    "TemplateError",
    "TransportError",
    "ValidationError",
    "audit_test_isolation",
    "dump_jsonl",
    "entropy",
    "load_jsonl",
    "merge",
    "percentile_threshold",
    "split",
    "__version__",
]
