"""
Pipeline Errors
===============
One exception family for every stage of the pipeline. Each class carries the
process exit code used by ``pipeline.py`` and a short machine-readable name
that ends up in the one-line JSON error printed on failure.

    InvalidInputError        5   bad shapes, ranges, enum values, empty inputs
    ConfigurationError       2   config / registry / template coverage problems
    MissingInputError        3   manifests, volumes or checkpoints not on disk
    CheckpointMismatchError  4   checkpoint built for a different architecture
    NonFiniteLossError       6   NaN / inf loss during training
    UndefinedMetricError     7   metric without a defined value (e.g. no positives)
"""

from typing import Optional


class PipelineError(Exception):
    """Base class. Unexpected (non-pipeline) exceptions exit with code 1."""

    exit_code: int = 1
    name: str = "pipeline_error"

    def to_record(self) -> dict:
        return {"error": self.name, "exit_code": self.exit_code, "message": str(self)}


class InvalidInputError(PipelineError, ValueError):
    exit_code = 5
    name = "invalid_input"


class ConfigurationError(PipelineError):
    exit_code = 2
    name = "configuration"


class MissingInputError(PipelineError, FileNotFoundError):
    exit_code = 3
    name = "missing_input"


class CheckpointMismatchError(PipelineError):
    exit_code = 4
    name = "checkpoint_mismatch"


class NonFiniteLossError(PipelineError, ArithmeticError):
    exit_code = 6
    name = "non_finite_loss"

    def __init__(self, message: str, snapshot_path: Optional[str] = None):
        super().__init__(message)
        self.snapshot_path = snapshot_path

    def to_record(self) -> dict:
        record = super().to_record()
        record["snapshot"] = self.snapshot_path
        return record


class UndefinedMetricError(PipelineError, ArithmeticError):
    exit_code = 7
    name = "undefined_metric"
