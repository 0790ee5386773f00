"""Exception types shared across the engine."""
from __future__ import annotations


class Rt2vError(Exception):
    """Base class for every error raised by this package."""


class TwinParseError(Rt2vError):
    """Twin document text is not valid JSON."""


class TwinSchemaError(Rt2vError):
    """Twin document JSON is missing required fields or has wrong types."""


class TwinInvariantError(Rt2vError):
    """Structurally well-formed twin violates semantic invariants."""

    def __init__(self, violations: list[str]):
        self.violations = list(violations)
        super().__init__("; ".join(violations))


class RleError(Rt2vError):
    """Run-length mask text violates the mask grammar."""


class ProviderError(Rt2vError):
    """Embedding provider failed after exhausting retries."""


class DecompositionError(Rt2vError):
    """Query decomposition failed after all re-asks.

    Carries every raw response that failed validation so operators can
    inspect what the language model actually returned.
    """

    def __init__(self, message: str, raw_responses: list[str]):
        self.raw_responses = list(raw_responses)
        super().__init__(message)


class PlanError(Rt2vError):
    """Execution plan names unknown tools or unresolvable targets."""


class ToolTimeoutError(Rt2vError):
    """A refinement tool call timed out."""


class TrainingDivergedError(Rt2vError):
    """Loss became non-finite during head training."""

    def __init__(self, step: int):
        self.step = step
        super().__init__(f"non-finite loss at optimization step {step}")


class UnknownVideoError(Rt2vError):
    """A video id was requested that the index does not contain."""


class BenchmarkError(Rt2vError):
    """Benchmark directory or manifest is inconsistent."""


class MissingTwinError(BenchmarkError):
    """A manifest query references a video with no twin document."""


class DanglingReferenceError(BenchmarkError):
    """A manifest query references an object id absent from its twin."""


class DuplicateQueryError(BenchmarkError):
    """Two manifest queries share the same query id."""


class GenerationError(BenchmarkError):
    """Synthetic benchmark construction could not satisfy uniqueness."""
