"""Exception types shared across the pipeline."""


class PipelineError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(PipelineError):
    """An input violates a documented invariant (shape, range, schema)."""


class ManifestError(PipelineError):
    """A manifest line could not be parsed; carries the offending line number."""

    def __init__(self, message: str, line_number: int | None = None):
        super().__init__(message)
        self.line_number = line_number


class ReferenceNotFoundError(PipelineError, LookupError):
    """No native-reference utterance matches the requested transcript."""

    def __init__(self, message: str, utterance_id: str = ""):
        super().__init__(message)
        self.utterance_id = utterance_id


class AmbiguousReferenceError(PipelineError):
    """More than one native-reference utterance matches the transcript."""


class CacheIntegrityError(PipelineError):
    """Feature cache file is corrupt, truncated, or carries trailing bytes."""


class ProviderError(PipelineError):
    """A pretrained-component provider failed; wraps the original error."""


class WiringError(PipelineError):
    """A training or conversion step was fed utterances violating the pairing rules."""


class DivergenceError(PipelineError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, history=None):
        super().__init__(message)
        self.history = history or []


class ModelStateError(PipelineError):
    """Operation requires a model or provider state that is absent."""
