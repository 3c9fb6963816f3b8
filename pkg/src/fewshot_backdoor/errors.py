"""Exception types shared across the toolkit.

Each maps to one failure category surfaced by the CLI exit codes:
configuration problems exit 2, missing artifacts exit 3, numeric
failures exit 4.
"""


class FewshotBackdoorError(Exception):
    """Base class for all toolkit errors."""


class ConfigurationError(FewshotBackdoorError):
    """Invalid sizes, counts, enum values, or config files."""


class DataLoadError(FewshotBackdoorError):
    """Dataset directory or manifest problems; names the offender."""


class SamplingError(FewshotBackdoorError):
    """Episode sampling cannot satisfy the requested spec."""


class InputError(FewshotBackdoorError):
    """Shape mismatches or misaligned inputs to an operation."""


class GeometryError(FewshotBackdoorError):
    """Trigger patch placement outside image bounds."""


class NumericError(FewshotBackdoorError):
    """Zero-norm features, non-finite gradients, or divergence."""


class TrainingError(FewshotBackdoorError):
    """Training diverged. Carries the last finite state when available."""

    def __init__(self, message, last_state=None):
        super().__init__(message)
        self.last_state = last_state


class ConstructionError(FewshotBackdoorError):
    """Poisoned-set assembly given mismatched records; names the source_id."""


class UnsupportedParadigmError(FewshotBackdoorError):
    """Requested operation does not apply to this adaptation paradigm."""


class ArtifactError(FewshotBackdoorError):
    """Missing or incompatible pipeline artifact (checkpoint, trigger, bundle)."""


class DefenseError(FewshotBackdoorError):
    """Defense probe failed. Carries per-class partial results when available."""

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial
