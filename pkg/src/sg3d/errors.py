"""Exception types shared across the package."""


class Sg3dError(Exception):
    """Base class for all package errors."""


class SceneFormatError(Sg3dError):
    """Scene file is malformed (bad magic, header, or field)."""


class SceneValidationError(Sg3dError):
    """Scene data violates an invariant (dangling ids, overlap, ...)."""


class GenerationError(Sg3dError):
    """Synthetic scene generation failed (e.g. placement retries exhausted)."""


class TableFormatError(Sg3dError):
    """Embedding table file is malformed or vectors fail the norm check."""


class PromptLookupError(Sg3dError):
    """Requested prompt is missing from an embedding table."""


class CheckpointError(Sg3dError):
    """Checkpoint file has a wrong version, fingerprint, or is truncated."""


class TrainingError(Sg3dError):
    """Training aborted (non-finite loss or gradient)."""


class ConfigError(Sg3dError):
    """Run configuration is invalid (unknown key, missing path, bad value)."""
