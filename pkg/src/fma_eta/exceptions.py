"""Exception types shared across the package."""


class FmaEtaError(Exception):
    """Base class for all package errors."""


class ShapeMismatchError(FmaEtaError, ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DegenerateMaskError(FmaEtaError, ValueError):
    """A mask left no valid entries where at least one is required."""


class VocabularyError(FmaEtaError, ValueError):
    """A categorical id fell outside its configured vocabulary."""


class ConfigurationError(FmaEtaError, ValueError):
    """A configuration value is inconsistent with the requested wiring."""


class ContractError(FmaEtaError, ValueError):
    """An internal calling contract was violated (e.g. non-scalar loss seed)."""


class AlignmentError(FmaEtaError, ValueError):
    """Sequential inputs that must share a length do not."""


class DomainError(FmaEtaError, ValueError):
    """A numeric input is outside the mathematically valid domain."""


class DatasetParseError(FmaEtaError, ValueError):
    """A dataset file could not be parsed; carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(message)
        self.line = line


class CheckpointError(FmaEtaError, ValueError):
    """A checkpoint archive is missing, malformed, or version-incompatible."""


class RankError(FmaEtaError, ValueError):
    """A fit was requested on data with insufficient rank."""


class TrainingDivergedError(FmaEtaError, RuntimeError):
    """Training produced a non-finite loss; message carries diagnostics."""
