"""Exception hierarchy shared by the library and the command line.

The CLI maps :class:`ContractViolation` (and subclasses) to exit code 1 and
:class:`DataFormatError` / ``OSError`` to exit code 2.
"""


class ContractViolation(ValueError):
    """An operation was called outside its documented preconditions."""


class DomainError(ContractViolation):
    """Input lies outside the mathematical domain (non-finite, zero norm...)."""


class DegenerateConfigurationError(ContractViolation):
    """A Procrustes problem has no unique rotation (rank below two)."""

    def __init__(self, message, frame=None, sequence=None):
        super().__init__(message)
        self.frame = frame
        self.sequence = sequence


class TrainingDiverged(ContractViolation):
    """A loss or gradient became non-finite during training."""


class DataFormatError(Exception):
    """A dataset or checkpoint file could not be parsed."""


class VersionError(DataFormatError):
    """A file declares a format version this build does not read."""


class MissingGroundTruth(ContractViolation):
    """An operation needs 3D ground truth that the dataset does not carry."""
