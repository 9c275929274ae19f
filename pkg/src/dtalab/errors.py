"""Exception types shared across the package."""


class ContractError(ValueError):
    """An argument violated a documented precondition (bad shape, bad kind, ...)."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values."""


class TrainingError(RuntimeError):
    """Training diverged or otherwise could not proceed."""


class DataFormatError(ValueError):
    """A serialized artifact failed validation."""


class CorruptionError(DataFormatError):
    """Magic/hash/length checks failed on a serialized artifact."""


class VersionError(DataFormatError):
    """A serialized artifact carries an unsupported format version."""
