from typing import Optional


class MargokitError(Exception):
    """Root of every error raised on purpose by this package."""


class ConfigError(MargokitError, ValueError):
    pass


class DataError(MargokitError, ValueError):
    pass


class DimensionMismatchError(DataError):
    pass


class NonFiniteInputError(DataError):
    pass


class EmptyBagError(DataError):
    pass


class MissingLabelsError(DataError):
    pass


class BagParseError(DataError):
    """A bag CSV could not be parsed; `line_no` is 1-based and counts the header."""

    def __init__(self, line_no: Optional[int], message: str) -> None:
        self.line_no = line_no
        self.message = message
        where = f"line {line_no}: " if line_no is not None else ""
        super().__init__(f"{where}{message}")


class MissingHeaderError(BagParseError):
    pass


class RaggedRowError(BagParseError):
    pass


class NonNumericCellError(BagParseError):
    pass


class DuplicateRowError(BagParseError):
    pass


class SpecCompatibilityError(MargokitError, ValueError):
    pass


class NumericalError(MargokitError, ArithmeticError):
    pass


class ModelFileError(MargokitError):
    pass


class ModelVersionError(ModelFileError):
    pass


class CorruptModelError(ModelFileError):
    pass


class ModelSchemaError(ModelFileError):
    pass


class UsageError(MargokitError, ValueError):
    """Bad command-line flags or flag combinations."""
