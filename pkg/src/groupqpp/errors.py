"""Exception types shared across the workbench.

The CLI maps these onto exit codes: usage problems exit 1, data problems
exit 2, numerical/contract failures exit 3.
"""


class QppError(Exception):
    """Base class for all workbench errors."""


class UsageError(QppError):
    """Bad command line or configuration usage."""


class DataError(QppError):
    """Base class for problems with input data or files."""


class ParseError(DataError):
    """Malformed line in a textual input file."""

    def __init__(self, message: str, line_no: int | None = None):
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)
        self.line_no = line_no


class MissingDataError(DataError):
    """An input is empty or a required piece of data is absent."""


class FormatError(DataError):
    """A binary or structured file does not conform to its format."""


class InputError(DataError):
    """Arguments are individually valid but mutually inconsistent."""


class NumericalError(QppError):
    """Base class for numerical failures."""


class DegenerateVarianceError(NumericalError):
    """A statistic is undefined because an input has zero variance."""


class DegenerateDivisorError(NumericalError):
    """A normalizing quantity is zero."""


class NoRelevantJudgmentsError(NumericalError):
    """A query has no judged-relevant documents; its AP is undefined.

    Callers drop such queries from correlations with a warning.
    """


class NonFiniteLossError(NumericalError):
    """Training produced a NaN or infinite loss."""


class ShapeError(NumericalError):
    """Tensor operands have incompatible shapes."""


class ContractError(NumericalError):
    """An internal API contract was violated."""


class ExperimentError(QppError):
    """A stage of an experiment failed; names the stage and split."""

    def __init__(self, stage: str, split_index: int | None = None):
        at = f" (split {split_index})" if split_index is not None else ""
        super().__init__(f"experiment stage '{stage}' failed{at}")
        self.stage = stage
        self.split_index = split_index
