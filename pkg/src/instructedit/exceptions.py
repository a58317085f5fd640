"""Exception hierarchy. ``exit_code`` maps each family to a CLI exit status."""


class InstructEditError(Exception):
    exit_code = 5


class ConfigError(InstructEditError, ValueError):
    exit_code = 2

    def __init__(self, message, problems=None):
        super().__init__(message)
        self.problems = list(problems or [])


class InvalidRangeError(InstructEditError, ValueError):
    exit_code = 2


class ShapeMismatchError(InstructEditError, ValueError):
    exit_code = 5


class DataError(InstructEditError):
    exit_code = 3


class UnreadableSourceError(DataError):
    pass


class FormatVersionError(DataError):
    pass


class QuotaExceedsAvailableError(DataError):
    pass


class MissingNegativesError(DataError):
    pass


class DecodeError(DataError):
    pass


class DegenerateSizeError(DataError):
    pass


class BuildFailureError(DataError):
    """Per-sample failure rate exceeded the configured ceiling."""


class ClientError(InstructEditError):
    exit_code = 4


class TransportError(ClientError):
    """Retryable failure talking to an external model."""


class MalformedResponseError(ClientError):
    pass


class BudgetViolationError(ClientError):
    pass


class InsufficientNegativesError(ClientError):
    pass


class JudgeParseError(ClientError):
    pass


class EmptyInputError(InstructEditError, ValueError):
    exit_code = 3
