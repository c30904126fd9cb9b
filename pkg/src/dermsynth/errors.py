"""Exception hierarchy shared by the pipeline stages.

Each exception carries the CLI exit code its stage maps to.
"""


class DermSynthError(Exception):
    exit_code = 1


class ValidationError(DermSynthError, ValueError):
    exit_code = 2


class ConfigError(ValidationError):
    pass


class ParseError(ValidationError):
    def __init__(self, message, row=None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class EmptyClassError(ValidationError):
    pass


class MissingConceptError(ValidationError):
    def __init__(self, missing):
        self.missing = list(missing)
        super().__init__("missing concepts: " + ", ".join(self.missing))


class ImageNotFoundError(ValidationError, FileNotFoundError):
    pass


class BudgetError(ValidationError):
    pass


class TargetTooSmallError(ValidationError):
    pass


class InsufficientSyntheticError(ValidationError):
    def __init__(self, cls, deficit, available):
        self.cls = cls
        self.deficit = deficit
        super().__init__(f"class {cls}: need {deficit} synthetic images, only {available} available")


class SingleClassError(ValidationError):
    pass


class ProviderError(DermSynthError):
    exit_code = 3


class DegenerateParaphraseError(ProviderError):
    pass


class TrainingAbort(DermSynthError, FloatingPointError):
    exit_code = 4


class StageError(DermSynthError):
    """Wraps a failure with the name of the pipeline stage that raised it."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 1)
        super().__init__(f"[{stage}] {cause}")
