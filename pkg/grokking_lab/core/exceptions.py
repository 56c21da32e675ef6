"""Error hierarchy shared by services and the CLI.

``LabError`` subclasses map to exit code 1, ``AssertionStyleError``
subclasses (failed preconditions of a check, data that does not bracket a
transition) map to exit code 2.
"""


class LabError(Exception):
    exit_code = 1


class NonFiniteError(LabError):
    """A NaN or Inf showed up in activations, gradients or a partial."""


class DomainError(LabError):
    """An input lies outside the mathematical domain of an operation."""


class DivergenceError(LabError):
    def __init__(self, message: str, epoch: int = -1):
        super().__init__(message)
        self.epoch = epoch


class ConfigConflictError(LabError):
    """Mutually exclusive configuration sources were combined."""


class AssertionStyleError(LabError):
    exit_code = 2


class PreconditionError(AssertionStyleError):
    pass


class NonBracketingError(AssertionStyleError):
    pass
