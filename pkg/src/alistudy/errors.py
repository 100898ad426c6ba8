"""Exception hierarchy.

``ConfigurationError`` maps to CLI exit code 2, every ``DataError`` to exit code 1.
"""


class AliStudyError(Exception):
    exit_code = 1


class ConfigurationError(AliStudyError):
    exit_code = 2


class DataError(AliStudyError):
    exit_code = 1


class DegenerateInputError(DataError):
    pass


class NonConvergenceError(DataError):
    pass


class SeparationError(NonConvergenceError):
    """Raised when the logistic likelihood has no finite maximizer."""


class IdentifiabilityError(DataError):
    pass


class StratumQuotaError(DataError):
    def __init__(self, message, deficient=None):
        super().__init__(message)
        self.deficient = deficient or {}


class IncompleteAuditError(DataError):
    pass


class StateError(DataError):
    pass
