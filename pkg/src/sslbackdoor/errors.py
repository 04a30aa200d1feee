"""Exception hierarchy. Each class carries the process exit code the CLI maps it to."""


class SSLBackdoorError(Exception):
    exit_code = 1


class ConfigError(SSLBackdoorError, ValueError):
    exit_code = 2


class ContractError(SSLBackdoorError, ValueError):
    """An input violates a numerical precondition (e.g. a vector that should be unit-norm)."""

    exit_code = 2


class DataError(SSLBackdoorError):
    exit_code = 3


class PlacementError(DataError, ValueError):
    pass


class FormatError(DataError, ValueError):
    pass


class RateError(DataError, ValueError):
    pass


class TrainingDivergence(SSLBackdoorError, RuntimeError):
    exit_code = 4


class ProvenanceError(SSLBackdoorError):
    exit_code = 5


class ProvenanceWarning(UserWarning):
    pass
