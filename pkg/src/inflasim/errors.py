"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class InflasimError(Exception):
    exit_code = 1


class ConfigError(InflasimError, ValueError):
    exit_code = 2


class DomainError(ConfigError):
    """An argument lies outside the domain of the operation."""


class ZeroModeError(DomainError):
    """The frozen k = 0 mode was requested where it is singular."""


class ResourceError(InflasimError):
    exit_code = 3


class InvariantError(InflasimError):
    exit_code = 4


class TruncationBudgetError(InvariantError):
    """Gaussian tail mass outside the field window exceeds eps_jlp."""


class EmptySectorError(InvariantError):
    """A projection left (numerically) nothing behind."""


class NumericalError(InflasimError):
    exit_code = 5
