"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class SubsidySimError(Exception):
    exit_code = 1
    kind = "error"


class ConfigError(SubsidySimError):
    exit_code = 2
    kind = "config_error"


class DataError(SubsidySimError):
    exit_code = 3
    kind = "data_error"

    def __init__(self, message, rejects=None):
        super().__init__(message)
        self.rejects = list(rejects or [])


class NumericalError(SubsidySimError):
    exit_code = 4
    kind = "numerical_error"
