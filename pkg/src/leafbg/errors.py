"""Exception hierarchy. The CLI maps each family to an exit code."""


class LeafbgError(Exception):
    exit_code = 3


class ConfigError(LeafbgError, ValueError):
    exit_code = 1


class DataError(LeafbgError, ValueError):
    exit_code = 2


class ModelError(LeafbgError, RuntimeError):
    exit_code = 3


class TrainingError(LeafbgError, RuntimeError):
    exit_code = 3
