"""Exception hierarchy.

Every error carries a short machine-readable ``category`` and the process exit
code the CLI maps it to.
"""


class AttentionClustersError(Exception):
    category = "error"
    exit_code = 1


class ConfigError(AttentionClustersError, ValueError):
    category = "config"
    exit_code = 2


class DimensionError(AttentionClustersError, ValueError):
    category = "dimension"
    exit_code = 3


class NumericError(AttentionClustersError, ArithmeticError):
    category = "numeric"
    exit_code = 3


class DegenerateVectorError(NumericError):
    category = "degenerate"


class FormatError(AttentionClustersError):
    category = "format"
    exit_code = 3


class ConsistencyError(AttentionClustersError):
    category = "consistency"
    exit_code = 3


class DataError(AttentionClustersError):
    category = "data"
    exit_code = 3


class StorageError(AttentionClustersError, OSError):
    category = "storage"
    exit_code = 3


class TrainingError(AttentionClustersError):
    category = "training"
    exit_code = 4

    def __init__(self, message, epoch=None, parameter=None):
        super().__init__(message)
        self.epoch = epoch
        self.parameter = parameter
