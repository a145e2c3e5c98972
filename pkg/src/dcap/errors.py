"""Exception hierarchy shared by every dcap module."""


class DcapError(Exception):
    """Base class for all library errors."""


class DimensionError(DcapError, ValueError):
    pass


class AxisError(DcapError, ValueError):
    pass


class ContractError(DcapError, ValueError):
    """A precondition of an operation was violated by the caller."""


class NumericalError(DcapError, ArithmeticError):
    """A primitive produced NaN or Inf."""


class ConfigurationError(DcapError, ValueError):
    pass


class EmptyDatasetError(DcapError, ValueError):
    pass


class MalformedRecordError(DcapError, ValueError):
    pass


class MetricUndefinedError(DcapError, ValueError):
    pass


class CheckpointError(DcapError):
    pass


class DatasetCacheError(DcapError):
    pass


class OracleError(DcapError, ArithmeticError):
    pass


class TrainingDiverged(DcapError, RuntimeError):
    """Raised when the loss or a gradient goes non-finite.

    ``last_good`` holds the parameter snapshot from the best epoch seen so
    far (or the initial parameters if none finished).
    """

    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good


class FeatureIndexError(DcapError, IndexError):
    pass
