"""Exception types raised across the simulator."""


class FedGCNError(Exception):
    """Base class for every error raised by this package."""


class InputShapeError(FedGCNError, ValueError):
    pass


class ShapeError(FedGCNError, ValueError):
    pass


class NumericError(FedGCNError, ArithmeticError):
    pass


class LabelError(FedGCNError, ValueError):
    pass


class LayoutError(FedGCNError, ValueError):
    pass


class ConfigError(FedGCNError, ValueError):
    pass


class DataError(FedGCNError, ValueError):
    pass


class AggregationError(FedGCNError, ValueError):
    pass


class DomainCountError(FedGCNError, ValueError):
    pass


class SchemaError(FedGCNError, ValueError):
    pass


class SplitError(FedGCNError, ValueError):
    pass


class EvalError(FedGCNError, ValueError):
    pass
