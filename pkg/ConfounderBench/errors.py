"""Exceptions raised by ConfounderBench."""


class BenchError(Exception):
    """Base class of every error raised by the benchmark."""


class ParameterError(BenchError, ValueError):
    pass


class DatasetError(BenchError):
    pass


class FormatError(BenchError):
    def __init__(self, message, row=None):
        if row is not None:
            message = 'row %d: %s' % (row, message)
        super().__init__(message)
        self.row = row


class ShapeError(BenchError, ValueError):
    pass


class UnsupportedArchitectureError(BenchError):
    pass


class TrainingError(BenchError):
    def __init__(self, message, epoch):
        super().__init__('epoch %d: %s' % (epoch, message))
        self.epoch = epoch


class NumericalError(BenchError):
    def __init__(self, message, condition):
        super().__init__('%s (condition estimate %.3g)' % (message, condition))
        self.condition = condition


class ExplainError(BenchError):
    pass


class MetricError(BenchError, ValueError):
    pass


class ConfigError(BenchError):
    def __init__(self, message, lineNumber=None):
        if lineNumber is not None:
            message = 'line %d: %s' % (lineNumber, message)
        super().__init__(message)
        self.lineNumber = lineNumber


class CellError(BenchError):
    def __init__(self, cell, cause):
        confounder, p, seed = cell
        super().__init__('cell (%s, p=%d, seed=%d) failed: %s' % (confounder, p, seed, cause))
        self.cell = cell
        self.cause = cause


class SweepError(BenchError):
    pass
