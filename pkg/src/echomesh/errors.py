"""Exception types raised across the toolkit."""


class EchoMeshError(Exception):
    """Base class for all toolkit errors."""


class InvalidArgument(EchoMeshError, ValueError):
    pass


class OutOfDomain(EchoMeshError, ValueError):
    """A point lies outside the region an operation is defined on."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class DegenerateGeometry(EchoMeshError, ValueError):
    pass


class DegenerateRow(EchoMeshError, ValueError):
    def __init__(self, row):
        super().__init__(f"transport plan row {row} has zero mass")
        self.row = row


class IllConditioned(EchoMeshError, ArithmeticError):
    pass


class UndefinedCorrelation(EchoMeshError, ValueError):
    pass
