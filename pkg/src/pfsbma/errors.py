"""Exception types shared across the package."""


class DomainError(ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class CapacityError(ValueError):
    """A request exceeds the enumeration limit."""


class CollinearityError(ArithmeticError):
    """Adding a column would make the model's Gram matrix numerically singular."""

    def __init__(self, index, message=None):
        self.index = index
        super().__init__(message or f"column {index + 1} is collinear with the current model")


class ConfigError(ValueError):
    """Inconsistent run configuration (dimensions, prior settings, ...)."""


class DataError(ValueError):
    """Malformed input data; carries the offending row/column when known."""

    def __init__(self, message, row=None, column=None):
        self.row = row
        self.column = column
        loc = []
        if row is not None:
            loc.append(f"row {row}")
        if column is not None:
            loc.append(f"column {column!r}")
        super().__init__(f"{message} ({', '.join(loc)})" if loc else message)
