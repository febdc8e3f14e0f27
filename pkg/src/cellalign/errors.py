"""Exception hierarchy shared by every cellalign module."""


class CellAlignError(Exception):
    """Base class for all library errors."""


class SingularTransform(CellAlignError, ValueError):
    pass


class InvalidPixelSize(CellAlignError, ValueError):
    pass


class SchemaError(CellAlignError, ValueError):
    def __init__(self, column, message=None):
        self.column = column
        super().__init__(message or f"missing required column {column!r}")


class ParseError(CellAlignError, ValueError):
    def __init__(self, line, message):
        self.line = line
        super().__init__(f"line {line}: {message}")


class DuplicateId(CellAlignError, ValueError):
    def __init__(self, cell_id):
        self.cell_id = cell_id
        super().__init__(f"duplicate cell id {cell_id!r}")


class InvalidInput(CellAlignError, ValueError):
    pass


class EmptyInput(CellAlignError, ValueError):
    pass


class ConfigError(CellAlignError, ValueError):
    pass


class IoError(CellAlignError, OSError):
    pass


class TooFewLandmarks(CellAlignError, ValueError):
    pass


class TooFewPoints(CellAlignError, ValueError):
    pass


class TooFewPairs(CellAlignError, ValueError):
    pass


class TooFewCells(CellAlignError, ValueError):
    pass


class DegenerateConfiguration(CellAlignError, ValueError):
    pass


class NoDenseRegion(CellAlignError, ValueError):
    pass


class WindowsEmpty(CellAlignError, ValueError):
    pass


class MissingFeature(CellAlignError, KeyError):
    def __init__(self, cell_id, name):
        self.cell_id = cell_id
        self.name = name
        super().__init__(f"cell {cell_id!r} has no value for feature {name!r}")

    def __str__(self):
        return self.args[0]


class FeatureMismatch(CellAlignError, ValueError):
    pass


class DegenerateAffinity(CellAlignError, ValueError):
    pass


class UnknownId(CellAlignError, KeyError):
    def __str__(self):
        return self.args[0] if self.args else "unknown id"


class UndefinedCorrelation(CellAlignError, ValueError):
    pass


class MissingLabel(CellAlignError, ValueError):
    def __init__(self, cell_id):
        self.cell_id = cell_id
        super().__init__(f"cell {cell_id!r} has no class label")


class GridMismatch(CellAlignError, ValueError):
    pass
