"""Exception types raised across the library."""


class NormlabError(Exception):
    """Base class for all library errors."""


class InvalidShape(NormlabError, ValueError):
    pass


class InvalidGrouping(NormlabError, ValueError):
    pass


class DegenerateDivisor(NormlabError, ZeroDivisionError):
    pass


class DegenerateBatch(NormlabError, ValueError):
    """Batch statistics requested from fewer than two samples."""


class DegenerateGroup(NormlabError, ValueError):
    pass


class DegenerateRow(NormlabError, ValueError):
    """A weight row is constant, so it has no direction after centering."""


class InvalidLabel(NormlabError, ValueError):
    pass


class InvalidInput(NormlabError, ValueError):
    pass


class CorruptDataset(NormlabError, ValueError):
    pass


class DivergedRun(NormlabError, FloatingPointError):
    """Training produced a non-finite loss."""
