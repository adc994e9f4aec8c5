"""Exception types shared across the package."""

from __future__ import annotations


class PatternBenchError(Exception):
    """Base class for all package-specific errors."""


class InvariantViolation(PatternBenchError):
    """A process tree breaks one of the structural invariants."""


class ParseError(PatternBenchError):
    """A document could not be parsed; carries a location hint."""

    def __init__(self, message: str, location: str = ""):
        super().__init__(f"{message} (at {location})" if location else message)
        self.location = location


class UnknownNode(PatternBenchError):
    """A graph edit referenced a node id that does not exist."""


class UnknownEdge(PatternBenchError):
    """A graph edit referenced an edge that does not exist or is ambiguous."""


class DuplicateId(PatternBenchError):
    """A graph edit would introduce a duplicate node or edge."""


class NotBlockStructured(PatternBenchError):
    """A flat graph is not the lowering of any valid block tree."""


class CorruptLog(PatternBenchError):
    """An event marked OK in a session log failed on replay."""


class UnsupportedStructure(PatternBenchError):
    """The operation is undefined for models outside the pattern-reachable class."""


class PatternError(PatternBenchError):
    """A change-pattern application was rejected; the model is unchanged."""

    PRECONDITION_VIOLATED = "PRECONDITION_VIOLATED"
    UNKNOWN_REF = "UNKNOWN_REF"
    WOULD_BREAK_STRUCTURE = "WOULD_BREAK_STRUCTURE"

    def __init__(self, code: str, detail: str):
        super().__init__(f"{code}: {detail}")
        self.code = code
        self.detail = detail


class BudgetExceeded(PatternBenchError):
    """A search ran out of state budget; carries best-known distance bounds."""

    def __init__(self, lower: int, upper: int | None, explored: int):
        bound = f"lower={lower}, upper={'?' if upper is None else upper}"
        super().__init__(f"state budget exhausted after {explored} states ({bound})")
        self.lower = lower
        self.upper = upper
        self.explored = explored
