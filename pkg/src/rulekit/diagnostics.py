"""Diagnostics shared by the parser and the typechecker."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Tuple


class Code(str, Enum):
    SYNTAX = "E001"
    UNKNOWN_OPERATOR = "E002"
    ARITY_MISMATCH = "E003"
    UNBOUND_VARIABLE = "E004"
    UNBOUND_SYMBOL = "E005"
    DUPLICATE_NAME = "E006"
    TYPE_MISMATCH = "E007"
    OUTPUT_TYPE_MISMATCH = "E008"
    SHADOWING = "E009"
    BAD_CONSTRAINT = "E010"
    BAD_DECLARATION = "E011"
    UNRESOLVED_REFERENCE = "E012"
    TO_ONLY_SYMBOL = "E013"
    ENCODING = "E014"
    NESTING = "E015"


@dataclass(frozen=True)
class Span:
    line: int
    col: int
    end_line: int
    end_col: int

    def __str__(self) -> str:
        return f"{self.line}:{self.col}"


@dataclass(frozen=True)
class Diagnostic:
    code: Code
    message: str
    severity: str = "error"
    span: Optional[Span] = None
    path: Tuple[str, ...] = field(default=())

    @property
    def is_error(self) -> bool:
        return self.severity == "error"

    def render(self, filename: str = "<input>") -> str:
        where = filename
        if self.span is not None:
            where += f":{self.span}"
        if self.path:
            where += " [" + "/".join(self.path) + "]"
        return f"{where}: {self.severity} {self.code.value}: {self.message}"


class DiagnosticError(Exception):
    """Raised by APIs that cannot return diagnostics as values."""

    def __init__(self, diagnostics):
        self.diagnostics = list(diagnostics)
        super().__init__("; ".join(d.message for d in self.diagnostics))
