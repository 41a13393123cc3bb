from enum import Enum
from typing import Optional


class ErrorKind(Enum):
    """Enum with the possible errors raised by the itd tool."""
    INVALID_INPUT = "Invalid input"
    NOT_FOUND = "File not found"
    UNSUPPORTED = "Unsupported audio format"
    SILENT = "Silent clip"
    GEOMETRY = "Invalid geometry"
    SHAPE = "Shape mismatch"
    NON_FINITE = "Non-finite value"
    CHECKPOINT = "Checkpoint mismatch"
    POLICY = "Augmentation not allowed"
    FAILED = "Operation failed"


class ItdError(ValueError):
    """Raised by every operation of the package, tagged with an ErrorKind."""

    def __init__(self, kind: ErrorKind, detail: Optional[str] = None):
        self.kind = kind
        self.detail = detail
        super().__init__(f"{kind.value}: {detail}" if detail else kind.value)
