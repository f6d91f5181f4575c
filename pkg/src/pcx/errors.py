"""Exception hierarchy shared by the library, service and CLI.

``InputError`` maps to HTTP 400 / exit code 2 (bad files, shapes, indices),
``NumericalError`` to HTTP 500 / exit code 3 (degenerate math). Both carry a
``detail`` dict that is serialized verbatim into diagnostic payloads.
"""

from __future__ import annotations


class PcxError(Exception):
    """Base class for all errors raised by this package."""

    kind = "error"

    def __init__(self, message: str, **detail):
        super().__init__(message)
        self.message = message
        self.detail = detail

    def payload(self) -> dict:
        return {"error": {"kind": self.kind, "message": self.message, "detail": self.detail}}


class InputError(PcxError):
    """Unusable input: missing/corrupt files, shape mismatches, bad indices."""

    kind = "input"


class NumericalError(PcxError):
    """Computation failed on degenerate data (singular, all-zero, empty)."""

    kind = "numerical"


class DegenerateVectorError(NumericalError):
    """An all-zero concept vector cannot be normalized."""

    kind = "degenerate-vector"
