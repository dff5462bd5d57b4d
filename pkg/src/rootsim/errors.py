"""Diagnostics raised by the runtime and the foreign-interface layers.

Every misuse the library can detect is reported as a subclass of
:class:`Diagnostic`.  The class name doubles as the diagnostic *kind* that
appears in scenario reports, so names are part of the public surface.
"""

from __future__ import annotations


class Diagnostic(Exception):
    """Base class for every detected misuse or runtime failure."""

    def __init__(self, message: str = "", site: str | None = None):
        super().__init__(message)
        self.message = message
        self.site = site

    @property
    def kind(self) -> str:
        return type(self).__name__

    def __str__(self) -> str:
        if self.site:
            return f"{self.kind} at {self.site}: {self.message}"
        return f"{self.kind}: {self.message}"


# heap

class TooSmall(Diagnostic, ValueError):
    pass


class ValueOutOfRange(Diagnostic, OverflowError):
    pass


class NotImmediate(Diagnostic, TypeError):
    pass


class NotABlock(Diagnostic, TypeError):
    pass


class WrongTag(Diagnostic, TypeError):
    pass


class IndexOutOfBounds(Diagnostic, IndexError):
    pass


class StaleValue(Diagnostic):
    """A block reference that no longer points at a live block."""


class InvalidPointer(Diagnostic):
    """An even word that points outside both semispaces."""


class HeapExhausted(Diagnostic, MemoryError):
    pass


class HeapCorrupted(Diagnostic):
    """A collection aborted half-way; the runtime refuses further work."""


class RuntimeReleased(Diagnostic):
    pass


class ContextMismatch(Diagnostic):
    pass


# legacy layer

class NotInnermostFrame(Diagnostic):
    pass


class NotAClosure(Diagnostic, TypeError):
    pass


# mlroot

class UnregisteredRoot(Diagnostic):
    pass


class AliasViolation(Diagnostic):
    pass


# mlregion

class NoCurrentRegion(Diagnostic):
    pass


class NotCurrentRegion(Diagnostic):
    pass


class RegionDisabled(Diagnostic):
    pass


class SubRegionOrderViolation(Diagnostic):
    pass


class AlreadyReleased(Diagnostic):
    pass


class NotReleased(Diagnostic):
    pass


class LockOrderViolation(Diagnostic):
    pass


class NotReacquiredRegion(Diagnostic):
    pass


class RegionContextMismatch(ContextMismatch):
    pass


# scenarios

class UnknownScenario(Diagnostic, KeyError):
    def __str__(self) -> str:
        return Diagnostic.__str__(self)
