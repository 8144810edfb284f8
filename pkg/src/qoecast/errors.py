"""Exception types raised across the package.

Everything domain-level derives from QoecastError so callers (and the CLI)
can separate bad data / bad usage from genuine bugs.
"""


class QoecastError(Exception):
    """Base class for all domain errors raised by this package."""


# ---------------------------------------------------------------- telemetry

class MalformedRow(QoecastError):
    """A trace row failed validation. Carries the 1-based record number."""

    def __init__(self, record_no: int, field: str, detail: str = ""):
        self.record_no = record_no
        self.field = field
        msg = f"record {record_no}: bad value for {field!r}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NonMonotonicTimestamp(QoecastError):
    pass


class EmptyTrace(QoecastError):
    pass


# ----------------------------------------------------------------- synthgen

class InvalidConfig(QoecastError):
    pass


class SpanOutOfRange(QoecastError):
    pass


# ----------------------------------------------------------------- pipeline

class NoCompleteWindow(QoecastError):
    pass


class InsufficientData(QoecastError):
    pass


class TraceTooShort(QoecastError):
    pass


class TooFewSequences(QoecastError):
    pass


# ------------------------------------------------------------------- nncore

class ShapeMismatch(QoecastError):
    pass


class NonScalarOutput(QoecastError):
    pass


class TapeConsumed(QoecastError):
    pass


# ---------------------------------------------------------------------- zoo

class UnknownVariant(QoecastError):
    pass


class VersionMismatch(QoecastError):
    pass


class ChecksumMismatch(QoecastError):
    pass


# -------------------------------------------------------------------- train

class LengthMismatch(QoecastError):
    pass


class EmptySplit(QoecastError):
    pass


class DivergedLoss(QoecastError):
    pass


class SingularSystem(QoecastError):
    pass


class NoConvergence(QoecastError):
    pass


# --------------------------------------------------------------- evaluation

class ScalerMismatch(QoecastError):
    pass


# ------------------------------------------------------------------ explain

class NonDifferentiableModel(QoecastError):
    pass


class NoAttentionComponent(QoecastError):
    pass


class DegeneratePerturbations(QoecastError):
    pass


# -------------------------------------------------------------------- serve

class OutOfOrderSample(QoecastError):
    pass


class ScalerMissing(QoecastError):
    pass
