"""Exception hierarchy shared by every lossydc module."""

from __future__ import annotations


class LossyDCError(Exception):
    """Base class for all package errors."""


class TopologyError(LossyDCError):
    """Network graph is disconnected or otherwise malformed."""


class NonInductiveBranchError(LossyDCError):
    """A branch has a non-positive susceptance weight (or negative conductance)."""


class CaseSyntaxError(LossyDCError):
    """A case file could not be parsed."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class IndefiniteMatrixError(LossyDCError):
    """Factorization met a non-positive pivot."""


class SingularMatrixError(LossyDCError):
    """A general (non-symmetric) factorization failed."""


class PsiOutOfRangeError(LossyDCError):
    """Some branch variable left the open interval (-1, 1)."""


class HypothesisViolationError(LossyDCError):
    """Certificate requested for a network outside its validity conditions."""


class InfeasibleCertificateError(LossyDCError):
    """Operation needs a feasible certificate but the condition fails."""


class ConvergenceError(LossyDCError):
    """An iterative solve that had to succeed did not."""
