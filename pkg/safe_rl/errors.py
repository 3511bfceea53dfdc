"""
Exception hierarchy for the safe RL toolkit.
"""


class SafeRLError(Exception):
    """Base class for all errors raised by the toolkit."""


class SolverError(SafeRLError):
    """Raised by the active-set solver."""


class Infeasible(SolverError):
    """The constraint set is empty (or a hull does not span the space)."""


class Unbounded(SolverError):
    """The objective decreases without bound along a feasible ray."""


class MaxIterations(SolverError):
    """The active-set loop hit its iteration cap."""


class SingularKkt(SolverError):
    """The KKT matrix of the optimal active set cannot be factorized."""


class WeakActivation(SafeRLError):
    """Strict complementarity fails at the solution; sensitivities are undefined."""


class UnstableClosedLoop(SafeRLError):
    """The error feedback A - BK is not Schur stable."""


class NotFinitelyDetermined(SafeRLError):
    """Finite determination of the terminal set exceeded its cap."""


class EmptyTerminalSet(SafeRLError):
    """The tightening consumed the whole terminal set."""


class NotStabilizable(SafeRLError):
    """The Riccati iteration diverged."""


class DimensionMismatch(SafeRLError, ValueError):
    """Array shapes do not agree with the configured system."""


class NoDescent(SafeRLError):
    """The update line search could not decrease the TD residual."""


class EpisodeAborted(SafeRLError):
    """A closed-loop episode hit an unrecoverable solver failure."""
