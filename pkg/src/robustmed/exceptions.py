"""Exception hierarchy shared by all estimation modules."""

from __future__ import annotations


class RobustMedError(Exception):
    """Base class for all package errors."""


class DomainError(RobustMedError, ValueError):
    """Parameters violate the constraints of their model family."""


class NotEstimableError(RobustMedError, ValueError):
    """The requested dose does not exist for the given parameters."""


class NoSolutionError(NotEstimableError):
    """A shape value lies outside the attainable range of the shape."""


class RankDeficientError(RobustMedError):
    """The regression design is singular at every candidate parameter."""


class SingularInformationError(RobustMedError):
    """An information or bread matrix cannot be inverted reliably."""


class OutOfRegionError(RobustMedError):
    """Parameters lie outside the region where the weight is defined."""


class ProfilingError(RobustMedError):
    """Profile-likelihood endpoints could not be located."""


class BootstrapError(RobustMedError):
    """Too many bootstrap refits failed."""
