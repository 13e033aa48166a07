"""Error types shared by every app.

Management commands map ``UsageError`` and ``DomainError`` to exit code 2 and
every other ``MiptError`` to exit code 1.
"""


class MiptError(Exception):
    """Base class for all decoder errors"""


class DomainError(MiptError, ValueError):
    """An argument lies outside the domain of the operation"""


class UsageError(MiptError):
    """An API or graph was used in a way it does not support"""


class ResourceError(MiptError):
    """The request would exceed a memory or enumeration guard"""


class InternalConsistencyError(MiptError):
    """A numerical invariant was violated beyond tolerance"""


class FormatError(MiptError):
    """A dataset or checkpoint file is malformed"""


class TrainingError(MiptError):
    """Optimisation produced non-finite values"""


class ModelError(MiptError):
    """A forward pass produced non-finite activations"""


class StatisticsError(MiptError):
    """A statistic is undefined for the given sample"""


class RunAbortedError(MiptError):
    """Too many consecutive per-point failures; the run gave up"""
