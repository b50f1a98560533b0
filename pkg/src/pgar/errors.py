"""Exception types shared across the package.

Every error raised on a user-facing path derives from PgarError so callers
can catch one base class. The CLI maps DataError to exit code 2 and all
other PgarError subclasses to exit code 1.
"""


class PgarError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(PgarError):
    """A run configuration is malformed or internally inconsistent."""


class ScheduleError(PgarError):
    """A guidance schedule violates a structural constraint."""


class AssemblyError(PgarError):
    """Side features cannot be assembled into the expected stage set."""


class TopologyError(PgarError):
    """A model variant combination does not describe a valid network."""


class CheckpointError(PgarError):
    """A checkpoint or weights archive is missing keys or has bad shapes."""


class DataError(PgarError):
    """A dataset root is unreadable, incomplete, or inconsistently paired."""


class TrainingError(PgarError):
    """Training must abort, e.g. a loss went non-finite."""


class InputError(PgarError):
    """A runtime tensor input violates a documented precondition."""
