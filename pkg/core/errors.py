# core/errors.py
"""Exception hierarchy shared by every package.

Each class carries the exit code the CLI maps it to.
"""


class DataPlaneError(Exception):
    exit_code = 1


# -----------------------------
# Input and configuration
# -----------------------------

class InvalidInputError(DataPlaneError, ValueError):
    pass


class UnknownAxisError(InvalidInputError):
    pass


class BatchShapeError(InvalidInputError):
    pass


class SequenceTooLongError(InvalidInputError):
    pass


class InvalidConfigError(DataPlaneError, ValueError):
    exit_code = 2


class OutOfRangeError(DataPlaneError, IndexError):
    pass


class NotFoundError(DataPlaneError, KeyError):
    def __str__(self):
        # KeyError quotes its argument; keep the plain message
        return str(self.args[0]) if self.args else ""


# -----------------------------
# Capacity
# -----------------------------

class CapacityError(DataPlaneError):
    exit_code = 3

    def __init__(self, message: str, source_id=None):
        super().__init__(message)
        self.source_id = source_id


# -----------------------------
# Integrity
# -----------------------------

class IntegrityError(DataPlaneError):
    exit_code = 4


class DuplicateBindingError(IntegrityError):
    pass


class IncompletePlanError(IntegrityError):
    pass


class StateRegressionError(IntegrityError):
    pass


class CycleError(IntegrityError):
    pass


class MissingSampleError(IntegrityError):
    pass


class MalformedPayloadError(IntegrityError):
    pass


class MalformedRecordError(IntegrityError):
    pass


class ChecksumMismatchError(IntegrityError):
    pass


# -----------------------------
# Runtime
# -----------------------------

class LoaderTimeoutError(DataPlaneError):
    def __init__(self, message: str, loader_id: str = ""):
        super().__init__(message)
        self.loader_id = loader_id


class StorageError(DataPlaneError, OSError):
    pass


class MailboxClosedError(DataPlaneError):
    pass


class QueueStarvedError(DataPlaneError):
    """A client asked for data before the next plan cycle filled its queue."""
