"""Exception types and the wire-level status codes they map to."""

from enum import IntEnum


class KucoError(Exception):
    pass


class ProtectionFault(KucoError):
    """A store was refused by the permission controller; nothing was written."""

    def __init__(self, actor, addr: int, reason: str):
        super().__init__(f"protection fault: actor={actor} addr={addr:#x} {reason}")
        self.actor = actor
        self.addr = addr
        self.reason = reason


REASON_METADATA = "metadata_region"
REASON_OPLOG = "oplog_region"
REASON_READ_ONLY = "read_only_page"
REASON_FOREIGN = "foreign_owner"


class OutOfSpace(KucoError):
    pass


class LogFull(KucoError):
    pass


class CorruptSuperblock(KucoError):
    pass


class CorruptCheckpoint(KucoError):
    pass


class MetadataSegmentFull(KucoError):
    pass


class FileTooLarge(KucoError):
    pass


class InconsistentRead(KucoError):
    """snapshot_read exhausted its retry budget; caller should fall back."""


class NotFound(KucoError):
    pass


class NotADirectory(KucoError):
    pass


class NotEmpty(KucoError):
    pass


class Exists(KucoError):
    pass


class BadFd(KucoError):
    pass


class StaleHandle(KucoError):
    pass


class LeaseViolation(KucoError):
    pass


class Status(IntEnum):
    """Response status codes carried in the 64-byte response slot."""

    OK = 0
    NOT_FOUND = 1
    NOT_A_DIRECTORY = 2
    NOT_EMPTY = 3
    EXISTS = 4
    BAD_FD = 5
    STALE_HANDLE = 6
    LEASE_VIOLATION = 7
    OUT_OF_SPACE = 8
    LOG_FULL = 9
    INVALID = 10


_STATUS_TO_EXC = {
    Status.NOT_FOUND: NotFound,
    Status.NOT_A_DIRECTORY: NotADirectory,
    Status.NOT_EMPTY: NotEmpty,
    Status.EXISTS: Exists,
    Status.BAD_FD: BadFd,
    Status.STALE_HANDLE: StaleHandle,
    Status.LEASE_VIOLATION: LeaseViolation,
    Status.OUT_OF_SPACE: OutOfSpace,
    Status.LOG_FULL: LogFull,
}

_EXC_TO_STATUS = {exc: st for st, exc in _STATUS_TO_EXC.items()}


def status_for(exc: Exception) -> Status:
    return _EXC_TO_STATUS.get(type(exc), Status.INVALID)


def raise_for(status: int, context: str = ""):
    exc = _STATUS_TO_EXC.get(Status(status), KucoError)
    raise exc(context or Status(status).name)
