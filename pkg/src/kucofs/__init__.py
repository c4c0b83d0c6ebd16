"""kucofs: a user/master collaborative persistent-memory file system emulation."""

from .errors import (
    BadFd,
    Exists,
    KucoError,
    LeaseViolation,
    LogFull,
    NotADirectory,
    NotEmpty,
    NotFound,
    OutOfSpace,
    ProtectionFault,
    StaleHandle,
)
from .fs import KucoFS
from .master import MasterConfig
from .pmem import RegionConfig
from .ulib import O_CREAT, O_EXCL, ClientHandle

__version__ = "0.1.0"

__all__ = [
    "KucoFS", "ClientHandle", "MasterConfig", "RegionConfig",
    "O_CREAT", "O_EXCL",
    "KucoError", "ProtectionFault", "NotFound", "NotADirectory", "NotEmpty",
    "Exists", "BadFd", "StaleHandle", "LeaseViolation", "OutOfSpace", "LogFull",
]
