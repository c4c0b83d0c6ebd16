"""Trivially correct reference file systems used as oracles.

ModelFS mirrors the client-visible path API with plain dicts and applies
operations sequentially; the oracle compares it against the real tree after
every step.  InoModel is the replay twin: it applies committed log records
(by inode number, so renames cost nothing) and represents "the file system
after exactly this prefix of master-commit order", which is what a recovered
crash image must equal.
"""

from __future__ import annotations

from ..errors import Exists, KucoError, NotADirectory, NotEmpty, NotFound
from ..oplog import NameOp, RenameOp, T_CREAT, T_MKDIR, T_RMDIR, T_UNLINK, WriteOp


def _parent(path: str) -> str:
    head = path.rstrip("/").rpartition("/")[0]
    return head or "/"


def _join(dirpath: str, name: str) -> str:
    return (dirpath.rstrip("/") or "") + "/" + name


class ModelFS:
    """Path-keyed in-memory file system with the same error semantics."""

    def __init__(self):
        self.dirs: set[str] = {"/"}
        self.files: dict[str, bytearray] = {}

    # -- helpers -------------------------------------------------------------

    def _check_parent(self, path: str) -> str:
        parent = _parent(path)
        if parent not in self.dirs:
            if parent in self.files:
                raise NotADirectory(parent)
            raise NotFound(parent)
        return parent

    def exists(self, path: str) -> bool:
        return path in self.dirs or path in self.files

    def children(self, dirpath: str) -> list[str]:
        prefix = dirpath.rstrip("/") + "/"
        names = []
        for p in list(self.dirs) + list(self.files):
            if p != "/" and p.startswith(prefix) and "/" not in p[len(prefix):]:
                names.append(p[len(prefix):])
        return names

    # -- operations ----------------------------------------------------------

    def creat(self, path: str):
        self._check_parent(path)
        if self.exists(path):
            raise Exists(path)
        self.files[path] = bytearray()

    def mkdir(self, path: str):
        self._check_parent(path)
        if self.exists(path):
            raise Exists(path)
        self.dirs.add(path)

    def unlink(self, path: str):
        if path not in self.files:
            raise NotFound(path)
        del self.files[path]

    def rmdir(self, path: str):
        if path == "/":
            raise KucoError("cannot remove root")
        if path not in self.dirs:
            raise NotFound(path)
        if self.children(path):
            raise NotEmpty(path)
        self.dirs.remove(path)

    def rename(self, src: str, dst: str):
        if not self.exists(src):
            raise NotFound(src)
        self._check_parent(dst)
        if self.exists(dst):
            raise Exists(dst)
        if src in self.dirs:
            sprefix = src.rstrip("/") + "/"
            if dst == src or dst.startswith(sprefix):
                raise KucoError("cannot move a directory into itself")
            moves = [(p, dst + p[len(src):]) for p in
                     list(self.dirs) + list(self.files) if
                     p == src or p.startswith(sprefix)]
            for old, new in moves:
                if old in self.dirs:
                    self.dirs.remove(old)
                    self.dirs.add(new)
                else:
                    self.files[new] = self.files.pop(old)
        else:
            self.files[dst] = self.files.pop(src)

    def write(self, path: str, offset: int, data: bytes):
        if path not in self.files:
            if path in self.dirs:
                raise NotADirectory(path)
            raise NotFound(path)
        buf = self.files[path]
        end = offset + len(data)
        if len(buf) < end:
            buf.extend(b"\x00" * (end - len(buf)))
        buf[offset:end] = data

    def read(self, path: str, offset: int, size: int) -> bytes:
        if path not in self.files:
            raise NotFound(path)
        return bytes(self.files[path][offset:offset + size])

    def stat(self, path: str) -> tuple[str, int]:
        if path in self.dirs:
            return ("DIR", 0)
        if path in self.files:
            return ("FILE", len(self.files[path]))
        raise NotFound(path)

    def readdir(self, path: str) -> list[str]:
        if path in self.files:
            raise NotADirectory(path)
        if path not in self.dirs:
            raise NotFound(path)
        return self.children(path)

    def listing(self) -> dict[str, tuple[str, int]]:
        out = {p: ("DIR", 0) for p in self.dirs}
        out.update({p: ("FILE", len(b)) for p, b in self.files.items()})
        return out


class InoModel:
    """Inode-keyed replay model for commit-order prefixes."""

    ROOT = 0

    def __init__(self):
        self.kind: dict[int, str] = {self.ROOT: "DIR"}
        self.children: dict[int, dict[bytes, int]] = {self.ROOT: {}}
        self.data: dict[int, bytearray] = {}

    def apply(self, rec, data: bytes | None = None):
        """Apply one committed record; writes carry their journaled bytes."""
        if isinstance(rec, NameOp) and rec.etype in (T_CREAT, T_MKDIR):
            kind = "DIR" if rec.etype == T_MKDIR else "FILE"
            self.kind[rec.ino] = kind
            self.children[rec.parent][rec.name_b] = rec.ino
            if kind == "DIR":
                self.children[rec.ino] = {}
            else:
                self.data[rec.ino] = bytearray()
        elif isinstance(rec, NameOp) and rec.etype in (T_UNLINK, T_RMDIR):
            del self.children[rec.parent][rec.name_b]
            self.kind.pop(rec.ino, None)
            self.children.pop(rec.ino, None)
            self.data.pop(rec.ino, None)
        elif isinstance(rec, RenameOp):
            del self.children[rec.src_parent][rec.src_name_b]
            self.children[rec.dst_parent][rec.dst_name_b] = rec.ino
        elif isinstance(rec, WriteOp):
            assert data is not None and len(data) == rec.size, \
                "journaled write bytes missing"
            buf = self.data[rec.ino]
            end = rec.offset + rec.size
            if len(buf) < end:
                buf.extend(b"\x00" * (end - len(buf)))
            buf[rec.offset:end] = data
        else:
            raise ValueError(rec)

    def listing(self) -> dict[str, tuple[str, int]]:
        out: dict[str, tuple[str, int]] = {}
        contents = self.contents_by_path()
        for path, ino in self._paths():
            if self.kind[ino] == "DIR":
                out[path] = ("DIR", 0)
            else:
                out[path] = ("FILE", len(contents[path]))
        return out

    def _paths(self):
        stack = [("/", self.ROOT)]
        while stack:
            path, ino = stack.pop()
            yield path, ino
            if self.kind.get(ino) == "DIR":
                for name_b, child in self.children[ino].items():
                    stack.append((_join(path, name_b.decode(
                        errors="surrogateescape")), child))

    def contents_by_path(self) -> dict[str, bytes]:
        out = {}
        for path, ino in self._paths():
            if self.kind[ino] == "FILE":
                out[path] = bytes(self.data[ino])
        return out
