"""Client-side library handle.

A ClientHandle owns one message ring, a pool of pre-leased writable pages,
and a private fd table.  Reads, stat and readdir run entirely in the client:
pathnames resolve against the shared metadata arena and file pages are copied
straight out of the region after a versioned-snapshot check, with zero
messages to the master.  Writes copy into leased pages (copy-on-write), flush
and fence them, then send a single WRITE_COMMIT carrying the range-lock
version and the extent list.  All namespace mutation is delegated through the
ring with pre-resolved handles piggybacked, unless the file system runs with
index offloading disabled, in which case raw paths are sent instead.

File descriptors are plain integers starting at 2**20 so they can never be
confused with kernel descriptors.
"""

from __future__ import annotations

import struct
from collections import deque
from contextlib import contextmanager
from dataclasses import dataclass

from . import pmem, wire
from .blockmap import (
    DEFAULT_RETRY_CAP,
    ReadStats,
    gather_bytes,
    snapshot_read,
)
from .errors import (
    BadFd,
    Exists,
    InconsistentRead,
    KucoError,
    NotADirectory,
    NotFound,
    OutOfSpace,
    StaleHandle,
    Status,
    raise_for,
)
from .metadata import (
    CompCounter,
    EpochManager,
    KIND_DIR,
    KIND_FILE,
    ResolveResult,
    resolve_path,
)

PAGE_SIZE = pmem.PAGE_SIZE
FD_BASE = 1 << 20

O_CREAT = 0o100
O_EXCL = 0o200


@dataclass
class FdEntry:
    ino: int
    generation: int
    cursor: int = 0


@dataclass
class StatResult:
    ino: int
    kind: str
    size: int
    mtime: int
    mode: int


class ClientHandle:
    def __init__(self, fs, retry_cap: int = DEFAULT_RETRY_CAP):
        self.fs = fs
        self.seat = fs.master.new_seat()
        self.cid = self.seat.cid
        self.ring = self.seat.ring
        self.key = b""
        self.pool: deque[int] = deque()
        self.fd_table: dict[int, FdEntry] = {}
        self._next_fd = FD_BASE
        self._seq = 0
        self.msgs_sent = 0
        self.retry_cap = retry_cap
        self.read_stats = ReadStats()
        self.comp = CompCounter()
        self.fallback_reads = 0
        self.write_log: dict | None = None  # harness hook: (ino, version) -> bytes
        status, value = self._call(wire.OP_REGISTER, 0, b"")
        if status != Status.OK:
            raise_for(status, "register")
        self.key = value[:16]

    # -- messaging -----------------------------------------------------------

    def _call(self, opcode: int, flags: int, payload: bytes) -> tuple[int, bytes]:
        self._seq += 1
        seq = self._seq
        slot = self.ring.post(opcode, flags, seq, payload)
        self.msgs_sent += 1
        master = self.fs.master
        if master.running:
            master.notify()
            while not self.ring.response_ready(slot):
                self.ring.resp_ready.wait(0.0005)
                self.ring.resp_ready.clear()
        else:
            while not self.ring.response_ready(slot):
                master.poll_once()
        return self.ring.take_response(slot, seq)

    def _call_ok(self, opcode: int, flags: int, payload: bytes,
                 context: str = "") -> bytes:
        status, value = self._call(opcode, flags, payload)
        if status != Status.OK:
            raise_for(status, context)
        return value

    @property
    def _offload(self) -> bool:
        return self.fs.master.config.offload_index

    # -- EBR bracketing ------------------------------------------------------

    @contextmanager
    def _ebr(self):
        rec = self.seat.epoch_rec
        epochs = self.fs.state.epochs
        if rec is not None:
            EpochManager.enter(rec, epochs)
        try:
            yield
        finally:
            if rec is not None:
                EpochManager.exit(rec)

    def _resolve(self, path: str) -> ResolveResult:
        return resolve_path(self.fs.state.table, path, self.comp,
                            self.fs.state.arena)

    # -- scratch / pool management -------------------------------------------

    def _ensure_pool(self, need: int):
        cfg = self.fs.master.config
        while len(self.pool) < need:
            want = max(need - len(self.pool), cfg.lease_chunk_pages)
            want = min(want, 4096)
            value = self._call_ok(wire.OP_LEASE_PAGES, 0,
                                  wire.LEASE_BODY.pack(want), "lease")
            nruns, = struct.unpack_from("<H", value)
            for page, count in wire.unpack_runs(value, 2, nruns):
                self.pool.extend(range(page, page + count))

    def _scratch_write(self, data: bytes) -> int:
        """Stage oversized request fields in a leased page; stays in the pool."""
        self._ensure_pool(1)
        page = self.pool[0]
        self.fs.region.checked_store(self.cid, self.fs.region.page_addr(page), data)
        return page

    # -- namespace helpers ----------------------------------------------------

    def _pack_creat(self, res: ResolveResult, name_b: bytes, mode: int) -> bytes:
        pred = res.predecessor
        scratch = 0
        inline = name_b
        fixed = wire.CREAT_HEAD.size + wire.TOWER_STRUCT.size
        if fixed + len(name_b) > wire.PAYLOAD_MAX:
            scratch = self._scratch_write(name_b)
            inline = b""
        return (wire.CREAT_HEAD.pack(res.parent.ino, res.parent.generation, mode,
                                     pred.arena_idx, pred.key & ((1 << 64) - 1),
                                     pred.ino, 1 if pred.is_head else 0,
                                     len(name_b), scratch, res.arena_epoch)
                + wire.pack_tower(res.tower_hints) + inline)

    def _pack_path(self, mode: int, one: bytes, two: bytes = b"") -> bytes:
        blob = one + two
        scratch = 0
        inline = blob
        if wire.PATH_HEAD.size + len(blob) > wire.PAYLOAD_MAX:
            scratch = self._scratch_write(blob)
            inline = b""
        return wire.PATH_HEAD.pack(mode, len(one), len(two), scratch) + inline

    @staticmethod
    def _basename(path: str) -> bytes:
        return path.rstrip("/").rpartition("/")[2].encode()

    def _creat_like(self, opcode: int, path: str, mode: int, flags: int) -> bytes:
        if not self._offload:
            return self._call_ok(opcode, flags | wire.FLAG_NO_HINT,
                                 self._pack_path(mode, path.encode()), path)
        with self._ebr():
            res = self._resolve(path)
            payload = self._pack_creat(res, self._basename(path), mode)
        return self._call_ok(opcode, flags, payload, path)

    # -- public API ------------------------------------------------------------

    def open(self, path: str, flags: int = 0, mode: int = 0o644) -> int:
        if flags & O_CREAT:
            if not self._offload:
                wflags = wire.FLAG_NO_HINT | wire.FLAG_OPEN
                if flags & O_EXCL:
                    wflags |= wire.FLAG_EXCL
                value = self._call_ok(wire.OP_CREAT, wflags,
                                      self._pack_path(mode, path.encode()), path)
            else:
                with self._ebr():
                    res = self._resolve(path)
                    payload = self._pack_creat(res, self._basename(path), mode)
                wflags = wire.FLAG_OPEN
                if flags & O_EXCL:
                    wflags |= wire.FLAG_EXCL
                value = self._call_ok(wire.OP_CREAT, wflags, payload, path)
        else:
            with self._ebr():
                res = self._resolve(path)
                kind = res.target_inode.kind if res.target_inode else None
            if res.target is None:
                raise NotFound(path)  # resolved client-side; no message at all
            if kind == KIND_DIR:
                raise NotADirectory(path)
            value = self._call_ok(
                wire.OP_OPEN, 0,
                wire.OPEN_BODY.pack(res.target.ino, res.target.generation, flags),
                path)
        ino, gen = struct.unpack_from("<QQ", value)
        fd = self._next_fd
        self._next_fd += 1
        self.fd_table[fd] = FdEntry(ino, gen)
        return fd

    def close(self, fd: int):
        ent = self.fd_table.pop(fd, None)
        if ent is None:
            raise BadFd(str(fd))
        self._call_ok(wire.OP_CLOSE, 0,
                      wire.CLOSE_BODY.pack(ent.ino, ent.generation, 0), str(fd))

    def seek(self, fd: int, pos: int):
        self._fd(fd).cursor = pos

    def _fd(self, fd: int) -> FdEntry:
        ent = self.fd_table.get(fd)
        if ent is None:
            raise BadFd(str(fd))
        return ent

    def _inode_for(self, ent: FdEntry):
        inode = self.fs.state.table.get(ent.ino)
        if inode is None or inode.freed or inode.dirty \
                or inode.generation != ent.generation:
            raise StaleHandle(f"ino {ent.ino}")
        return inode

    # -- data path -------------------------------------------------------------

    def write(self, fd: int, data: bytes) -> int:
        ent = self._fd(fd)
        n = self.pwrite(fd, data, ent.cursor)
        ent.cursor += n
        return n

    def pwrite(self, fd: int, data: bytes, offset: int) -> int:
        ent = self._fd(fd)
        size = len(data)
        if size == 0:
            return 0
        inode = self._inode_for(ent)
        ring = inode.lock_ring
        if ring is None:
            raise StaleHandle("file has no lock ring (not open?)")
        region = self.fs.region
        first = offset // PAGE_SIZE
        last = (offset + size - 1) // PAGE_SIZE
        need = last - first + 1
        self._ensure_pool(need)
        cfg = self.fs.master.config
        version, _slot = ring.acquire(offset, size, self.key, cfg.lease_ns)
        dest = [self.pool.popleft() for _ in range(need)]
        committed = False
        try:
            self._cow_fill(inode, dest, data, offset, size, first, last)
            runs = _to_runs(dest)
            for page, count in runs:
                region.flush(region.page_addr(page), count * PAGE_SIZE)
            region.fence()
            if len(runs) > wire.MAX_INLINE_RUNS:
                blob = struct.pack("<H", len(runs)) + wire.pack_runs(runs)
                scratch = self._scratch_write(blob)
                payload = wire.WRITE_HEAD.pack(ent.ino, ent.generation, offset,
                                               size, version, len(runs), scratch)
            else:
                payload = wire.WRITE_HEAD.pack(ent.ino, ent.generation, offset,
                                               size, version, len(runs),
                                               0) + wire.pack_runs(runs)
            status, _ = self._call(wire.OP_WRITE_COMMIT, 0, payload)
            if status != Status.OK:
                raise_for(status, f"write {size}B @{offset}")
            committed = True  # the master released the range lock for us
            if self.write_log is not None:
                self.write_log[(ent.ino, version)] = bytes(data)
            return size
        finally:
            if not committed:
                self.pool.extend(dest)  # still leased to us; reuse later
                ring.release(version)

    def _cow_fill(self, inode, dest: list[int], data: bytes, offset: int,
                  size: int, first: int, last: int):
        """Copy old boundary bytes + new data into the destination pages.

        Interior pages are whole-page overwrites taken straight from the user
        buffer; boundary pages merge with the committed page (zeros for
        holes).  Runs inside an EBR section so the old pages cannot be
        recycled mid-copy.
        """
        region = self.fs.region
        cid = self.cid
        data_off = region.segments["data"].offset
        with self._ebr():
            for i, idx in enumerate(range(first, last + 1)):
                page_start = idx * PAGE_SIZE
                a = max(offset, page_start)
                b = min(offset + size, page_start + PAGE_SIZE)
                addr = region.page_addr(dest[i])
                if b - a == PAGE_SIZE:
                    region.checked_store(cid, addr,
                                         data[a - offset:b - offset])
                    continue
                old_page = inode.block_map.get_raw(idx) & ((1 << 40) - 1)
                if old_page:
                    merged = bytearray(
                        region.volatile[data_off + old_page * PAGE_SIZE:
                                        data_off + (old_page + 1) * PAGE_SIZE])
                else:
                    merged = bytearray(PAGE_SIZE)
                merged[a - page_start:b - page_start] = data[a - offset:b - offset]
                region.checked_store(cid, addr, bytes(merged))

    def read(self, fd: int, size: int) -> bytes:
        ent = self._fd(fd)
        data = self.pread(fd, size, ent.cursor)
        ent.cursor += len(data)
        return data

    def pread(self, fd: int, size: int, offset: int) -> bytes:
        ent = self._fd(fd)
        if size == 0:
            return b""
        inode = self._inode_for(ent)
        region = self.fs.region
        with self._ebr():
            try:
                runs = snapshot_read(inode, offset, size, self.retry_cap,
                                     self.read_stats)
                return gather_bytes(region.volatile,
                                    region.segments["data"].offset, runs)
            except InconsistentRead:
                pass
        return self._read_fallback(ent, offset, size)

    def _read_fallback(self, ent: FdEntry, offset: int, size: int) -> bytes:
        """Master-mediated read, one page per round trip."""
        self.fallback_reads += 1
        self._ensure_pool(1)
        dest = self.pool[0]
        region = self.fs.region
        parts = []
        pos = offset
        remaining = size
        while remaining > 0:
            chunk = min(remaining, PAGE_SIZE)
            value = self._call_ok(
                wire.OP_READ_FALLBACK, 0,
                wire.READFB_BODY.pack(ent.ino, ent.generation, pos, chunk, dest))
            nbytes, = struct.unpack_from("<I", value)
            if nbytes == 0:
                break
            parts.append(region.read(region.page_addr(dest), nbytes))
            pos += nbytes
            remaining -= nbytes
            if nbytes < chunk:
                break
        return b"".join(parts)

    # -- metadata reads (never message the master) ------------------------------

    def stat(self, path: str) -> StatResult:
        with self._ebr():
            res = self._resolve(path)
            inode = res.target_inode
            if inode is None:
                raise NotFound(path)
            return StatResult(inode.ino,
                              "DIR" if inode.kind == KIND_DIR else "FILE",
                              inode.size, inode.mtime, inode.mode)

    def readdir(self, path: str) -> list[str]:
        """Names in (hash, name) order: the skip-list bottom-level order."""
        with self._ebr():
            res = self._resolve(path)
            inode = res.target_inode
            if inode is None:
                raise NotFound(path)
            if inode.kind != KIND_DIR:
                raise NotADirectory(path)
            return [d.name_b.decode(errors="surrogateescape")
                    for d in inode.dir_list.iter_live()]

    # -- namespace mutation ------------------------------------------------------

    def mkdir(self, path: str, mode: int = 0o755):
        self._creat_like(wire.OP_MKDIR, path, mode, 0)

    def creat(self, path: str, mode: int = 0o644):
        self._creat_like(wire.OP_CREAT, path, mode, 0)

    def _unlink_like(self, opcode: int, path: str):
        if not self._offload:
            self._call_ok(opcode, wire.FLAG_NO_HINT,
                          self._pack_path(0, path.encode()), path)
            return
        with self._ebr():
            res = self._resolve(path)
            if res.target is None or res.target_dentry is None:
                raise NotFound(path)
            dent = res.target_dentry
            payload = (wire.UNLINK_HEAD.pack(
                res.parent.ino, res.parent.generation, dent.arena_idx,
                dent.key, dent.ino, res.target.ino, res.target.generation)
                + wire.pack_tower(res.tower_hints))
        self._call_ok(opcode, 0, payload, path)

    def unlink(self, path: str):
        self._unlink_like(wire.OP_UNLINK, path)

    def rmdir(self, path: str):
        self._unlink_like(wire.OP_RMDIR, path)

    def rename(self, src: str, dst: str):
        if not self._offload:
            self._call_ok(wire.OP_RENAME, wire.FLAG_NO_HINT,
                          self._pack_path(0, src.encode(), dst.encode()),
                          f"{src} -> {dst}")
            return
        with self._ebr():
            sres = self._resolve(src)
            if sres.target is None or sres.target_dentry is None:
                raise NotFound(src)
            dres = self._resolve(dst)
            sdent = sres.target_dentry
            dpred = dres.predecessor
            src_b = self._basename(src)
            dst_b = self._basename(dst)
            blob = src_b + dst_b
            scratch = 0
            inline = blob
            if wire.RENAME_HEAD.size + len(blob) > wire.PAYLOAD_MAX:
                scratch = self._scratch_write(blob)
                inline = b""
            payload = wire.RENAME_HEAD.pack(
                sres.target.ino, sres.target.generation,
                sres.parent.ino, sres.parent.generation,
                sdent.arena_idx, sdent.key, sdent.ino,
                dres.parent.ino, dres.parent.generation,
                dpred.arena_idx, dpred.key & ((1 << 64) - 1), dpred.ino,
                1 if dpred.is_head else 0,
                len(src_b), len(dst_b), scratch) + inline
        self._call_ok(wire.OP_RENAME, 0, payload, f"{src} -> {dst}")

    # -- lifecycle -----------------------------------------------------------------

    def shutdown(self):
        """Return pooled pages and deregister; the handle is dead afterwards."""
        self.fd_table.clear()
        self.pool.clear()
        self._call(wire.OP_CLOSE, wire.FLAG_EXIT, wire.CLOSE_BODY.pack(0, 0, 1))


def _to_runs(pages: list[int]) -> list[tuple[int, int]]:
    runs = []
    start = prev = pages[0]
    for p in pages[1:]:
        if p != prev + 1:
            runs.append((start, prev - start + 1))
            start = p
        prev = p
    runs.append((start, prev - start + 1))
    return runs
