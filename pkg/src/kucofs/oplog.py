"""Append-only persistent operation log, checkpointing, and recovery replay.

Entry layout (little-endian, 8-byte aligned start):

    seq u64 | type u8 | len u16 | payload (len bytes) | crc32c u32 | pad to 8

A batch of entries is written back-to-back, flushed as one span, and made
durable with a single fence; a second fence persists the tail pointer.  The
log is the sole recovery source between checkpoints: replay walks entries in
order and stops at the first crc mismatch or sequence break, which discards a
torn tail while keeping every fully persisted prefix.

A checkpoint serializes the volatile metadata into the *inactive* half of the
metadata segment, persists it and the page bitmap, then commits both with a
single 8-byte store that flips the active-half bit and records the checkpoint
sequence.  A crash on either side of that store recovers consistently: before
it, the old checkpoint plus full log replay; after it, the new checkpoint.
"""

from __future__ import annotations

import random
import struct
from dataclasses import dataclass, field

from . import pmem
from .blockmap import BlockMap, commit_mapping, decode_item
from .errors import (
    CorruptCheckpoint,
    CorruptSuperblock,
    LogFull,
    MetadataSegmentFull,
)
from .metadata import (
    FsState,
    Inode,
    KIND_DIR,
    KIND_FILE,
    name_key,
)
from .util import crc32c

T_CREAT = 1
T_MKDIR = 2
T_UNLINK = 3
T_RMDIR = 4
T_RENAME = 5
T_WRITE = 6

_TYPE_NAMES = {1: "CREAT", 2: "MKDIR", 3: "UNLINK", 4: "RMDIR",
               5: "RENAME", 6: "WRITE"}

_HEADER = struct.Struct("<QBH")  # seq, type, len
_CRC = struct.Struct("<I")
MAX_ENTRY = 4080
_CKPT_MAGIC = b"KCKP"


# -- record types ------------------------------------------------------------

@dataclass(frozen=True)
class NameOp:
    """CREAT / MKDIR / UNLINK / RMDIR."""
    etype: int
    ino: int
    parent: int
    mode: int
    name_b: bytes


@dataclass(frozen=True)
class RenameOp:
    etype: int
    ino: int
    src_parent: int
    dst_parent: int
    src_name_b: bytes
    dst_name_b: bytes


@dataclass(frozen=True)
class WriteOp:
    etype: int
    ino: int
    offset: int
    size: int
    version: int
    runs: tuple


def encode_payload(rec) -> bytes:
    if isinstance(rec, NameOp):
        if rec.etype in (T_CREAT, T_MKDIR):
            return struct.pack("<QQIH", rec.ino, rec.parent, rec.mode,
                               len(rec.name_b)) + rec.name_b
        return struct.pack("<QQH", rec.parent, rec.ino,
                           len(rec.name_b)) + rec.name_b
    if isinstance(rec, RenameOp):
        return (struct.pack("<QQQHH", rec.ino, rec.src_parent, rec.dst_parent,
                            len(rec.src_name_b), len(rec.dst_name_b))
                + rec.src_name_b + rec.dst_name_b)
    if isinstance(rec, WriteOp):
        head = struct.pack("<QQQQH", rec.ino, rec.offset, rec.size,
                           rec.version, len(rec.runs))
        return head + b"".join(struct.pack("<QI", p, c) for p, c in rec.runs)
    raise TypeError(rec)


def decode_payload(etype: int, payload: bytes):
    if etype in (T_CREAT, T_MKDIR):
        ino, parent, mode, nlen = struct.unpack_from("<QQIH", payload)
        name = payload[22:22 + nlen]
        return NameOp(etype, ino, parent, mode, name)
    if etype in (T_UNLINK, T_RMDIR):
        parent, ino, nlen = struct.unpack_from("<QQH", payload)
        name = payload[18:18 + nlen]
        return NameOp(etype, ino, parent, 0, name)
    if etype == T_RENAME:
        ino, sp, dp, sn, dn = struct.unpack_from("<QQQHH", payload)
        src = payload[28:28 + sn]
        dst = payload[28 + sn:28 + sn + dn]
        return RenameOp(etype, ino, sp, dp, src, dst)
    if etype == T_WRITE:
        ino, offset, size, version, nruns = struct.unpack_from("<QQQQH", payload)
        runs = []
        pos = 34
        for _ in range(nruns):
            p, c = struct.unpack_from("<QI", payload, pos)
            runs.append((p, c))
            pos += 12
        return WriteOp(etype, ino, offset, size, version, tuple(runs))
    raise ValueError(f"unknown entry type {etype}")


def encode_entry(seq: int, etype: int, payload: bytes) -> bytes:
    body = _HEADER.pack(seq, etype, len(payload)) + payload
    if len(body) + 4 > MAX_ENTRY:
        raise LogFull(f"entry too large: {len(body) + 4}")
    entry = body + _CRC.pack(crc32c(body))
    pad = (-len(entry)) % 8
    return entry + b"\x00" * pad


def entry_size(payload_len: int) -> int:
    raw = _HEADER.size + payload_len + 4
    return raw + (-raw) % 8


def decode_entry(buf, off: int, end: int):
    """Returns (seq, etype, payload, next_off) or None if invalid/torn."""
    if off + _HEADER.size + 4 > end:
        return None
    seq, etype, ln = _HEADER.unpack_from(buf, off)
    if etype not in _TYPE_NAMES or seq == 0:
        return None
    total = _HEADER.size + ln + 4
    if total > MAX_ENTRY or off + total > end:
        return None
    body = bytes(buf[off:off + _HEADER.size + ln])
    stored, = _CRC.unpack_from(buf, off + _HEADER.size + ln)
    if crc32c(body) != stored:
        return None
    payload = body[_HEADER.size:]
    return seq, etype, payload, off + total + (-total) % 8


class OpLog:
    """The live log manager; all mutation is master-only."""

    def __init__(self, region: pmem.Region):
        self.region = region
        self.seg = region.segments["oplog"]
        self.head = region.read_u64(pmem.SB_LOG_HEAD)
        self.tail = region.read_u64(pmem.SB_LOG_TAIL)

    @property
    def remaining(self) -> int:
        return self.seg.length - self.tail

    @property
    def fill_fraction(self) -> float:
        return self.tail / self.seg.length

    def fits(self, encoded_len: int) -> bool:
        return encoded_len <= self.remaining

    def append_batch(self, entries: list[bytes]) -> None:
        """Persist encoded entries with one fence, then the tail with another."""
        total = sum(len(e) for e in entries)
        if total > self.remaining:
            raise LogFull(f"{total} bytes, {self.remaining} free")
        region = self.region
        start = self.seg.offset + self.tail
        pos = start
        for e in entries:
            region.store(pos, e)
            pos += len(e)
        region.flush(start, total)
        region.fence()
        self.tail += total
        region.store_u64(pmem.SB_LOG_TAIL, self.tail)
        region.flush(pmem.SB_LOG_TAIL, 8)
        region.fence()

    def reset(self):
        self.head = 0
        self.tail = 0
        self.region.store_u64(pmem.SB_LOG_HEAD, 0)
        self.region.store_u64(pmem.SB_LOG_TAIL, 0)
        self.region.persist_range(pmem.SB_LOG_HEAD, 16)


# -- checkpoint serialization -------------------------------------------------

def serialize_checkpoint(state: FsState, seq: int) -> bytes:
    parts = []
    live = [ino for ino in state.table.slots if ino is not None]
    for inode in live:
        rec = struct.pack("<QBIQQQ", inode.ino, inode.kind, inode.mode,
                          inode.generation, inode.size, inode.mtime)
        if inode.kind == KIND_DIR:
            entries = inode.dir_list.live_entries()
            rec += struct.pack("<I", len(entries))
            for key, name_b, ino in entries:
                rec += struct.pack("<QQH", key, ino, len(name_b)) + name_b
        else:
            npages = (inode.size + pmem.PAGE_SIZE - 1) // pmem.PAGE_SIZE
            items = [inode.block_map.get_raw(i) for i in range(npages)]
            rec += struct.pack("<I", len(items))
            for v in items:
                rec += struct.pack("<III", v & 0xFFFFFFFF,
                                   (v >> 32) & 0xFFFFFFFF, (v >> 64) & 0xFFFFFFFF)
        parts.append(rec)
    body = b"".join(parts)
    header = _CKPT_MAGIC + struct.pack("<QII", seq, len(live), len(body))
    blob = header + body
    return blob + _CRC.pack(crc32c(blob))


def load_checkpoint(view, offset: int, tower_seed: int) -> tuple[FsState, int]:
    """Rebuild volatile metadata from a checkpoint blob; returns (state, seq)."""
    if bytes(view[offset:offset + 4]) != _CKPT_MAGIC:
        raise CorruptCheckpoint("bad checkpoint magic")
    seq, count, body_len = struct.unpack_from("<QII", view, offset + 4)
    total = 4 + 16 + body_len
    blob = bytes(view[offset:offset + total])
    stored, = _CRC.unpack_from(view, offset + total)
    if crc32c(blob) != stored:
        raise CorruptCheckpoint("checkpoint crc mismatch")
    state = FsState(rng=random.Random(tower_seed))
    pos = offset + 20
    pending_dirs = []
    for _ in range(count):
        ino, kind, mode, gen, size, mtime = struct.unpack_from("<QBIQQQ", view, pos)
        pos += 37
        inode = Inode(ino, kind, mode, gen, state.rng, state.arena)
        inode.size = size
        inode.mtime = mtime
        state.table.install_at(ino, inode)
        if kind == KIND_DIR:
            nent, = struct.unpack_from("<I", view, pos)
            pos += 4
            entries = []
            for _ in range(nent):
                key, child, nlen = struct.unpack_from("<QQH", view, pos)
                pos += 18
                name_b = bytes(view[pos:pos + nlen])
                pos += nlen
                entries.append((key, name_b, child))
            pending_dirs.append((inode, entries))
        else:
            nitems, = struct.unpack_from("<I", view, pos)
            pos += 4
            max_v = 0
            for i in range(nitems):
                lo, mid, hi = struct.unpack_from("<III", view, pos)
                pos += 12
                value = lo | (mid << 32) | (hi << 64)
                if value:
                    inode.block_map.set_raw(i, value)
                    max_v = max(max_v, decode_item(value)[1])
            inode.max_version = max_v
    for inode, entries in pending_dirs:
        sl = inode.dir_list
        for key, name_b, child in entries:
            update, _ = sl.search(key, name_b)
            sl.insert_at(update, key, name_b, child)
    state.table.rebuild_free_list()
    return state, seq


def checkpoint(region: pmem.Region, log: OpLog, allocator: pmem.PageAllocator,
               state: FsState) -> int:
    """Persist volatile metadata + bitmap, flip the indicator, truncate the log."""
    seq = state.next_seq - 1
    blob = serialize_checkpoint(state, seq)
    seg = region.segments["metadata"]
    half_len = seg.length // 2
    if len(blob) > half_len:
        raise MetadataSegmentFull(f"checkpoint {len(blob)}B > half {half_len}B")
    active, _ = region.read_ckpt_word()
    target = 1 - active
    off = seg.offset + target * half_len
    region.store(off, blob)
    region.flush(off, len(blob))
    region.fence()
    allocator.persist_bitmap()
    region.fence()
    region.write_ckpt_word(target, seq)  # single 8-byte commit point
    log.reset()
    return seq


# -- recovery ----------------------------------------------------------------

@dataclass
class RecoveredState:
    state: FsState
    segments: dict
    data_pages: int
    applied_seq: int
    referenced: set[int] = field(default_factory=set)
    double_referenced: set[int] = field(default_factory=set)
    bitmap_reclaimed: int = 0
    replayed: int = 0

    def free_pages(self) -> set[int]:
        all_pages = set(range(1, self.data_pages))
        return all_pages - self.referenced


def _parse_superblock(view) -> tuple[dict, int]:
    if bytes(view[pmem.SB_MAGIC:pmem.SB_MAGIC + 4]) != pmem.MAGIC:
        raise CorruptSuperblock("bad magic")
    fmt, = struct.unpack_from("<I", view, pmem.SB_FORMAT)
    if fmt != pmem.FORMAT_VERSION:
        raise CorruptSuperblock(f"format {fmt}")
    total, = struct.unpack_from("<Q", view, pmem.SB_TOTAL_SIZE)
    if total != len(view):
        raise CorruptSuperblock("size mismatch")
    segs = {}
    for i, name in enumerate(("superblock", "metadata", "oplog", "bitmap", "data")):
        off, length = struct.unpack_from("<QQ", view, pmem.SB_SEGTABLE + 16 * i)
        segs[name] = pmem.Segment(off, length)
    data_pages, = struct.unpack_from("<Q", view, pmem.SB_DATA_PAGES)
    return segs, data_pages


def recover(image, tower_seed: int = 0x5EED) -> RecoveredState:
    """Rebuild volatile state from a crash image; never mutates the image.

    Loads the active checkpoint, replays valid log entries with
    seq > checkpoint_seq in order, stops at the first torn or out-of-sequence
    entry, and rebuilds the free list as everything not referenced by a live
    block map (which also reclaims pages that were leased but never
    committed).
    """
    view = memoryview(image)
    segs, data_pages = _parse_superblock(view)
    word, = struct.unpack_from("<Q", view, pmem.SB_CKPT_WORD)
    active, ckpt_seq = word >> 63, word & ((1 << 63) - 1)
    half_len = segs["metadata"].length // 2
    state, blob_seq = load_checkpoint(
        view, segs["metadata"].offset + active * half_len, tower_seed)
    if blob_seq != ckpt_seq:
        raise CorruptCheckpoint(
            f"indicator seq {ckpt_seq} != checkpoint blob seq {blob_seq}")

    log_head, = struct.unpack_from("<Q", view, pmem.SB_LOG_HEAD)
    seg = segs["oplog"]
    off = seg.offset + log_head
    end = seg.offset + seg.length
    applied = ckpt_seq
    expected = None
    replayed = 0
    while True:
        dec = decode_entry(view, off, end)
        if dec is None:
            break
        seq, etype, payload, next_off = dec
        if seq <= ckpt_seq:
            if expected is not None:
                break  # stale residue after the live chain: stop
            off = next_off
            continue  # leading entries already covered by the checkpoint
        if expected is not None and seq != expected:
            break
        if expected is None and seq != ckpt_seq + 1:
            break  # the chain must continue exactly where the checkpoint ended
        _replay(state, decode_payload(etype, payload))
        applied = seq
        expected = seq + 1
        replayed += 1
        off = next_off
    state.next_seq = applied + 1

    referenced: set[int] = set()
    double: set[int] = set()
    for inode in state.table.slots:
        if inode is None or inode.kind != KIND_FILE:
            continue
        npages = (inode.size + pmem.PAGE_SIZE - 1) // pmem.PAGE_SIZE
        for _, page in inode.block_map.iter_pages(npages):
            if page in referenced:
                double.add(page)
            referenced.add(page)

    marked = _read_bitmap(view, segs, data_pages)
    reclaimed = len(marked - referenced - {0})
    return RecoveredState(state=state, segments=segs, data_pages=data_pages,
                          applied_seq=applied, referenced=referenced,
                          double_referenced=double, bitmap_reclaimed=reclaimed,
                          replayed=replayed)


def _read_bitmap(view, segs, data_pages) -> set[int]:
    base = segs["bitmap"].offset
    marked = set()
    for p in range(data_pages):
        if view[base + (p >> 3)] & (1 << (p & 7)):
            marked.add(p)
    return marked


def _replay(state: FsState, rec):
    table = state.table
    if isinstance(rec, NameOp) and rec.etype in (T_CREAT, T_MKDIR):
        parent = table.get(rec.parent)
        kind = KIND_DIR if rec.etype == T_MKDIR else KIND_FILE
        gen = 1
        if rec.ino < len(table.gen_by_slot):
            gen = table.gen_by_slot[rec.ino] + 1
        inode = Inode(rec.ino, kind, rec.mode, gen, state.rng, state.arena)
        table.install_at(rec.ino, inode)
        key = name_key(rec.name_b)
        update, existing = parent.dir_list.search(key, rec.name_b)
        if existing is not None:
            raise CorruptCheckpoint(
                f"replayed creat of existing name {rec.name_b!r}")
        parent.dir_list.insert_at(update, key, rec.name_b, rec.ino)
    elif isinstance(rec, NameOp):
        parent = table.get(rec.parent)
        key = name_key(rec.name_b)
        update, node = parent.dir_list.search(key, rec.name_b)
        if node is None:
            raise CorruptCheckpoint(f"replayed unlink of missing {rec.name_b!r}")
        node.dirty = True
        parent.dir_list.unlink(node, update)
        state.arena.release(node.arena_idx)
        victim = table.get(rec.ino)
        if victim is not None:
            if victim.dir_list is not None:
                state.arena.release(victim.dir_list.head.arena_idx)
            table.retire_slot(rec.ino)
    elif isinstance(rec, RenameOp):
        src_parent = table.get(rec.src_parent)
        dst_parent = table.get(rec.dst_parent)
        skey = name_key(rec.src_name_b)
        dkey = name_key(rec.dst_name_b)
        update, node = src_parent.dir_list.search(skey, rec.src_name_b)
        if node is None:
            raise CorruptCheckpoint(f"replayed rename of missing {rec.src_name_b!r}")
        dst_update, existing = dst_parent.dir_list.search(dkey, rec.dst_name_b)
        if existing is not None:
            raise CorruptCheckpoint(
                f"replayed rename onto existing {rec.dst_name_b!r}")
        dst_parent.dir_list.insert_at(dst_update, dkey, rec.dst_name_b, rec.ino,
                                      dirty0=True)
        node.dirty = True
        # re-search: the destination insert may have shifted predecessors
        update, _ = src_parent.dir_list.search(skey, rec.src_name_b)
        src_parent.dir_list.unlink(node, update)
        state.arena.release(node.arena_idx)
        _, dst_node = dst_parent.dir_list.search(dkey, rec.dst_name_b)
        dst_node.dirty = False
    elif isinstance(rec, WriteOp):
        inode = table.get(rec.ino)
        if inode is None or inode.kind != KIND_FILE:
            raise CorruptCheckpoint(f"replayed write to bad ino {rec.ino}")
        pages = []
        for p, c in rec.runs:
            pages.extend(range(p, p + c))
        commit_mapping(inode.block_map, rec.offset // pmem.PAGE_SIZE, pages,
                       rec.version)
        inode.size = max(inode.size, rec.offset + rec.size)
        inode.mtime = max(inode.mtime, 0)
        inode.max_version = max(inode.max_version, rec.version)
    else:
        raise ValueError(rec)
