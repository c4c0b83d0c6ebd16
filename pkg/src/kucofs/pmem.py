"""Emulated persistent-memory region.

The region is a flat byte space carved into five segments (superblock,
metadata pages, operation log, page bitmap, 4 KB data pages).  Stores land in
a volatile image; `flush` marks the touched 64-byte cachelines and `fence`
copies the pending lines into a second, crash-survivable image.  A crash
snapshot is therefore "whatever was fenced", optionally plus a seeded random
subset of flushed-but-unfenced lines.

Write protection is enforced in software: every store goes through
`checked_store`, which refuses client stores outside data pages the master
has made WRITABLE for that exact client.  This stands in for page-table
permission bits; `set_permission` counts one TLB-flush event per batched
call, mirroring the batched-invalidation cost model.
"""

from __future__ import annotations

import heapq
import mmap
import os
import random
import struct
import threading
from dataclasses import dataclass, field

from .errors import (
    CorruptSuperblock,
    KucoError,
    OutOfSpace,
    ProtectionFault,
    REASON_FOREIGN,
    REASON_METADATA,
    REASON_OPLOG,
    REASON_READ_ONLY,
)

PAGE_SIZE = 4096
CACHELINE = 64
MAGIC = b"KUCO"
FORMAT_VERSION = 1

MASTER = 0  # actor id reserved for the metadata master; clients are >= 1

READ_ONLY = 0
WRITABLE = 1

MIN_REGION_SIZE = 16 << 20

# Superblock field offsets (little-endian, fixed; see docs/format.md).
SB_MAGIC = 0
SB_FORMAT = 4
SB_TOTAL_SIZE = 8
SB_PAGE_SIZE = 16
SB_CACHELINE = 20
SB_SEGTABLE = 24  # 5 segments x (offset u64, length u64)
SB_DATA_PAGES = 104
SB_CKPT_WORD = 112  # bit 63 = active metadata half, bits 0..62 = checkpoint seq
SB_LOG_HEAD = 120
SB_LOG_TAIL = 128
SB_END = 136

_SEG_ORDER = ("superblock", "metadata", "oplog", "bitmap", "data")


@dataclass(frozen=True)
class Segment:
    offset: int
    length: int

    @property
    def end(self) -> int:
        return self.offset + self.length

    def contains(self, addr: int) -> bool:
        return self.offset <= addr < self.end


@dataclass(frozen=True)
class RegionConfig:
    metadata_fraction: float = 0.125
    oplog_fraction: float = 0.125
    backing_path: str | None = None

    def validate(self):
        if self.metadata_fraction + self.oplog_fraction >= 1.0:
            raise KucoError("segment fractions must sum to < 1")


def _round_up(n: int, align: int) -> int:
    return (n + align - 1) // align * align


def _compute_layout(total_size: int, config: RegionConfig) -> tuple[dict, int]:
    sb_len = PAGE_SIZE
    meta_len = _round_up(int(total_size * config.metadata_fraction), PAGE_SIZE)
    oplog_len = _round_up(int(total_size * config.oplog_fraction), PAGE_SIZE)
    fixed = sb_len + meta_len + oplog_len
    remaining = total_size - fixed
    if remaining < 4 * PAGE_SIZE:
        raise KucoError("size too small")
    # Largest page count whose pages plus 1-bit-per-page bitmap fit.
    n = remaining // PAGE_SIZE
    while n > 0:
        bitmap_len = _round_up((n + 7) // 8, PAGE_SIZE)
        if n * PAGE_SIZE + bitmap_len <= remaining:
            break
        n -= 1
    if n < 2:
        raise KucoError("size too small")
    bitmap_len = _round_up((n + 7) // 8, PAGE_SIZE)
    segs = {
        "superblock": Segment(0, sb_len),
        "metadata": Segment(sb_len, meta_len),
        "oplog": Segment(sb_len + meta_len, oplog_len),
        "bitmap": Segment(fixed, bitmap_len),
        "data": Segment(fixed + bitmap_len, n * PAGE_SIZE),
    }
    return segs, n


class FenceRecorder:
    """Capture per-fence deltas so a crash tester can rebuild any crash image.

    Each fence record holds the (offset, bytes) runs that fence made durable
    plus, for the probabilistic policy, the pending lines as they stood just
    before the fence.
    """

    def __init__(self, capture_pending: bool = False):
        self.capture_pending = capture_pending
        self.fences: list[list[tuple[int, bytes]]] = []
        self.pending_before: list[list[tuple[int, bytes]]] = []

    def record(self, runs: list[tuple[int, bytes]], pending: list[tuple[int, bytes]]):
        self.fences.append(runs)
        if self.capture_pending:
            self.pending_before.append(pending)


class Region:
    """Byte-addressable store with explicit flush/fence persistence."""

    def __init__(self, total_size: int, config: RegionConfig, segments: dict,
                 data_pages: int, volatile: bytearray, persistent):
        self.total_size = total_size
        self.config = config
        self.segments = segments
        self.data_pages = data_pages
        self.volatile = volatile
        self.persistent = persistent
        self.pending: set[int] = set()
        self.fence_count = 0
        self.flush_count = 0
        self.flushed_lines = 0
        self.tlb_flush_events = 0
        self.protection_faults = 0
        self.recorder: FenceRecorder | None = None
        self._fence_lock = threading.Lock()
        # Software permission table for data pages; volatile, master-owned.
        self.page_mode = bytearray(data_pages)  # READ_ONLY everywhere
        self.page_owner = [0] * data_pages
        self.page_perm_epoch = [0] * data_pages

    # -- construction ------------------------------------------------------

    @classmethod
    def create(cls, total_size: int, config: RegionConfig | None = None) -> "Region":
        config = config or RegionConfig()
        config.validate()
        if total_size < MIN_REGION_SIZE:
            raise KucoError("size too small")
        segments, data_pages = _compute_layout(total_size, config)
        volatile = bytearray(total_size)
        persistent = cls._make_persistent(total_size, config)
        region = cls(total_size, config, segments, data_pages, volatile, persistent)
        region._write_superblock()
        region.flush(0, SB_END)
        region.fence()
        return region

    @staticmethod
    def _make_persistent(total_size: int, config: RegionConfig):
        if config.backing_path is None:
            return bytearray(total_size)
        fd = os.open(config.backing_path, os.O_RDWR | os.O_CREAT, 0o644)
        try:
            os.ftruncate(fd, total_size)
            return mmap.mmap(fd, total_size)
        finally:
            os.close(fd)

    @classmethod
    def from_image(cls, image: bytes | bytearray | memoryview,
                   config: RegionConfig | None = None) -> "Region":
        """Mount an existing image: volatile starts as a copy of persistent."""
        config = config or RegionConfig()
        view = memoryview(image)
        if bytes(view[SB_MAGIC:SB_MAGIC + 4]) != MAGIC:
            raise CorruptSuperblock("bad magic")
        fmt, = struct.unpack_from("<I", view, SB_FORMAT)
        if fmt != FORMAT_VERSION:
            raise CorruptSuperblock(f"unsupported format {fmt}")
        total_size, = struct.unpack_from("<Q", view, SB_TOTAL_SIZE)
        if total_size != len(view):
            raise CorruptSuperblock("size mismatch")
        segs = {}
        for i, name in enumerate(_SEG_ORDER):
            off, length = struct.unpack_from("<QQ", view, SB_SEGTABLE + 16 * i)
            segs[name] = Segment(off, length)
        data_pages, = struct.unpack_from("<Q", view, SB_DATA_PAGES)
        volatile = bytearray(view)
        persistent = cls._make_persistent(total_size, config)
        persistent[:] = view
        return cls(total_size, config, segs, data_pages, volatile, persistent)

    def _write_superblock(self):
        buf = self.volatile
        buf[SB_MAGIC:SB_MAGIC + 4] = MAGIC
        struct.pack_into("<I", buf, SB_FORMAT, FORMAT_VERSION)
        struct.pack_into("<Q", buf, SB_TOTAL_SIZE, self.total_size)
        struct.pack_into("<I", buf, SB_PAGE_SIZE, PAGE_SIZE)
        struct.pack_into("<I", buf, SB_CACHELINE, CACHELINE)
        for i, name in enumerate(_SEG_ORDER):
            seg = self.segments[name]
            struct.pack_into("<QQ", buf, SB_SEGTABLE + 16 * i, seg.offset, seg.length)
        struct.pack_into("<Q", buf, SB_DATA_PAGES, self.data_pages)
        struct.pack_into("<Q", buf, SB_CKPT_WORD, 0)
        struct.pack_into("<Q", buf, SB_LOG_HEAD, 0)
        struct.pack_into("<Q", buf, SB_LOG_TAIL, 0)

    # -- addressing --------------------------------------------------------

    def page_addr(self, page_no: int) -> int:
        return self.segments["data"].offset + page_no * PAGE_SIZE

    def page_of(self, addr: int) -> int:
        return (addr - self.segments["data"].offset) // PAGE_SIZE

    # -- stores ------------------------------------------------------------

    def checked_store(self, actor: int, addr: int, data: bytes):
        """Apply a store, or raise ProtectionFault leaving the image untouched."""
        end = addr + len(data)
        if addr < 0 or end > self.total_size:
            raise KucoError(f"store out of range: [{addr}, {end})")
        if actor != MASTER:
            data_seg = self.segments["data"]
            if addr < data_seg.offset or end > data_seg.end:
                reason = REASON_OPLOG if self.segments["oplog"].contains(addr) \
                    else REASON_METADATA
                self.protection_faults += 1
                raise ProtectionFault(actor, addr, reason)
            first = self.page_of(addr)
            last = self.page_of(end - 1)
            for p in range(first, last + 1):
                if self.page_mode[p] != WRITABLE:
                    self.protection_faults += 1
                    raise ProtectionFault(actor, addr, REASON_READ_ONLY)
                if self.page_owner[p] != actor:
                    self.protection_faults += 1
                    raise ProtectionFault(actor, addr, REASON_FOREIGN)
        self.volatile[addr:end] = data

    def store(self, addr: int, data: bytes):
        self.checked_store(MASTER, addr, data)

    def store_u64(self, addr: int, value: int):
        struct.pack_into("<Q", self.volatile, addr, value)

    def read(self, addr: int, length: int) -> bytes:
        return bytes(self.volatile[addr:addr + length])

    def read_u64(self, addr: int) -> int:
        return struct.unpack_from("<Q", self.volatile, addr)[0]

    # -- persistence -------------------------------------------------------

    def flush(self, addr: int, length: int):
        """Mark every cacheline overlapping [addr, addr+length) as pending."""
        if length <= 0:
            return
        first = addr // CACHELINE
        last = (addr + length - 1) // CACHELINE
        self.pending.update(range(first, last + 1))
        self.flush_count += 1
        self.flushed_lines += last - first + 1

    def fence(self):
        """Make every pending line durable in one ordering point."""
        with self._fence_lock:
            pend = self.pending
            if self.recorder is not None and self.recorder.capture_pending:
                before = [
                    (ln * CACHELINE,
                     bytes(self.volatile[ln * CACHELINE:(ln + 1) * CACHELINE]))
                    for ln in sorted(pend)
                ]
            else:
                before = []
            runs = []
            if pend:
                lines = sorted(pend)
                start = prev = lines[0]
                for ln in lines[1:]:
                    if ln != prev + 1:
                        runs.append((start, prev))
                        start = ln
                    prev = ln
                runs.append((start, prev))
            byte_runs = []
            for start, last in runs:
                a = start * CACHELINE
                b = min((last + 1) * CACHELINE, self.total_size)
                chunk = bytes(self.volatile[a:b])
                self.persistent[a:b] = chunk
                byte_runs.append((a, chunk))
            self.pending = set()
            self.fence_count += 1
            if self.recorder is not None:
                self.recorder.record(byte_runs, before)

    def persist_range(self, addr: int, length: int):
        self.flush(addr, length)
        self.fence()

    def crash_snapshot(self, policy: str = "strict", seed: int = 0) -> bytes:
        """Image the crash would leave behind.

        strict: exactly the fenced state.  probabilistic: each pending
        (flushed, unfenced) line additionally survives with probability 1/2
        under the given seed.
        """
        image = bytearray(self.persistent)
        if policy == "probabilistic":
            rng = random.Random(seed)
            for ln in sorted(self.pending):
                if rng.random() < 0.5:
                    a = ln * CACHELINE
                    b = min(a + CACHELINE, self.total_size)
                    image[a:b] = self.volatile[a:b]
        elif policy != "strict":
            raise KucoError(f"unknown crash policy {policy!r}")
        return bytes(image)

    # -- permissions -------------------------------------------------------

    def set_permission(self, runs: list[tuple[int, int]], mode: int, owner: int = MASTER):
        """Flip permission for whole page runs; one TLB-flush event per call."""
        if not runs:
            return
        self.tlb_flush_events += 1
        epoch = self.tlb_flush_events
        for page, count in runs:
            for p in range(page, page + count):
                self.page_mode[p] = mode
                self.page_owner[p] = owner if mode == WRITABLE else 0
                self.page_perm_epoch[p] = epoch

    # -- superblock helpers (master-side) -----------------------------------

    def read_ckpt_word(self) -> tuple[int, int]:
        word = self.read_u64(SB_CKPT_WORD)
        return word >> 63, word & ((1 << 63) - 1)

    def write_ckpt_word(self, active_half: int, seq: int):
        self.store_u64(SB_CKPT_WORD, (active_half << 63) | seq)
        self.persist_range(SB_CKPT_WORD, 8)

    def close(self):
        if isinstance(self.persistent, mmap.mmap):
            self.persistent.flush()
            self.persistent.close()


def region_create(total_size: int, config: RegionConfig | None = None) -> Region:
    return Region.create(total_size, config)


@dataclass
class PageAllocator:
    """Free data pages: persistent bitmap, volatile sorted free list, leases.

    Allocation order is ascending page number (deterministic).  Page 0 is
    permanently reserved so that mapping item value 0 can mean "hole".
    The bitmap is only rewritten at checkpoint time.
    """

    region: Region
    free_heap: list[int] = field(default_factory=list)
    free_set: set[int] = field(default_factory=set)
    leased: dict[int, set[int]] = field(default_factory=dict)
    committed: set[int] = field(default_factory=set)

    @classmethod
    def fresh(cls, region: Region) -> "PageAllocator":
        alloc = cls(region)
        pages = range(1, region.data_pages)
        alloc.free_heap = list(pages)
        alloc.free_set = set(pages)
        alloc.committed = {0}
        return alloc

    @classmethod
    def rebuilt(cls, region: Region, referenced: set[int]) -> "PageAllocator":
        alloc = cls(region)
        alloc.committed = {0} | referenced
        free = [p for p in range(1, region.data_pages) if p not in referenced]
        alloc.free_heap = free
        heapq.heapify(alloc.free_heap)
        alloc.free_set = set(free)
        return alloc

    @property
    def free_count(self) -> int:
        return len(self.free_heap)

    def alloc_pages(self, n: int) -> list[tuple[int, int]]:
        """Take the n lowest free pages, returned as maximal contiguous runs."""
        if n < 1:
            raise KucoError("alloc_pages needs n >= 1")
        if n > len(self.free_heap):
            raise OutOfSpace(f"want {n} pages, {len(self.free_heap)} free")
        pages = [heapq.heappop(self.free_heap) for _ in range(n)]
        self.free_set.difference_update(pages)
        runs = []
        start = prev = pages[0]
        for p in pages[1:]:
            if p != prev + 1:
                runs.append((start, prev - start + 1))
                start = p
            prev = p
        runs.append((start, prev - start + 1))
        return runs

    def free_pages(self, pages):
        for p in pages:
            if p in self.free_set:
                raise KucoError(f"double free of page {p}")
            heapq.heappush(self.free_heap, p)
            self.free_set.add(p)
            self.committed.discard(p)

    def lease_to(self, client: int, runs: list[tuple[int, int]]):
        pool = self.leased.setdefault(client, set())
        for page, count in runs:
            pool.update(range(page, page + count))

    def commit(self, client: int, pages) -> None:
        pool = self.leased.get(client, set())
        for p in pages:
            pool.discard(p)
            self.committed.add(p)

    def is_leased_to(self, client: int, pages) -> bool:
        pool = self.leased.get(client, set())
        return all(p in pool for p in pages)

    def release_client(self, client: int) -> int:
        """Return a departing client's unused leased pages to the free list."""
        pool = self.leased.pop(client, set())
        self.free_pages(sorted(pool))
        return len(pool)

    def retire_committed(self, pages):
        # Ownership bookkeeping happens at free time (EBR callback).
        pass

    def persist_bitmap(self):
        """Write the committed-page bitmap into its segment and flush it."""
        seg = self.region.segments["bitmap"]
        nbytes = (self.region.data_pages + 7) // 8
        bitmap = bytearray(nbytes)
        for p in self.committed:
            bitmap[p >> 3] |= 1 << (p & 7)
        self.region.store(seg.offset, bytes(bitmap))
        self.region.flush(seg.offset, nbytes)

    def read_bitmap(self, image=None) -> set[int]:
        buf = self.region.volatile if image is None else image
        seg = self.region.segments["bitmap"]
        marked = set()
        for p in range(self.region.data_pages):
            if buf[seg.offset + (p >> 3)] & (1 << (p & 7)):
                marked.add(p)
        return marked

    def check_conservation(self) -> bool:
        leased_all = set()
        for pool in self.leased.values():
            if pool & leased_all:
                return False
            leased_all |= pool
        groups = (self.free_set, leased_all, self.committed)
        total = sum(len(g) for g in groups)
        if total != self.region.data_pages:
            return False
        union = self.free_set | leased_all | self.committed
        return len(union) == self.region.data_pages
