"""Per-file versioned block mapping with lock-free snapshot reads.

Each 4 KB file page is located by a 96-bit packed item:

    bit 95      start  (first page of its write)
    bits 94..41 version (54-bit range-lock version of the committing write)
    bit 40      end    (last page of its write)
    bits 39..0  page number (0 = hole)

A reader that collects the covering items can tell whether it straddled a
concurrent commit: adjacent items must either share a version, or raise the
version across a start bit, or drop it after an end bit.  Anything else means
the mapping was mid-update and the read retries.  Item stores during a commit
happen in ascending index order so a reader that sees a later item also sees
every earlier one from the same commit.
"""

from __future__ import annotations

import time

from .errors import FileTooLarge, InconsistentRead

PAGE_SIZE = 4096
CHUNK_ITEMS = 1024
MAX_CHUNKS = 1024
MAX_ITEMS = CHUNK_ITEMS * MAX_CHUNKS  # 2^20 pages per file

VERSION_BITS = 54
PAGE_BITS = 40
_PAGE_MASK = (1 << PAGE_BITS) - 1
_VERSION_MASK = (1 << VERSION_BITS) - 1

DEFAULT_RETRY_CAP = 1 << 20


def encode_item(start: int, version: int, end: int, page_no: int) -> int:
    if page_no >= 1 << PAGE_BITS:
        raise ValueError("page_no exceeds 40 bits")
    if version >= 1 << VERSION_BITS:
        raise ValueError("version exceeds 54 bits")
    return (start << 95) | (version << 41) | (end << 40) | page_no


def decode_item(value: int) -> tuple[int, int, int, int]:
    return (
        (value >> 95) & 1,
        (value >> 41) & _VERSION_MASK,
        (value >> 40) & 1,
        value & _PAGE_MASK,
    )


def validate_items(items) -> bool:
    """Pairwise consistency of decoded (start, version, end, page) tuples.

    For every adjacent pair A, B (ascending index):
      same version, or
      B.version > A.version and B.start = 1  (overwrite of A's tail), or
      B.version < A.version and A.end = 1    (overwrite of A's head).
    """
    for i in range(len(items) - 1):
        a = items[i]
        b = items[i + 1]
        if a[1] == b[1]:
            continue
        if b[1] > a[1] and b[0] == 1:
            continue
        if b[1] < a[1] and a[2] == 1:
            continue
        return False
    return True


class BlockMap:
    """Two-level table: a root of chunk references, chunks of 1024 items.

    Chunks never move once published; publication is a single root-slot
    assignment, so readers either see a whole chunk or a hole.
    """

    __slots__ = ("root",)

    def __init__(self):
        self.root: list = [None] * MAX_CHUNKS

    def get_raw(self, index: int) -> int:
        chunk = self.root[index // CHUNK_ITEMS]
        if chunk is None:
            return 0
        return chunk[index % CHUNK_ITEMS]

    def set_raw(self, index: int, value: int):
        if index >= MAX_ITEMS:
            raise FileTooLarge(f"page index {index}")
        ci = index // CHUNK_ITEMS
        chunk = self.root[ci]
        if chunk is None:
            chunk = [0] * CHUNK_ITEMS
            self.root[ci] = chunk  # publish fully-formed chunk in one store
        chunk[index % CHUNK_ITEMS] = value

    def iter_pages(self, max_index: int):
        """Yield (index, page_no) for every non-hole item below max_index."""
        for ci in range((max_index + CHUNK_ITEMS - 1) // CHUNK_ITEMS):
            chunk = self.root[ci]
            if chunk is None:
                continue
            base = ci * CHUNK_ITEMS
            limit = min(CHUNK_ITEMS, max_index - base)
            for i in range(limit):
                v = chunk[i]
                if v:
                    page = v & _PAGE_MASK
                    if page:
                        yield base + i, page


def commit_mapping(bmap: BlockMap, page_index0: int, pages: list[int],
                   version: int) -> list[int]:
    """Install a committed write's items; returns the replaced page numbers.

    The first item carries the start bit, the last the end bit; a single-page
    write carries both.  Items are stored in ascending order.  Replaced pages
    must be retired through the epoch manager by the caller, never freed
    directly, so in-flight readers keep a stable view.
    """
    n = len(pages)
    if page_index0 + n > MAX_ITEMS:
        raise FileTooLarge(f"commit up to index {page_index0 + n}")
    replaced = []
    for i, page_no in enumerate(pages):
        idx = page_index0 + i
        old = bmap.get_raw(idx)
        if old:
            old_page = old & _PAGE_MASK
            if old_page:
                replaced.append(old_page)
        start = 1 if i == 0 else 0
        end = 1 if i == n - 1 else 0
        bmap.set_raw(idx, encode_item(start, version & _VERSION_MASK, end, page_no))
    return replaced


def snapshot_read(inode, offset: int, size: int,
                  retry_cap: int = DEFAULT_RETRY_CAP,
                  stats=None) -> list[tuple[int, int, int]]:
    """Collect a consistent page view of [offset, offset+size).

    Returns (page_no, start_byte_in_page, length) runs; page_no 0 is a hole
    that reads as zeros.  Caller must be inside an EBR critical section so the
    returned pages cannot be reclaimed underneath it.  Retries while a commit
    is mid-flight; raises InconsistentRead past the cap so the caller can fall
    back to a master-mediated read.
    """
    attempts = 0
    while True:
        file_size = inode.size
        end = min(offset + size, file_size)
        if offset >= end:
            return []
        first = offset // PAGE_SIZE
        last = (end - 1) // PAGE_SIZE
        bmap = inode.block_map
        raw1 = [bmap.get_raw(i) for i in range(first, last + 1)]
        decoded = [decode_item(v) for v in raw1]
        if validate_items(decoded):
            raw2 = [bmap.get_raw(i) for i in range(first, last + 1)]
            if raw1 == raw2 and inode.size >= end:
                runs = []
                for i, (_, _, _, page_no) in enumerate(decoded):
                    idx = first + i
                    a = max(offset, idx * PAGE_SIZE)
                    b = min(end, (idx + 1) * PAGE_SIZE)
                    runs.append((page_no, a - idx * PAGE_SIZE, b - a))
                if stats is not None:
                    stats.reads += 1
                    stats.retries += attempts
                return runs
        attempts += 1
        if attempts >= retry_cap:
            if stats is not None:
                stats.reads += 1
                stats.retries += attempts
                stats.exhausted += 1
            raise InconsistentRead(f"gave up after {attempts} attempts")
        if attempts % 1024 == 0:
            time.sleep(0)  # yield to the committing thread


class ReadStats:
    __slots__ = ("reads", "retries", "exhausted")

    def __init__(self):
        self.reads = 0
        self.retries = 0
        self.exhausted = 0


def gather_bytes(buffer, data_offset: int, runs, out: bytearray | None = None) -> bytes:
    """Materialize snapshot_read runs from a region buffer; holes read zero."""
    parts = []
    for page_no, start, length in runs:
        if page_no == 0:
            parts.append(bytes(length))
        else:
            a = data_offset + page_no * PAGE_SIZE + start
            parts.append(bytes(buffer[a:a + length]))
    return b"".join(parts)
