"""Direct-access per-file range lock.

A ring of R slots lives in client-writable memory; writers coordinate without
the master.  Acquiring increments the ring-head version counter, claims slot
``version mod R`` (waiting out the slot's previous occupant), publishes
{ACTIVE, offset, size, lease deadline, keyed checksum, version}, then walks
versions backward and waits on every published overlapping writer that is
still ACTIVE.  A crashed holder is overtaken at its lease deadline; a slot
whose keyed checksum no longer verifies is reported and likewise waited out
only to its stated deadline.

Slot layout (one 64-byte cacheline, little-endian):
    state u8 | pad 7 | offset u64 | size u64 | lease u64 | version u64 |
    checksum u64 | pad 16
The ring starts with a 64-byte header whose first u64 is the version counter.
"""

from __future__ import annotations

import struct
import threading
import time
from dataclasses import dataclass

from .util import keyed_checksum

STATE_FREE = 0
STATE_ACTIVE = 1
STATE_RELEASED = 2

SLOT_SIZE = 64
HEADER_SIZE = 64
DEFAULT_SLOTS = 8
DEFAULT_LEASE_NS = 100_000_000  # 100 ms

_SLOT = struct.Struct("<B7xQQQQQ")
_SPIN_NS = 1_000  # bounded spin before yielding


@dataclass
class Slot:
    state: int
    offset: int
    size: int
    lease: int
    version: int
    checksum: int

    def overlaps(self, offset: int, size: int) -> bool:
        return self.offset < offset + size and offset < self.offset + self.size


class RingStats:
    def __init__(self):
        self.corrupt_events = 0
        self.expired_takeovers = 0
        self.stale_releases = 0
        self.inflight = 0
        self.max_inflight = 0
        self._lock = threading.Lock()

    def enter(self):
        with self._lock:
            self.inflight += 1
            if self.inflight > self.max_inflight:
                self.max_inflight = self.inflight

    def leave(self):
        with self._lock:
            self.inflight -= 1


class LockRing:
    def __init__(self, slots: int = DEFAULT_SLOTS, clock=time.monotonic_ns):
        self.slots = slots
        self.buf = bytearray(HEADER_SIZE + SLOT_SIZE * slots)
        self.clock = clock
        self.stats = RingStats()
        self.base_version = 0  # versions <= base predate this ring: never waited on
        self._version_lock = threading.Lock()

    # -- raw access ---------------------------------------------------------

    @property
    def version(self) -> int:
        return struct.unpack_from("<Q", self.buf, 0)[0]

    def seed_version(self, version: int):
        """Start the counter above any version already present in mappings."""
        struct.pack_into("<Q", self.buf, 0, version)
        self.base_version = version

    def _fetch_inc_version(self) -> int:
        with self._version_lock:
            v = struct.unpack_from("<Q", self.buf, 0)[0] + 1
            struct.pack_into("<Q", self.buf, 0, v)
            return v

    def read_slot(self, index: int) -> Slot:
        return Slot(*_SLOT.unpack_from(self.buf, HEADER_SIZE + index * SLOT_SIZE))

    def _write_slot(self, index: int, slot: Slot):
        _SLOT.pack_into(self.buf, HEADER_SIZE + index * SLOT_SIZE,
                        slot.state, slot.offset, slot.size, slot.lease,
                        slot.version, slot.checksum)

    def corrupt_slot(self, index: int, byte_offset: int, xor: int = 0xFF):
        """Test hook: flip bits inside a slot as a buggy client would."""
        pos = HEADER_SIZE + index * SLOT_SIZE + byte_offset
        self.buf[pos] ^= xor

    # -- protocol -----------------------------------------------------------

    def acquire(self, offset: int, size: int, key: bytes,
                lease_ns: int = DEFAULT_LEASE_NS) -> tuple[int, int]:
        """Block until [offset, offset+size) is exclusively ours.

        Returns (version, slot index).  The slot is published before the
        backward conflict scan, so at most ``slots`` writers are ever past
        this point at once: the claim on ``version mod slots`` gates entry.
        """
        if size < 1:
            raise ValueError("size must be >= 1")
        v = self._fetch_inc_version()
        index = v % self.slots
        self._wait_slot_reusable(index)
        deadline = self.clock() + lease_ns
        checksum = keyed_checksum(key, STATE_ACTIVE, offset, size, deadline)
        self.stats.enter()
        self._write_slot(index, Slot(STATE_ACTIVE, offset, size, deadline, v, checksum))
        lo = max(v - self.slots + 1, self.base_version + 1)
        for u in range(v - 1, lo - 1, -1):
            self._wait_conflict(u, offset, size, key)
        return v, index

    def _wait_slot_reusable(self, index: int):
        spin_until = self.clock() + _SPIN_NS
        while True:
            slot = self.read_slot(index)
            if slot.state != STATE_ACTIVE:
                return
            if self.clock() >= slot.lease:
                self.stats.expired_takeovers += 1
                return
            self._pause(spin_until)

    def _wait_conflict(self, u: int, offset: int, size: int, key: bytes):
        """Wait out version u if it was published, overlaps, and is ACTIVE."""
        index = u % self.slots
        corrupt_reported = False
        spin_until = self.clock() + _SPIN_NS
        while True:
            slot = self.read_slot(index)
            if slot.version > u:
                return  # recycled: writer u finished long ago
            if slot.version < u:
                # writer u fetched its version but has not published yet
                self._pause(spin_until)
                continue
            if slot.state != STATE_ACTIVE:
                return
            if not slot.overlaps(offset, size):
                return
            expected = keyed_checksum(key, STATE_ACTIVE, slot.offset, slot.size,
                                      slot.lease)
            if expected != slot.checksum and not corrupt_reported:
                self.stats.corrupt_events += 1
                corrupt_reported = True
            if self.clock() >= slot.lease:
                if not corrupt_reported:
                    self.stats.expired_takeovers += 1
                return
            self._pause(spin_until)

    @staticmethod
    def _pause(spin_until: int):
        if time.monotonic_ns() >= spin_until:
            time.sleep(0)

    def release(self, version: int) -> bool:
        """Mark the slot RELEASED; False (counted) if the slot moved on."""
        index = version % self.slots
        slot = self.read_slot(index)
        if slot.version != version or slot.state != STATE_ACTIVE:
            self.stats.stale_releases += 1
            return False
        self.buf[HEADER_SIZE + index * SLOT_SIZE] = STATE_RELEASED
        self.stats.leave()
        return True

    def validate_slot(self, index: int, key: bytes) -> bool:
        slot = self.read_slot(index)
        expected = keyed_checksum(key, STATE_ACTIVE, slot.offset, slot.size,
                                  slot.lease)
        return expected == slot.checksum
