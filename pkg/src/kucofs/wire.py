"""Client/master message rings and slot encodings.

Each client owns one ring pair: 64 request slots of 256 bytes and 64 response
slots of 64 bytes, single producer / single consumer.  Slot byte 0 is the
state (0 free, 1 ready); the master writes the response into the slot with
the same index as the request it answers.

Request slot:   state u8 | opcode u8 | flags u8 | pad u8 | seq u32 | payload[248]
Response slot:  state u8 | status u8 | pad u16 | seq u32 | value[56]

Per-opcode payload layouts are struct-packed little-endian; see
docs/format.md.  Names or extent lists too large for the inline fields are
passed through a scratch data page the client owns (field set to the page
number, 0 means inline).
"""

from __future__ import annotations

import struct
import threading
import time
from dataclasses import dataclass

REQ_SLOT = 256
RESP_SLOT = 64
RING_ENTRIES = 64
PAYLOAD_MAX = REQ_SLOT - 8
VALUE_MAX = RESP_SLOT - 8

OP_OPEN = 1
OP_CREAT = 2
OP_MKDIR = 3
OP_UNLINK = 4
OP_RMDIR = 5
OP_RENAME = 6
OP_WRITE_COMMIT = 7
OP_LEASE_PAGES = 8
OP_CLOSE = 9
OP_READ_FALLBACK = 10
OP_REGISTER = 11

FLAG_NO_HINT = 0x01   # payload carries pathnames; master resolves itself
FLAG_OPEN = 0x02      # creat should also open (bump open_count, make ring)
FLAG_EXCL = 0x04
FLAG_EXIT = 0x08      # close: client is leaving; reclaim its leases

_REQ_HDR = struct.Struct("<BBBxI")
_RESP_HDR = struct.Struct("<BBxxI")

MAX_INLINE_RUNS = 16
MAX_RESP_RUNS = 4

# Fixed-size payload heads.
CREAT_HEAD = struct.Struct("<QQIIQQBHQQ")
# parent_ino u64 | parent_gen u64 | mode u32 | hint_arena u32 | hint_key u64 |
# hint_ino u64 | hint_flags u8 | nlen u16 | scratch u64 | arena_epoch u64
# (+ tower + name); the epoch gates trust in the tower's pointer echoes
TOWER_LEVELS = 16  # (pred arena u32, succ arena u32) echoes for levels 0..15
TOWER_STRUCT = struct.Struct("<" + "II" * TOWER_LEVELS)

UNLINK_HEAD = struct.Struct("<QQIQQQQ")
# parent_ino | parent_gen | dent_arena u32 | dent_key | dent_ino |
# target_ino | target_gen  (+ tower)

RENAME_HEAD = struct.Struct("<QQQQIQQQQIQQBHHQ")
# ino | gen | src_parent_ino | src_parent_gen | src_dent_arena u32 |
# src_dent_key | src_dent_ino | dst_parent_ino | dst_parent_gen |
# dst_hint_arena u32 | dst_hint_key | dst_hint_ino | dst_hint_flags u8 |
# snlen u16 | dnlen u16 | scratch u64  (+ names)

WRITE_HEAD = struct.Struct("<QQQQQHQ")
# ino | gen | offset | size | version | nruns u16 | scratch u64 (+ runs)

OPEN_BODY = struct.Struct("<QQI")          # ino | gen | oflags
LEASE_BODY = struct.Struct("<I")           # page count
CLOSE_BODY = struct.Struct("<QQB")         # ino | gen | exit flag unused (flags)
READFB_BODY = struct.Struct("<QQQIQ")      # ino | gen | offset | size u32 | dest page
_RUN = struct.Struct("<QI")
PATH_HEAD = struct.Struct("<IHHQ")         # mode u32 | len1 u16 | len2 u16 | scratch


def pack_tower(hints: list[tuple[int, int]]) -> bytes:
    flat = []
    for pred, succ in hints[:TOWER_LEVELS]:
        flat.extend((pred & 0xFFFFFFFF, succ & 0xFFFFFFFF))
    while len(flat) < TOWER_LEVELS * 2:
        flat.append(0)
    return TOWER_STRUCT.pack(*flat)


def unpack_tower(buf: bytes, off: int) -> list[tuple[int, int]]:
    flat = TOWER_STRUCT.unpack_from(buf, off)
    return [(flat[2 * i], flat[2 * i + 1]) for i in range(TOWER_LEVELS)]


def pack_runs(runs) -> bytes:
    return b"".join(_RUN.pack(p, c) for p, c in runs)


def unpack_runs(buf, off: int, n: int) -> list[tuple[int, int]]:
    out = []
    for i in range(n):
        p, c = _RUN.unpack_from(buf, off + 12 * i)
        out.append((p, c))
    return out


@dataclass
class Request:
    cid: int
    slot: int
    opcode: int
    flags: int
    seq: int
    payload: bytes


class MessageRing:
    """One client's exclusively-owned request/response slot pair."""

    def __init__(self, cid: int):
        self.cid = cid
        self.req = bytearray(REQ_SLOT * RING_ENTRIES)
        self.resp = bytearray(RESP_SLOT * RING_ENTRIES)
        self._next = 0
        self._cons = 0
        self.resp_ready = threading.Event()

    # -- client side --------------------------------------------------------

    def post(self, opcode: int, flags: int, seq: int, payload: bytes) -> int:
        if len(payload) > PAYLOAD_MAX:
            raise ValueError(f"payload {len(payload)}B exceeds slot")
        slot = self._next
        self._next = (slot + 1) % RING_ENTRIES
        base = slot * REQ_SLOT
        while self.req[base]:  # ring full: wait for the master to drain
            time.sleep(0)
        _REQ_HDR.pack_into(self.req, base, 0, opcode, flags, seq)
        self.req[base + 8:base + 8 + len(payload)] = payload
        self.req[base] = 1  # publish
        return slot

    def take_response(self, slot: int, seq: int) -> tuple[int, bytes]:
        base = slot * RESP_SLOT
        state, status, rseq = _RESP_HDR.unpack(bytes(self.resp[base:base + 8]))
        assert state == 1 and rseq == seq, "response slot mismatch"
        value = bytes(self.resp[base + 8:base + RESP_SLOT])
        self.resp[base] = 0
        return status, value

    def response_ready(self, slot: int) -> bool:
        return self.resp[slot * RESP_SLOT] == 1

    # -- master side --------------------------------------------------------

    def scan(self, limit: int) -> list[Request]:
        """Consume up to `limit` posted requests in order."""
        out = []
        while limit > 0:
            slot = self._cons
            base = slot * REQ_SLOT
            if self.req[base] != 1:
                break
            _, opcode, flags, seq = _REQ_HDR.unpack(bytes(self.req[base:base + 8]))
            payload = bytes(self.req[base + 8:base + REQ_SLOT])
            out.append(Request(self.cid, slot, opcode, flags, seq, payload))
            self.req[base] = 2  # taken, response pending
            self._cons = (slot + 1) % RING_ENTRIES
            limit -= 1
        return out

    def respond(self, slot: int, seq: int, status: int, value: bytes = b""):
        if len(value) > VALUE_MAX:
            raise ValueError("response value too large")
        base = slot * RESP_SLOT
        _RESP_HDR.pack_into(self.resp, base, 1, status, seq)
        self.resp[base + 8:base + 8 + len(value)] = value
        pad = VALUE_MAX - len(value)
        if pad:
            self.resp[base + 8 + len(value):base + RESP_SLOT] = b"\x00" * pad
        self.req[slot * REQ_SLOT] = 0  # request slot reusable
        self.resp_ready.set()
