"""Small shared primitives: hashes and checksums used across the stack."""

import hashlib
import struct

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_U64 = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a over raw bytes (directory-entry name keys)."""
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & _U64
    return h


# crc32c (Castagnoli); zlib only ships the IEEE polynomial.
_CRC32C_POLY = 0x82F63B78


def _make_crc32c_table():
    table = []
    for i in range(256):
        crc = i
        for _ in range(8):
            crc = (crc >> 1) ^ _CRC32C_POLY if crc & 1 else crc >> 1
        table.append(crc)
    return table


_CRC32C_TABLE = _make_crc32c_table()


def crc32c(data: bytes, crc: int = 0) -> int:
    crc ^= 0xFFFFFFFF
    table = _CRC32C_TABLE
    for b in data:
        crc = table[(crc ^ b) & 0xFF] ^ (crc >> 8)
    return crc ^ 0xFFFFFFFF


_SLOT_FIELDS = struct.Struct("<BQQQ")


def keyed_checksum(key: bytes, state: int, offset: int, size: int, lease: int) -> int:
    """64-bit keyed hash over lock-slot fields; forgeable only with the key."""
    msg = _SLOT_FIELDS.pack(state, offset, size, lease)
    return int.from_bytes(
        hashlib.blake2b(msg, key=key, digest_size=8).digest(), "little"
    )
