"""Byte layouts shared by the cache engine and remote peers.

Cache header, 32 bytes, 8-byte aligned::

    +0   u64  state word: VALID | MODE_ON | SWITCHING | FILLING
    +8   u64  counters: reads (bits 0-15) | read hits (16-31) | total ops (32-47)
    +16  u16  read-ratio threshold, fixed point over THRESHOLD_ONE
    +18  u16  check interval
    +20  u32  buffer offset in the CN region
    +24  u32  object size in bytes
    +28  u32  owner-set directory slot (NO_SLOT when unknown)
"""

from dataclasses import dataclass
import struct

HEADER_BYTES = 32
STATE_AT = 0
COUNTERS_AT = 8
THRESHOLD_AT = 16
INTERVAL_AT = 18
BUF_AT = 20
SIZE_AT = 24
OWNER_SLOT_AT = 28

VALID = 1
MODE_ON = 2
SWITCHING = 4
FILLING = 8

NO_SLOT = 0xFFFFFFFF

LANE_BITS = 16
LANE_MASK = (1 << LANE_BITS) - 1
READS_ONE = 1
HITS_ONE = 1 << 16
TOTAL_ONE = 1 << 32

THRESHOLD_ONE = 0xFFFF
DEFAULT_THRESHOLD = 0.75
INITIAL_INTERVAL = 8
SETTLED_INTERVAL = 255

_HEADER = struct.Struct("<QQHHIII")
_TAIL = struct.Struct("<HH")


def lanes(word):
    """(reads, read_hits, total) from a packed counter word."""
    return word & LANE_MASK, (word >> 16) & LANE_MASK, (word >> 32) & LANE_MASK


def pack_lanes(reads, hits, total):
    return (reads & LANE_MASK) | ((hits & LANE_MASK) << 16) | ((total & LANE_MASK) << 32)


def to_fixed(ratio):
    return max(0, min(THRESHOLD_ONE, int(round(ratio * THRESHOLD_ONE))))


def from_fixed(value):
    return value / THRESHOLD_ONE


def pack_tail(threshold_fixed, interval):
    return _TAIL.pack(threshold_fixed, interval)


@dataclass
class CacheHeader:
    state: int = 0
    counters: int = 0
    threshold: int = 0
    interval: int = INITIAL_INTERVAL
    buf_offset: int = 0
    size: int = 0
    owner_slot: int = NO_SLOT

    @property
    def valid(self):
        return bool(self.state & VALID)

    @property
    def mode_on(self):
        return bool(self.state & MODE_ON)

    @property
    def switching(self):
        return bool(self.state & SWITCHING)

    def pack(self):
        return _HEADER.pack(self.state, self.counters, self.threshold, self.interval,
                            self.buf_offset, self.size, self.owner_slot)

    @classmethod
    def unpack(cls, buf, offset=0):
        return cls(*_HEADER.unpack_from(buf, offset))
