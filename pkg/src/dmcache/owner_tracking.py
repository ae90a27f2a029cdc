"""Owner tracking: broadcast, or per-object 64-bit owner sets on the MN.

Owner sets are indexed on each MN by a fixed-capacity directory of 16-byte
slots ``(packed object key, bitmap)``. Slots are claimed with one CAS on the
key word per probe, so duplicate inserts converge on the same bitmap.
"""

from dataclasses import dataclass
from enum import Enum

from . import kernels

SLOT_BYTES = 16
_SALT = 0x5BD1E9955BD1E995


class DirectoryFull(Exception):
    pass


class TrackingMode(Enum):
    BROADCAST = "broadcast"
    OWNER_SETS = "ownerset"


@dataclass(frozen=True)
class TrackingPolicy:
    """``mode`` is 'broadcast', 'ownerset' or 'auto' (switch above ``threshold`` CNs)."""

    mode: str = "auto"
    threshold: int = 32

    def resolve(self, n_cns):
        if self.mode == "broadcast":
            return TrackingMode.BROADCAST
        if self.mode == "ownerset":
            return TrackingMode.OWNER_SETS
        if self.mode != "auto":
            raise ValueError("unknown owner tracking mode %r" % self.mode)
        return TrackingMode.OWNER_SETS if n_cns > self.threshold else TrackingMode.BROADCAST


@dataclass(frozen=True)
class OwnerDirectory:
    """Directory placement inside every MN region."""

    base: int
    slots: int
    probe_limit: int = 64

    @property
    def nbytes(self):
        return self.slots * SLOT_BYTES

    def slot_key_off(self, slot):
        return self.base + slot * SLOT_BYTES

    def set_off(self, slot):
        return self.base + slot * SLOT_BYTES + 8

    def slot_of_set(self, set_off):
        return (set_off - 8 - self.base) // SLOT_BYTES

    def first_slot(self, key):
        return kernels.mix64(key ^ _SALT) % self.slots


def owner_bit(cn):
    return 1 << (cn % 64)


def ensure_owner_set(port, directory, obj):
    """Offset (on ``obj.node``) of the object's owner bitmap; idempotent."""
    key = obj.pack()
    slot = directory.first_slot(key)
    for _ in range(min(directory.probe_limit, directory.slots)):
        old = yield from port.cas(obj.node, directory.slot_key_off(slot), 0, key,
                                  tag="dir_insert")
        if old == 0 or old == key:
            return directory.set_off(slot)
        slot = (slot + 1) % directory.slots
    raise DirectoryFull("no owner-set slot for %r" % (obj,))


def record_owner(port, mn, set_off, cn, guess=0):
    """Set ``cn``'s bit with a CAS retry loop; returns the final bitmap."""
    bit = owner_bit(cn)
    expected = guess
    while True:
        old = yield from port.cas(mn, set_off, expected, expected | bit, tag="owner_cas")
        if old == expected:
            return expected | bit
        if old & bit:
            return old
        expected = old


def acquire_and_collect_owners(port, mn, set_off, writer, live_cns, guess=0):
    """Swap the bitmap to just ``writer``; return ``(targets, previous bitmap)``.

    Targets are all live CNs other than the writer whose residue bit was set,
    so residue aliases are all included.
    """
    mine = owner_bit(writer)
    expected = guess
    while True:
        old = yield from port.cas(mn, set_off, expected, mine, tag="owner_cas")
        if old == expected:
            break
        expected = old
    targets = [c for c in live_cns if c != writer and (old >> (c % 64)) & 1]
    return targets, old


def owners_for_invalidation(port, mode, live_cns, writer, mn=None, set_off=None, guess=0):
    """Invalidation targets for a write under the given tracking mode."""
    if mode is TrackingMode.BROADCAST:
        return [c for c in live_cns if c != writer]
    targets, _ = yield from acquire_and_collect_owners(port, mn, set_off, writer,
                                                       live_cns, guess)
    return targets
