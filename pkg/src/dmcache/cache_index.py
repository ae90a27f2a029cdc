"""Per-CN hopscotch cache index living in the node's registered region.

Layout (little endian), one 64-byte group per four buckets::

    +0   u64     lock word (0 = free, otherwise holder token)
    +8   u64[4]  keys (packed RemoteAddr, 0 = empty)
    +40  u32[4]  values (cache-header offsets in the region)
    +56  u16[4]  hop_info bitmaps

Bucket ``b`` lives in group ``b // 4`` slot ``b % 4``. The table holds
``num_buckets`` home buckets plus a few padding groups so neighborhoods near
the end never wrap, which keeps every neighborhood one contiguous read.
"""

from dataclasses import dataclass
from enum import Enum
import struct

import numpy as np

from . import kernels
from .fabric import read_u64, write_u64

GROUP_BYTES = 64
KEYS_AT = 8
VALUES_AT = 40
HOPS_AT = 56

_U32 = struct.Struct("<I")
_U16 = struct.Struct("<H")


class IndexLockTimeout(Exception):
    pass


class InsertStatus(Enum):
    INSERTED = "inserted"
    ALREADY_PRESENT = "already_present"
    FULL = "full"


@dataclass(frozen=True)
class IndexConfig:
    num_buckets: int = 2_097_152
    hsize: int = 16
    pad_groups: int = 4
    add_range: int = 1024
    remote_retries: int = 64
    lock_spin_limit: int = 1_000_000

    def __post_init__(self):
        if self.num_buckets <= 0 or self.num_buckets & (self.num_buckets - 1):
            raise ValueError("num_buckets must be a power of two")
        if not 1 <= self.hsize <= 16:
            raise ValueError("hop_info is 16 bits; hsize must be in [1, 16]")
        if self.pad_groups * 4 < self.hsize:
            raise ValueError("padding must cover one neighborhood")

    @property
    def total_buckets(self):
        return self.num_buckets + self.pad_groups * 4

    @property
    def nbytes(self):
        return (self.total_buckets // 4) * GROUP_BYTES


def _key_off(base, b):
    return base + (b >> 2) * GROUP_BYTES + KEYS_AT + 8 * (b & 3)


def _value_off(base, b):
    return base + (b >> 2) * GROUP_BYTES + VALUES_AT + 4 * (b & 3)


def _hop_off(base, b):
    return base + (b >> 2) * GROUP_BYTES + HOPS_AT + 2 * (b & 3)


class HopscotchIndex:
    """Index over ``port``'s own region starting at byte ``base``.

    Every method that touches memory is a generator; each local memory step
    costs one local op and is an interleaving point.
    """

    def __init__(self, port, base=0, config=None):
        self.port = port
        self.base = base
        self.config = config or IndexConfig()
        self._mask = self.config.num_buckets - 1
        self.probe_log = None

    @property
    def mem(self):
        return self.port.mem

    def home(self, key):
        return kernels.home_bucket(key, self._mask)

    # -- raw accessors (no cost; callers account for ops) -----------------
    def _key(self, b):
        return read_u64(self.mem, _key_off(self.base, b))

    def _value(self, b):
        return _U32.unpack_from(self.mem, _value_off(self.base, b))[0]

    def _hop(self, b):
        return _U16.unpack_from(self.mem, _hop_off(self.base, b))[0]

    def _set_key(self, b, key):
        write_u64(self.mem, _key_off(self.base, b), key)

    def _set_value(self, b, value):
        _U32.pack_into(self.mem, _value_off(self.base, b), value)

    def _set_hop(self, b, hop):
        _U16.pack_into(self.mem, _hop_off(self.base, b), hop)

    def _group_slice(self, g_lo, g_hi):
        lo = self.base + g_lo * GROUP_BYTES
        return memoryview(self.mem)[lo:self.base + (g_hi + 1) * GROUP_BYTES]

    # -- locking -------------------------------------------------------------
    def _lock(self, g, token):
        off = self.base + g * GROUP_BYTES
        port = self.port
        for _ in range(self.config.lock_spin_limit):
            yield from port.local()
            if read_u64(self.mem, off) == 0:
                write_u64(self.mem, off, token)
                return
        raise IndexLockTimeout("group %d stayed locked" % g)

    def _unlock_all(self, groups):
        # released with plain stores; safe to run from a closing generator
        for g in groups:
            write_u64(self.mem, self.base + g * GROUP_BYTES, 0)

    # -- lookups -----------------------------------------------------------
    def lookup_local(self, key):
        """Header offset for ``key`` or None. Lock-free, one local op."""
        yield from self.port.local()
        return self.peek(key)

    def peek(self, key):
        """Zero-cost lookup used by tests and admin paths."""
        h = self.home(key)
        g0 = h >> 2
        g1 = (h + self.config.hsize - 1) >> 2
        v = kernels.scan_neighborhood(self._group_slice(g0, g1), g0 * 4, h, key,
                                      self.config.hsize)
        return None if v < 0 else v

    def insert(self, key, value, token):
        """Insert ``key -> value``; returns ``(InsertStatus, value)``."""
        cfg = self.config
        hsize = cfg.hsize
        h = self.home(key)
        end = min(cfg.total_buckets, h + cfg.add_range)
        locked = []
        try:
            g = max(0, h - hsize + 1) >> 2
            g_need = (h + hsize - 1) >> 2
            while g <= g_need:
                yield from self._lock(g, token)
                locked.append(g)
                g += 1
            hop = self._hop(h)
            for i in range(hsize):
                if hop >> i & 1 and self._key(h + i) == key:
                    return InsertStatus.ALREADY_PRESENT, self._value(h + i)
            # find the first empty bucket, locking groups in ascending order
            e = -1
            b = h
            while b < end:
                if (b >> 2) > locked[-1]:
                    yield from self._lock(b >> 2, token)
                    locked.append(b >> 2)
                if self._key(b) == 0:
                    e = b
                    break
                b += 1
            if e < 0:
                return InsertStatus.FULL, None
            while e - h >= hsize:
                moved = False
                for cand in range(e - hsize + 1, e):
                    chop = self._hop(cand)
                    if not chop:
                        continue
                    for i in range(hsize):
                        j = cand + i
                        if j >= e:
                            break
                        if chop >> i & 1:
                            # copy j -> e (value, then key and hop), then vacate j
                            yield from self.port.local()
                            self._set_value(e, self._value(j))
                            yield from self.port.local()
                            self._set_key(e, self._key(j))
                            self._set_hop(cand, chop | (1 << (e - cand)))
                            yield from self.port.local()
                            self._set_key(j, 0)
                            self._set_hop(cand, self._hop(cand) & ~(1 << i))
                            e = j
                            moved = True
                            break
                    if moved:
                        break
                if not moved:
                    return InsertStatus.FULL, None
            yield from self.port.local()
            self._set_value(e, value)
            yield from self.port.local()
            self._set_key(e, key)
            self._set_hop(h, self._hop(h) | (1 << (e - h)))
            return InsertStatus.INSERTED, value
        finally:
            if locked:
                self._unlock_all(locked)

    def evict(self, key, score, token, claim=None):
        """Free one bucket in ``key``'s neighborhood.

        ``score(value)`` returns a sortable priority (lowest is evicted first)
        or None when that entry must not be evicted. ``claim(value)`` runs in
        the same step the victim is chosen. Returns the victim's
        ``(key, value)`` or None when nothing is evictable.
        """
        cfg = self.config
        hsize = cfg.hsize
        h = self.home(key)
        locked = []
        try:
            for g in range(max(0, h - hsize + 1) >> 2, ((h + hsize - 1) >> 2) + 1):
                yield from self._lock(g, token)
                locked.append(g)
            best = None
            for b in range(h, h + hsize):
                k = self._key(b)
                if k == 0:
                    continue
                s = score(self._value(b))
                if s is None:
                    continue
                if best is None or s < best[0]:
                    best = (s, b)
            if best is None:
                return None
            b = best[1]
            vkey, vval = self._key(b), self._value(b)
            if claim is not None:
                claim(vval)
            vhome = self.home(vkey)
            # clear the key before the value so no lookup pairs them wrongly
            yield from self.port.local()
            self._set_key(b, 0)
            yield from self.port.local()
            self._set_value(b, 0)
            self._set_hop(vhome, self._hop(vhome) & ~(1 << (b - vhome)))
            return vkey, vval
        finally:
            if locked:
                self._unlock_all(locked)

    def remove(self, key, token):
        """Drop ``key`` if present; returns its value or None."""
        h = self.home(key)
        hsize = self.config.hsize
        locked = []
        try:
            for g in range(max(0, h - hsize + 1) >> 2, ((h + hsize - 1) >> 2) + 1):
                yield from self._lock(g, token)
                locked.append(g)
            hop = self._hop(h)
            for i in range(hsize):
                if hop >> i & 1 and self._key(h + i) == key:
                    v = self._value(h + i)
                    yield from self.port.local()
                    self._set_key(h + i, 0)
                    self._set_value(h + i, 0)
                    self._set_hop(h, hop & ~(1 << i))
                    return v
            return None
        finally:
            if locked:
                self._unlock_all(locked)

    # -- whole-table views ---------------------------------------------------
    def items(self):
        """All (key, value) pairs, read straight from memory."""
        n = self.config.total_buckets
        raw = np.frombuffer(self.mem, dtype=np.uint8, count=self.config.nbytes,
                            offset=self.base).reshape(-1, GROUP_BYTES)
        keys = raw[:, KEYS_AT:VALUES_AT].copy().view("<u8").reshape(-1)
        vals = raw[:, VALUES_AT:HOPS_AT].copy().view("<u4").reshape(-1)
        occ = np.flatnonzero(keys[:n])
        return [(int(keys[b]), int(vals[b])) for b in occ]

    def bucket_of(self, key):
        h = self.home(key)
        for i in range(self.config.hsize):
            if self._hop(h) >> i & 1 and self._key(h + i) == key:
                return h + i
        return None

    def check_invariants(self):
        """None when the neighborhood and hop_info invariants hold."""
        view = memoryview(self.mem)[self.base:self.base + self.config.nbytes]
        return kernels.check_table(view, self.config.total_buckets, self._mask,
                                   self.config.hsize)

    def clear(self):
        self.mem[self.base:self.base + self.config.nbytes] = bytes(self.config.nbytes)


def lookup_remote(port, cn, base, config, key, probe_id=None):
    """Look ``key`` up in CN ``cn``'s index with one fabric read per attempt.

    The read covers every group of the key's neighborhood. A snapshot with
    any locked group is discarded and re-read.
    """
    h = kernels.home_bucket(key, config.num_buckets - 1)
    g0 = h >> 2
    g1 = (h + config.hsize - 1) >> 2
    off = base + g0 * GROUP_BYTES
    n = (g1 - g0 + 1) * GROUP_BYTES
    for attempt in range(config.remote_retries + 1):
        snap = yield from port.read(cn, off, n, tag=("index_probe", probe_id, attempt))
        if not kernels.any_locked(snap):
            v = kernels.scan_neighborhood(snap, g0 * 4, h, key, config.hsize)
            return None if v < 0 else v
    raise IndexLockTimeout("neighborhood of %#x on node %d stayed locked" % (key, cn))
