"""CN-side coherent cache engine.

Each CN's registered region holds a hopscotch index, a header array and a
buffer pool::

    [ index | headers (32 B each, one per bucket) | buffer pool ]

Headers are handed out from a free list; the index maps an object's packed
address to its header offset. Remote CNs only ever touch a header's state
word (invalidation, mode switches) and its threshold/interval fields.

Fill protocol. A reader that misses sets FILLING in the state word, reads the
source, and installs the image only if FILLING is still set and the local
fill generation has not moved. Invalidation clears VALID and FILLING with one
CAS, so a fill that overlapped a write can never publish its stale image.
A writer clears its own copy before flushing and republishes it once the
flush and every invalidation have finished.
"""

from bisect import bisect_left, insort
from collections import Counter
from dataclasses import dataclass, field

from . import adaptive
from .adaptive import LatencyBuffers, mode_check_and_update, wait_not_switching
from .cache_index import HopscotchIndex, IndexConfig, InsertStatus, lookup_remote
from .fabric import NodeDead, RemoteAddr, read_u64, write_u64
from .layout import (DEFAULT_THRESHOLD, FILLING, HEADER_BYTES, MODE_ON, NO_SLOT,
                     OWNER_SLOT_AT, SETTLED_INTERVAL, STATE_AT, SWITCHING, VALID,
                     CacheHeader, lanes, to_fixed)
from .owner_tracking import (DirectoryFull, TrackingMode, acquire_and_collect_owners,
                             ensure_owner_set, record_owner)
from .sim import Join

_INVALID_MASK = ~(VALID | FILLING) & ((1 << 64) - 1)


class OpTimeout(Exception):
    """An operation could not complete because a memory node timed out."""

    def __init__(self, node):
        super().__init__("memory node %d timed out" % node)
        self.node = node


class RangeNotContained(ValueError):
    pass


def _align(n, a):
    return (n + a - 1) // a * a


class BufferPool:
    """Fixed-size chunks; an allocation takes the fewest contiguous chunks."""

    def __init__(self, base, nbytes, chunk=64):
        self.base = base
        self.chunk = chunk
        self.nchunks = nbytes // chunk
        # free extents as sorted (start, length) in chunks
        self._starts = [0] if self.nchunks else []
        self._lens = {0: self.nchunks} if self.nchunks else {}
        self.used = {}

    @property
    def free_chunks(self):
        return sum(self._lens.values())

    def alloc(self, nbytes):
        need = max(1, -(-nbytes // self.chunk))
        for start in self._starts:
            n = self._lens[start]
            if n >= need:
                self._starts.remove(start)
                del self._lens[start]
                if n > need:
                    insort(self._starts, start + need)
                    self._lens[start + need] = n - need
                off = self.base + start * self.chunk
                self.used[off] = need
                return off
        return None

    def free(self, off):
        need = self.used.pop(off)
        start = (off - self.base) // self.chunk
        i = bisect_left(self._starts, start)
        # merge with the following extent
        if i < len(self._starts) and self._starts[i] == start + need:
            nxt = self._starts.pop(i)
            need += self._lens.pop(nxt)
        # and the preceding one
        if i > 0:
            prev = self._starts[i - 1]
            if prev + self._lens[prev] == start:
                self._lens[prev] += need
                return
        self._starts.insert(i, start)
        self._lens[start] = need


@dataclass
class CNLayout:
    index: IndexConfig
    pool_bytes: int
    chunk_bytes: int = 64

    @property
    def header_base(self):
        return _align(self.index.nbytes, 64)

    @property
    def header_slots(self):
        return self.index.num_buckets

    @property
    def pool_base(self):
        return _align(self.header_base + self.header_slots * HEADER_BYTES, 64)

    @property
    def nbytes(self):
        return self.pool_base + self.pool_bytes


@dataclass
class EngineConfig:
    adaptive: bool = True
    lock_spin_limit: int = 1_000_000
    switch_spin_limit: int = 1_000_000
    evict_rounds: int = 4
    latency_capacity: int = 256


@dataclass
class _Meta:
    key: int
    size: int
    buf: int
    gen: int = 0
    pins: int = 0
    dying: bool = False
    ranges: list = field(default_factory=list)
    set_off: int = None
    owner_guess: int = 0


class EngineBase:
    """Bookkeeping shared by every coherence engine: events, timeouts, epochs."""

    name = "base"

    def _init_common(self, fabric, cn, coordinator):
        self.fabric = fabric
        self.cn = cn
        self.port = fabric.port(cn)
        self.coordinator = coordinator
        self.enabled = True
        self.inflight = Counter()
        self.events = Counter()
        self.event_bytes = Counter()
        self.invalidations = 0
        self.hits_while_fenced = 0
        self.sink = None

    def live_cns(self):
        if self.coordinator is not None:
            return self.coordinator.live_cns()
        return [n for n in self.fabric.nodes("cn") if self.fabric.alive(n)]

    def report_timeout(self, node):
        if self.coordinator is not None:
            self.coordinator.report_timeout(self.cn, node)

    def _epoch(self):
        return self.coordinator.epoch if self.coordinator is not None else 0

    def _event(self, worker, ev, t0, nbytes):
        lat = self.fabric.sim.now - t0
        self.events[ev] += 1
        self.event_bytes[ev] += nbytes
        self._record_latency(worker, ev, lat)
        if ev == "read-hit" and self.coordinator is not None and self.coordinator.fencing:
            self.hits_while_fenced += 1
        if self.sink is not None:
            self.sink(self.cn, ev, lat, nbytes)

    def _record_latency(self, worker, ev, lat):
        pass

    def _guard(self, gen):
        ep = self._epoch()
        self.inflight[ep] += 1
        try:
            return (yield from gen)
        except NodeDead as err:
            if err.node == self.cn:
                raise
            self.report_timeout(err.node)
            raise OpTimeout(err.node) from err
        finally:
            self.inflight[ep] -= 1
            if not self.inflight[ep]:
                del self.inflight[ep]

    def inflight_before(self, epoch):
        return sum(n for e, n in self.inflight.items() if e < epoch)

    def read_batch(self, items, worker=0):
        """``items``: (obj, length) pairs; results (or exceptions) in order."""
        return (yield Join([self.read(o, n, worker) for o, n in items]))

    def write_batch(self, items, worker=0):
        return (yield Join([self.write(o, d, worker) for o, d in items]))

    def wipe(self, reset_owner=False, mn=None):
        pass


class CacheEngine(EngineBase):
    """Decentralized-coherence cache on one CN.

    All public operations are generators to be run on the cluster scheduler.
    """

    name = "difache"

    def __init__(self, fabric, cn, layout, mn_layouts, coordinator=None, config=None,
                 tracking=TrackingMode.BROADCAST):
        self._init_common(fabric, cn, coordinator)
        self.layout = layout
        # one layout for every MN, or a {node: layout} map
        self.mn_layouts = mn_layouts
        self.config = config or EngineConfig()
        self.adaptive = self.config.adaptive
        self.index = HopscotchIndex(self.port, 0, layout.index)
        self.pool = BufferPool(layout.pool_base, layout.pool_bytes, layout.chunk_bytes)
        self._slots = list(range(layout.header_slots - 1, -1, -1))
        self.meta = {}
        self._tracking = tracking
        self.switches = Counter()
        self.skip_invalidation = False  # mutation hook for negative controls
        self.pending_invalidations = Counter()  # (writer cn, target cn, key) in flight
        self._probe_seq = 0
        cfg = fabric.config
        rtt, lc = cfg.base_rtt, cfg.local_op_cost
        self.latency = LatencyBuffers(self.config.latency_capacity, {
            "read-hit": 3 * lc, "read-miss": rtt + 4 * lc, "read-bypass": rtt + 2 * lc,
            "write-bypass": rtt + 2 * lc, "write-cached": 2 * rtt + 4 * lc})

    # -- hooks used by adaptive and coordinator ---------------------------------
    @property
    def tracking(self):
        if self.coordinator is not None:
            return self.coordinator.mode
        return self._tracking

    def mn_layout_of(self, node):
        if isinstance(self.mn_layouts, dict):
            return self.mn_layouts[node]
        return self.mn_layouts

    def latencies(self):
        return self.latency.latencies()

    def metrics_switch_attempt(self, obj, target):
        self.switches["attempt_on" if target else "attempt_off"] += 1

    def on_switch(self, obj, new_on):
        self.switches["on" if new_on else "off"] += 1

    # -- header helpers ----------------------------------------------------------
    def _state(self, hoff):
        return read_u64(self.port.mem, hoff + STATE_AT)

    def _set_state(self, hoff, value):
        write_u64(self.port.mem, hoff + STATE_AT, value)

    def header(self, hoff):
        return CacheHeader.unpack(self.port.mem, hoff)

    def header_for(self, obj):
        """Zero-cost (header offset, CacheHeader) for tests; None if absent."""
        hoff = self.index.peek(obj.pack())
        return None if hoff is None else (hoff, self.header(hoff))

    def _score(self, hoff):
        m = self.meta.get(hoff)
        if m is None or m.pins or m.dying:
            return None
        s = self._state(hoff)
        if s & SWITCHING:
            return None
        _, _, total = lanes(read_u64(self.port.mem, hoff + 8))
        return (1 if s & MODE_ON else 0, total)

    def _claim(self, hoff):
        self.meta[hoff].dying = True

    def _release_header(self, hoff):
        m = self.meta.pop(hoff)
        self.port.mem[hoff:hoff + HEADER_BYTES] = bytes(HEADER_BYTES)
        if m.buf is not None:
            self.pool.free(m.buf)
        self._slots.append((hoff - self.layout.header_base) // HEADER_BYTES)

    def _make_room(self, key):
        victim = yield from self.index.evict(key, self._score, self.cn + 1, self._claim)
        if victim is None:
            return False
        self._release_header(victim[1])
        self.events["evict"] += 1
        return True

    def _evict_any(self):
        """Clock-free fallback: evict the best of up to 16 in-use headers."""
        best = None
        for hoff in list(self.meta)[:16]:
            s = self._score(hoff)
            if s is not None and (best is None or s < best[0]):
                best = (s, hoff)
        if best is None:
            return False
        hoff = best[1]
        m = self.meta[hoff]
        m.dying = True
        yield from self.index.remove(m.key, self.cn + 1)
        self._release_header(hoff)
        self.events["evict"] += 1
        return True

    def _pin_existing(self, key, size):
        """Same-step lookup and pin. Returns hoff, None (absent) or False (busy/too small)."""
        hoff = self.index.peek(key)
        if hoff is None:
            return None
        m = self.meta.get(hoff)
        if m is None or m.dying or m.size < size:
            return False
        m.pins += 1
        return hoff

    def _unpin(self, hoff):
        m = self.meta.get(hoff)
        if m is not None:
            m.pins -= 1

    def _acquire_header(self, obj, size):
        """Pinned header offset for ``obj``, allocating one if needed; None to bypass."""
        key = obj.pack()
        for _ in range(8):
            yield from self.port.local()
            hoff = self._pin_existing(key, size)
            if hoff:
                return hoff
            if hoff is False:
                m = self.meta.get(self.index.peek(key) or -1)
                if m is not None and not m.dying:
                    return None  # cached with a smaller size; go around the cache
                continue
            hoff = yield from self._allocate(obj, size)
            if hoff is not False:
                return hoff
        return None

    def _allocate(self, obj, size):
        lock_off = yield from adaptive.acquire_mode_lock(self, obj)
        try:
            hoff = yield from self._allocate_locked(obj, size)
        except NodeDead as err:
            if err.node != obj.node:
                yield from adaptive.release_mode_lock(self, obj, lock_off)
            raise
        yield from adaptive.release_mode_lock(self, obj, lock_off)
        return hoff

    def _allocate_locked(self, obj, size):
        key = obj.pack()
        yield from self.port.local()
        hoff = self._pin_existing(key, size)
        if hoff is not None:
            return hoff
        if self.adaptive:
            state, thr, interval = yield from adaptive.default_mode(self, obj)
        else:
            state, thr, interval = MODE_ON, to_fixed(DEFAULT_THRESHOLD), SETTLED_INTERVAL
        for _ in range(self.config.evict_rounds):
            if self._slots:
                break
            if not (yield from self._evict_any()):
                return None
        if not self._slots:
            return None
        buf = self.pool.alloc(size)
        rounds = 0
        while buf is None and rounds < self.config.evict_rounds:
            rounds += 1
            freed = yield from self._make_room(key)
            if not freed:
                freed = yield from self._evict_any()
            if not freed:
                break
            buf = self.pool.alloc(size)
        if buf is None:
            return None
        slot = self._slots.pop()
        hoff = self.layout.header_base + slot * HEADER_BYTES
        self.meta[hoff] = _Meta(key=key, size=size, buf=buf, pins=1)
        yield from self.port.local()
        hdr = CacheHeader(state=state, threshold=thr, interval=interval, buf_offset=buf,
                          size=size, owner_slot=NO_SLOT)
        self.port.mem[hoff:hoff + HEADER_BYTES] = hdr.pack()
        for _ in range(self.config.evict_rounds + 1):
            status, value = yield from self.index.insert(key, hoff, self.cn + 1)
            if status is InsertStatus.INSERTED:
                return hoff
            if status is InsertStatus.ALREADY_PRESENT:
                # another local worker won; drop ours
                self.meta[hoff].pins = 0
                self._release_header(hoff)
                m = self.meta.get(value)
                if m is None or m.dying or m.size < size:
                    return False
                m.pins += 1
                return value
            if not (yield from self._make_room(key)):
                break
        self.meta[hoff].pins = 0
        self._release_header(hoff)
        return None

    # -- owner sets --------------------------------------------------------------
    def _owner_set(self, obj, hoff):
        m = self.meta[hoff]
        if m.set_off is None:
            m.set_off = yield from ensure_owner_set(self.port, self.mn_layout_of(obj.node).directory, obj)
            slot = self.mn_layout_of(obj.node).directory.slot_of_set(m.set_off)
            self.port.mem[hoff + OWNER_SLOT_AT:hoff + OWNER_SLOT_AT + 4] = slot.to_bytes(4, "little")
        return m.set_off

    def _record_latency(self, worker, ev, lat):
        self.latency.record((self.cn, worker), ev, lat)

    # -- public API ------------------------------------------------------------------
    def read(self, obj, length, worker=0):
        """Read ``length`` bytes of object ``obj`` through the cache."""
        return self._guard(self._read(obj, length, 0, length, worker))

    def write(self, obj, data, worker=0):
        return self._guard(self._write(obj, len(data), 0, bytes(data), worker))

    def read_nested(self, obj, length, ancestor, ancestor_len, worker=0):
        lo = self._nested_range(obj, length, ancestor, ancestor_len)
        return self._guard(self._read(ancestor, ancestor_len, lo, lo + length, worker))

    def write_nested(self, obj, data, ancestor, ancestor_len, worker=0):
        lo = self._nested_range(obj, len(data), ancestor, ancestor_len)
        return self._guard(self._write(ancestor, ancestor_len, lo, bytes(data), worker))

    @staticmethod
    def _nested_range(obj, length, ancestor, ancestor_len):
        lo = obj.offset - ancestor.offset
        if obj.node != ancestor.node or lo < 0 or lo + length > ancestor_len:
            raise RangeNotContained("%r+%d not inside %r+%d" % (obj, length, ancestor, ancestor_len))
        return lo

    def cas(self, obj, expected, new, worker=0):
        return self._guard(self._atomic(obj, "cas", (expected, new)))

    def faa(self, obj, addend, worker=0):
        return self._guard(self._atomic(obj, "faa", (addend,)))

    cache_read = read
    cache_write = write
    cache_read_batch = EngineBase.read_batch
    cache_write_batch = EngineBase.write_batch
    cache_read_nested = read_nested
    cache_write_nested = write_nested

    # -- paths -----------------------------------------------------------------------
    def _bypass_read(self, obj, lo, hi, worker, t0):
        data = yield from self.port.read(obj.node, obj.offset + lo, hi - lo, tag="data_read")
        self._event(worker, "read-bypass", t0, hi - lo)
        return data

    def _read(self, obj, size, lo, hi, worker):
        t0 = self.fabric.sim.now
        hoff = yield from self._acquire_header(obj, size)
        if hoff is None:
            return (yield from self._bypass_read(obj, lo, hi, worker, t0))
        try:
            s = yield from mode_check_and_update(self, obj, hoff, True, worker)
            if not s & MODE_ON or not self.enabled:
                return (yield from self._bypass_read(obj, lo, hi, worker, t0))
            m = self.meta[hoff]
            if s & VALID:
                yield from self.port.local(hi - lo)
                s = self._state(hoff)
                if s & VALID and self.enabled and _covers(m.ranges, lo, hi):
                    data = bytes(self.port.mem[m.buf + lo:m.buf + hi])
                    self._event(worker, "read-hit", t0, 0)
                    return data
            return (yield from self._miss(obj, hoff, lo, hi, worker, t0))
        finally:
            self._unpin(hoff)

    def _miss(self, obj, hoff, lo, hi, worker, t0):
        m = self.meta[hoff]
        if self.tracking is TrackingMode.OWNER_SETS:
            try:
                set_off = yield from self._owner_set(obj, hoff)
            except DirectoryFull:
                return (yield from self._bypass_read(obj, lo, hi, worker, t0))
            m.owner_guess = yield from record_owner(self.port, obj.node, set_off, self.cn,
                                                    m.owner_guess)
        yield from self.port.local()
        s = self._state(hoff)
        if s & SWITCHING or not s & MODE_ON or not self.enabled:
            return (yield from self._bypass_read(obj, lo, hi, worker, t0))
        if s & FILLING:
            # someone else is filling; fetch without publishing
            data = yield from self.port.read(obj.node, obj.offset + lo, hi - lo, tag="data_read")
            self._event(worker, "read-miss", t0, hi - lo)
            return data
        if not s & VALID:
            m.ranges = []
        m.gen += 1
        gen = m.gen
        self._set_state(hoff, s | FILLING)
        try:
            data = yield from self.port.read(obj.node, obj.offset + lo, hi - lo, tag="data_read")
        except BaseException:
            if m.gen == gen:
                self._set_state(hoff, self._state(hoff) & ~FILLING)
            raise
        yield from self.port.local(hi - lo)
        s = self._state(hoff)
        if m.gen == gen and s & FILLING:
            if s & MODE_ON and not s & SWITCHING and self.enabled:
                self.port.mem[m.buf + lo:m.buf + hi] = data
                m.ranges.append((lo, hi))
                self._set_state(hoff, (s & ~FILLING) | VALID)
            else:
                self._set_state(hoff, s & ~FILLING)
        self._event(worker, "read-miss", t0, hi - lo)
        return data

    def _write(self, obj, size, lo, data, worker):
        t0 = self.fabric.sim.now
        hi = lo + len(data)
        hoff = yield from self._acquire_header(obj, size)
        if hoff is None:
            # uncached here, but peers may hold it
            yield from self.port.write(obj.node, obj.offset + lo, data, tag="data_write")
            yield from self._invalidate_peers(obj, None)
            self._event(worker, "write-bypass", t0, len(data))
            return None
        try:
            s = yield from mode_check_and_update(self, obj, hoff, False, worker)
            if not s & MODE_ON:
                yield from self.port.write(obj.node, obj.offset + lo, data, tag="data_write")
                yield from self.port.local()
                if self._state(hoff) & (MODE_ON | SWITCHING):
                    # a switch to on overlapped the write; finish it as a cached write
                    s = yield from wait_not_switching(self, hoff)
                    if s & MODE_ON:
                        yield from self._invalidate_local(hoff)
                        yield from self._invalidate_peers(obj, hoff)
                self._event(worker, "write-bypass", t0, len(data))
                return None
            m = self.meta[hoff]
            yield from self._invalidate_local(hoff)
            yield from self.port.write(obj.node, obj.offset + lo, data, tag="data_write")
            yield from self._invalidate_peers(obj, hoff)
            if not self.enabled:
                self._event(worker, "write-bypass", t0, len(data))
                return None
            yield from self.port.local(len(data))
            s = self._state(hoff)
            if s & MODE_ON and not s & SWITCHING and self.enabled:
                self.port.mem[m.buf + lo:m.buf + hi] = data
                m.gen += 1
                m.ranges = [(lo, hi)]
                self._set_state(hoff, (s & ~FILLING) | VALID)
            self._event(worker, "write-cached", t0, len(data))
            return None
        finally:
            self._unpin(hoff)

    def _invalidate_local(self, hoff):
        yield from self.port.local()
        m = self.meta[hoff]
        m.gen += 1
        m.ranges = []
        self._set_state(hoff, self._state(hoff) & _INVALID_MASK)

    def _invalidate_peers(self, obj, hoff):
        """Collect owners and invalidate them all in parallel (after the flush)."""
        live = self.live_cns()
        key = obj.pack()
        targets = None
        # intent covers every peer until the owner swap says who really needs it
        pend = {(self.cn, c, key) for c in live if c != self.cn}
        self.pending_invalidations.update(pend)
        try:
            if self.tracking is TrackingMode.OWNER_SETS:
                try:
                    if hoff is not None:
                        set_off = yield from self._owner_set(obj, hoff)
                        guess = self.meta[hoff].owner_guess
                    else:
                        set_off = yield from ensure_owner_set(
                            self.port, self.mn_layout_of(obj.node).directory, obj)
                        guess = 0
                    targets, _ = yield from acquire_and_collect_owners(
                        self.port, obj.node, set_off, self.cn, live, guess)
                    if hoff is not None:
                        self.meta[hoff].owner_guess = 1 << (self.cn % 64)
                except DirectoryFull:
                    targets = None
            if targets is None:
                targets = [c for c in live if c != self.cn]
            self.pending_invalidations.subtract(pend)
            pend = {(self.cn, c, key) for c in targets}
            self.pending_invalidations.update(pend)
            if self.skip_invalidation or not targets:
                return
            results = yield Join([self.invalidate_remote(c, obj) for c in targets])
        finally:
            self.pending_invalidations.subtract(pend)
            self.pending_invalidations += Counter()  # drop zero counts
        for c, res in zip(targets, results):
            if isinstance(res, NodeDead) and res.node == c:
                self.report_timeout(c)
            elif isinstance(res, Exception):
                raise res

    def invalidate_remote(self, cn, obj):
        """Clear VALID (and FILLING) of ``obj``'s header on ``cn``, if it has one."""
        self._probe_seq += 1
        probe = ("inv", self.cn, self._probe_seq)
        self.invalidations += 1
        hoff = yield from lookup_remote(self.port, cn, self.index.base, self.index.config,
                                        obj.pack(), probe)
        if hoff is None:
            return False
        off = hoff + STATE_AT
        expected = MODE_ON | VALID
        for _ in range(64):
            old = yield from self.port.cas(cn, off, expected, expected & _INVALID_MASK,
                                           tag="invalidate")
            if old == expected or not old & (VALID | FILLING):
                return True
            expected = old
        return True

    def _atomic(self, obj, kind, args):
        yield from adaptive.switch_mode(self, obj, False)
        if kind == "cas":
            return (yield from self.port.cas(obj.node, obj.offset, *args, tag="app_atomic"))
        return (yield from self.port.faa(obj.node, obj.offset, *args, tag="app_atomic"))

    # -- coordinator hooks -------------------------------------------------------------
    def wipe(self, reset_owner=False, mn=None):
        """Drop every valid copy (optionally only those sourced on MN ``mn``)."""
        mem = self.port.mem
        for hoff, m in self.meta.items():
            if mn is not None and RemoteAddr.unpack(m.key).node != mn:
                continue
            write_u64(mem, hoff + STATE_AT, read_u64(mem, hoff + STATE_AT) & _INVALID_MASK)
            m.gen += 1
            m.ranges = []
            if reset_owner:
                m.set_off = None
                m.owner_guess = 0
                mem[hoff + OWNER_SLOT_AT:hoff + OWNER_SLOT_AT + 4] = NO_SLOT.to_bytes(4, "little")

    def cached_valid(self, obj):
        """True when this CN holds a valid copy of ``obj`` (zero cost)."""
        hoff = self.index.peek(obj.pack())
        return hoff is not None and bool(self._state(hoff) & VALID)


def _covers(ranges, lo, hi):
    for a, b in ranges:
        if a <= lo and hi <= b:
            return True
    return False
