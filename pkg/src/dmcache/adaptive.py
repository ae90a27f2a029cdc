"""Fine-grained adaptive caching.

Each object's header counts reads, read hits and total operations. Every
``interval`` operations the client that completes the interval resets the
counters and compares the observed read ratio against a threshold: the read
ratio at which caching breaks even given the per-event latencies this CN is
currently measuring. Crossing it switches the object's cache mode on every
CN at once, under a mode lock on the object's MN.
"""

from collections import deque
from dataclasses import dataclass
from enum import Enum
import statistics

from . import kernels
from .cache_index import lookup_remote
from .fabric import NodeDead, read_u64, write_u64
from .layout import (COUNTERS_AT, DEFAULT_THRESHOLD, HEADER_BYTES, HITS_ONE,
                     INITIAL_INTERVAL, INTERVAL_AT, MODE_ON, READS_ONE,
                     SETTLED_INTERVAL, STATE_AT, SWITCHING, THRESHOLD_AT,
                     THRESHOLD_ONE, TOTAL_ONE, VALID, CacheHeader, lanes,
                     pack_tail, to_fixed)
from .sim import Join

EVENTS = ("read-hit", "read-miss", "write-cached", "read-bypass", "write-bypass")


class SwitchStuck(Exception):
    pass


class ModeLockTimeout(Exception):
    pass


class SwitchResult(Enum):
    SWITCHED = "switched"
    ALREADY_SWITCHED = "already_switched"


@dataclass
class ProfitInputs:
    r_rhit: float
    r_rmiss: float
    r_w: float
    t_rb: float
    t_rhit: float
    t_rmiss: float
    t_wb: float
    t_wcached: float

    @classmethod
    def from_rates(cls, read_ratio, hit_rate, latencies):
        return cls(read_ratio * hit_rate, read_ratio * (1.0 - hit_rate), 1.0 - read_ratio,
                   **latencies)


def profit(p):
    """Expected time saved per operation by caching (negative: caching hurts)."""
    return (p.r_rhit * (p.t_rb - p.t_rhit)
            + p.r_rmiss * (p.t_rb - p.t_rmiss)
            + p.r_w * (p.t_wb - p.t_wcached))


def break_even_threshold(hit_rate, t_rb, t_rhit, t_rmiss, t_wb, t_wcached):
    """Read ratio where profit is zero, clamped to [0, 1]."""
    dw = t_wcached - t_wb
    denom = dw + hit_rate * (t_rb - t_rhit) + (1.0 - hit_rate) * (t_rb - t_rmiss)
    if denom <= 0:
        # profit never rises with the read ratio: it pays at r = 0 or nowhere
        return 0.0 if dw < 0 else 1.0
    return min(1.0, max(0.0, dw / denom))


class LatencyBuffers:
    """Per-worker circular buffers of recent latencies, one per event class."""

    def __init__(self, capacity=256, defaults=None):
        self.capacity = capacity
        self.defaults = dict(defaults or {})
        self._buffers = {}
        self._cache = None
        self._dirty = 0

    def record(self, worker, event, latency):
        per = self._buffers.get(worker)
        if per is None:
            per = self._buffers[worker] = {e: deque(maxlen=self.capacity) for e in EVENTS}
        per[event].append(latency)
        self._dirty += 1

    def aggregate(self, event):
        """Mean over workers of each worker's median, or the default."""
        meds = [statistics.median(per[event]) for per in self._buffers.values() if per[event]]
        if not meds:
            return self.defaults.get(event)
        return sum(meds) / len(meds)

    def latencies(self):
        """Profit-model latency kwargs; recomputed after every 64 new samples."""
        if self._cache is None or self._dirty >= 64:
            agg = {e: self.aggregate(e) for e in EVENTS}
            self._cache = dict(t_rb=agg["read-bypass"], t_rhit=agg["read-hit"],
                               t_rmiss=agg["read-miss"], t_wb=agg["write-bypass"],
                               t_wcached=agg["write-cached"])
            self._dirty = 0
        return self._cache


# -- mode locks ------------------------------------------------------------------

def mode_lock_offset(mn_layout, key):
    return mn_layout.mode_lock_base + (kernels.mix64(key) % mn_layout.mode_lock_count) * 8


def acquire_mode_lock(engine, obj):
    port = engine.port
    off = mode_lock_offset(engine.mn_layout_of(obj.node), obj.pack())
    token = engine.cn + 1
    for _ in range(engine.config.lock_spin_limit):
        old = yield from port.cas(obj.node, off, 0, token, tag="mode_lock")
        if old == 0:
            return off
        holder = old - 1
        if engine.coordinator is not None and not engine.coordinator.is_live(holder):
            # holder died with the lock; take it over
            old2 = yield from port.cas(obj.node, off, old, token, tag="mode_lock")
            if old2 == old:
                return off
        yield engine.fabric.config.base_rtt
    raise ModeLockTimeout("mode lock for %r" % (obj,))


def release_mode_lock(engine, obj, off):
    yield from engine.port.cas(obj.node, off, engine.cn + 1, 0, tag="mode_lock")


# -- mode check --------------------------------------------------------------------

def wait_not_switching(engine, hoff):
    """Step 1: load the state word until no switch is in progress."""
    port = engine.port
    mem = port.mem
    for _ in range(engine.config.switch_spin_limit):
        yield from port.local()
        s = read_u64(mem, hoff + STATE_AT)
        if not s & SWITCHING:
            return s
    raise SwitchStuck("switching flag at header %d never cleared" % hoff)


def mode_check_and_update(engine, obj, hoff, is_read, worker):
    """Steps 1-3 of the mode check; may run a switch (step 4).

    Returns the state word to act on: the one loaded in step 1, or a fresh
    load if this call just switched the mode.
    """
    s = yield from wait_not_switching(engine, hoff)
    if not engine.adaptive:
        return s
    port = engine.port
    mem = port.mem
    if is_read:
        addend = READS_ONE | TOTAL_ONE
        if s & VALID and s & MODE_ON:
            addend |= HITS_ONE
    else:
        addend = TOTAL_ONE
    yield from port.local()
    new = read_u64(mem, hoff + COUNTERS_AT) + addend
    write_u64(mem, hoff + COUNTERS_AT, new)
    reads, hits, total = lanes(new)
    interval = int.from_bytes(mem[hoff + INTERVAL_AT:hoff + INTERVAL_AT + 2], "little")
    if total < interval:
        return s
    yield from port.local()
    if read_u64(mem, hoff + COUNTERS_AT) != new:
        return s  # someone else raced past the interval; they handle it
    write_u64(mem, hoff + COUNTERS_AT, 0)
    mode_on = bool(s & MODE_ON)
    if mode_on:
        hit_rate = hits / reads if reads else 0.0
        thr = to_fixed(break_even_threshold(hit_rate, **engine.latencies()))
        mem[hoff + THRESHOLD_AT:hoff + THRESHOLD_AT + 2] = thr.to_bytes(2, "little")
    else:
        thr = int.from_bytes(mem[hoff + THRESHOLD_AT:hoff + THRESHOLD_AT + 2], "little")
    # r >= thr compared exactly in fixed point
    above = reads * THRESHOLD_ONE >= thr * total
    if mode_on and not above:
        target = False
    elif not mode_on and above:
        target = True
    else:
        return s
    engine.metrics_switch_attempt(obj, target)
    yield from switch_mode(engine, obj, target)
    s = yield from wait_not_switching(engine, hoff)
    return s


# -- mode switch ---------------------------------------------------------------------

def _set_switching_remote(port, cn, hoff):
    state_off = hoff + STATE_AT
    expected = MODE_ON
    for _ in range(64):
        old = yield from port.cas(cn, state_off, expected, expected | SWITCHING,
                                  tag="switch_flag")
        if old == expected or old & SWITCHING:
            return
        expected = old
    raise SwitchStuck("could not flag header %d on node %d" % (hoff, cn))


def _finish_remote(port, cn, hoff, tail, state):
    yield from port.write(cn, hoff + THRESHOLD_AT, tail, tag="switch_sync")
    yield from port.write(cn, hoff + STATE_AT, state.to_bytes(8, "little"), tag="switch_state")


def find_remote_headers(engine, key, exclude=()):
    """{cn: header offset} for every live peer holding ``key`` in its index."""
    peers = [c for c in engine.live_cns() if c != engine.cn and c not in exclude]
    probes = []
    for c in peers:
        engine._probe_seq += 1
        probes.append(lookup_remote(engine.port, c, engine.index.base, engine.index.config,
                                    key, ("switch", engine.cn, engine._probe_seq)))
    results = yield Join(probes)
    found = {}
    for cn, res in zip(peers, results):
        if isinstance(res, NodeDead) and res.node == cn:
            engine.report_timeout(cn)
        elif isinstance(res, Exception):
            raise res
        elif res is not None:
            found[cn] = res
    return found


def switch_mode(engine, obj, new_on, key_addr=None):
    """Switch ``obj``'s mode on every CN; ``key_addr`` is the index key owner."""
    key_obj = key_addr or obj
    lock_off = yield from acquire_mode_lock(engine, key_obj)
    try:
        result = yield from _switch_locked(engine, key_obj, new_on)
    except NodeDead as err:
        if err.node != key_obj.node and engine.fabric.alive(key_obj.node):
            yield from release_mode_lock(engine, key_obj, lock_off)
        raise
    yield from release_mode_lock(engine, key_obj, lock_off)
    return result


def _switch_locked(engine, obj, new_on):
    port = engine.port
    mem = port.mem
    key = obj.pack()
    own = yield from engine.index.lookup_local(key)
    if own is not None:
        yield from port.local()
        if bool(read_u64(mem, own + STATE_AT) & MODE_ON) == new_on:
            return SwitchResult.ALREADY_SWITCHED
    remote = yield from find_remote_headers(engine, key)
    if own is None and remote:
        states = yield Join([port.read(cn, h + STATE_AT, 8, tag="switch_probe")
                             for cn, h in remote.items()])
        states = _peer_results(engine, remote, states)
        if states and all(bool(int.from_bytes(st, "little") & MODE_ON) == new_on
                          for st in states.values()):
            return SwitchResult.ALREADY_SWITCHED
        remote = {cn: remote[cn] for cn in states}
    # raise the switching flag everywhere before changing anything
    flags = [_set_switching_remote(port, cn, h) for cn, h in remote.items()]
    if own is not None:
        yield from port.local()
        write_u64(mem, own + STATE_AT, read_u64(mem, own + STATE_AT) | SWITCHING)
        thr = int.from_bytes(mem[own + THRESHOLD_AT:own + THRESHOLD_AT + 2], "little")
    else:
        thr = to_fixed(DEFAULT_THRESHOLD)
    res = yield Join(flags)
    _drop_dead(engine, remote, res)
    tail = pack_tail(thr, SETTLED_INTERVAL)
    state = MODE_ON if new_on else 0
    finish = [_finish_remote(port, cn, h, tail, state) for cn, h in remote.items()]
    if own is not None:
        yield from port.local()
        mem[own + THRESHOLD_AT:own + THRESHOLD_AT + 4] = tail
        write_u64(mem, own + STATE_AT, state)
    res = yield Join(finish)
    _drop_dead(engine, remote, res)
    engine.on_switch(obj, new_on)
    return SwitchResult.SWITCHED


def _drop_dead(engine, targets, results):
    for (cn, _), res in zip(list(targets.items()), results):
        if isinstance(res, NodeDead) and res.node == cn:
            engine.report_timeout(cn)
            targets.pop(cn, None)
        elif isinstance(res, Exception):
            raise res


def _peer_results(engine, targets, results):
    """{cn: result} for peers that answered; a dead peer is reported, anything else raised."""
    out = {}
    for cn, res in zip(list(targets), results):
        if isinstance(res, NodeDead) and res.node == cn:
            engine.report_timeout(cn)
        elif isinstance(res, Exception):
            raise res
        else:
            out[cn] = res
    return out


def default_mode(engine, obj):
    """Initial (state, threshold_fixed, interval) for a new header.

    Caller holds the object's mode lock. Adopts the settings of any peer
    that already indexes the object; otherwise caching starts off.
    """
    key = obj.pack()
    remote = yield from find_remote_headers(engine, key)
    port = engine.port
    for _ in range(engine.config.switch_spin_limit):
        if not remote:
            break
        reads = yield Join([port.read(cn, h, HEADER_BYTES, tag="mode_probe")
                            for cn, h in remote.items()])
        headers = [CacheHeader.unpack(r) for r in _peer_results(engine, remote, reads).values()]
        if not headers:
            break
        if any(h.switching for h in headers):
            yield engine.fabric.config.base_rtt
            continue
        h = headers[0]
        return h.state & MODE_ON, h.threshold, h.interval
    return 0, to_fixed(DEFAULT_THRESHOLD), INITIAL_INTERVAL
