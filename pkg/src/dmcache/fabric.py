"""Simulated multi-node memory fabric.

Every node owns one registered byte region. Compute nodes reach any region
through one-sided operations (read, write, compare-and-swap, fetch-and-add)
issued from a ``Port``; each operation is a generator that sleeps for its
simulated cost, so it is also an interleaving point for the scheduler.

Time is measured in microsecond-like units. Costs:

    request leg  = base_rtt/2 (+ payload bytes * per_byte_cost for writes)
                   + queuing delay at a memory node's byte token bucket
    response leg = base_rtt/2 (+ payload bytes * per_byte_cost for reads)

Memory is word-atomic: an operation's effect on memory happens at a single
instant, except that with ``torn_read_injection`` a write longer than one
8-byte word lands as a few ascending word-aligned chunks with interleaving
points between them. Reads therefore may observe a prefix of new words
followed by old ones, but never a torn word.
"""

from dataclasses import dataclass, field
from enum import Enum
import struct
from typing import NamedTuple

from .sim import Scheduler

_U64 = struct.Struct("<Q")
_M64 = (1 << 64) - 1


class FabricError(Exception):
    pass


class NodeDead(FabricError):
    """The target node did not answer before the timeout."""

    def __init__(self, node, msg=None):
        super().__init__(msg or "node %d is dead" % node)
        self.node = node


class OutOfBounds(FabricError):
    pass


class Misaligned(FabricError):
    pass


class NodeKind(Enum):
    CN = "cn"
    MN = "mn"
    MANAGER = "manager"


class NodeId(NamedTuple):
    id: int
    kind: NodeKind


class RemoteAddr(NamedTuple):
    """Identity of a source object: node id plus byte offset in its region."""

    node: int
    offset: int

    def pack(self):
        """16-bit node id and 48-bit offset in one word; never 0 for a valid address."""
        return (self.node << 48) | self.offset

    @classmethod
    def unpack(cls, word):
        return cls(word >> 48, word & ((1 << 48) - 1))


@dataclass
class FabricConfig:
    base_rtt: float = 3.0
    per_byte_cost: float = 1.0 / 12500.0      # 100 Gbps in bytes per unit
    mn_bandwidth_cap: float = 12.5e9          # bytes per simulated second
    torn_read_injection: bool = False
    seed: int = 0
    local_op_cost: float = 0.15
    local_per_byte: float = 1.0 / 50000.0
    timeout: float = 30.0
    bucket_burst: int = 16384
    torn_chunks: int = 4

    def __post_init__(self):
        for name in ("base_rtt", "per_byte_cost", "mn_bandwidth_cap", "local_op_cost",
                     "local_per_byte", "timeout"):
            if getattr(self, name) < 0:
                raise ValueError("%s must be >= 0" % name)


class TokenBucket:
    """Byte token bucket. Requests borrow against future refill; the debt
    turns into queuing delay for the borrower."""

    __slots__ = ("rate", "burst", "tokens", "stamp")

    def __init__(self, rate_per_unit, burst):
        self.rate = rate_per_unit
        self.burst = burst
        self.tokens = float(burst)
        self.stamp = 0.0

    def charge(self, now, nbytes):
        if self.rate <= 0:
            return 0.0
        if now > self.stamp:
            self.tokens = min(self.burst, self.tokens + (now - self.stamp) * self.rate)
            self.stamp = now
        self.tokens -= nbytes
        if self.tokens >= 0:
            return 0.0
        return -self.tokens / self.rate


@dataclass
class FabricStats:
    ops_out: dict = field(default_factory=dict)     # node -> {kind: count}
    ops_in: dict = field(default_factory=dict)
    bytes_out: dict = field(default_factory=dict)   # node -> bytes
    bytes_in: dict = field(default_factory=dict)
    queue_delay: dict = field(default_factory=dict)  # MN -> cumulative delay
    latency: dict = field(default_factory=dict)     # op kind -> [samples]
    keep_latency: bool = True

    def _count(self, src, dst, kind, nout, nin):
        d = self.ops_out.setdefault(src, {})
        d[kind] = d.get(kind, 0) + 1
        d = self.ops_in.setdefault(dst, {})
        d[kind] = d.get(kind, 0) + 1
        # nout flows src -> dst, nin flows dst -> src
        self.bytes_out[src] = self.bytes_out.get(src, 0) + nout
        self.bytes_in[dst] = self.bytes_in.get(dst, 0) + nout
        self.bytes_out[dst] = self.bytes_out.get(dst, 0) + nin
        self.bytes_in[src] = self.bytes_in.get(src, 0) + nin

    def total_ops(self, kind=None):
        n = 0
        for per in self.ops_out.values():
            n += sum(per.values()) if kind is None else per.get(kind, 0)
        return n

    def node_bytes(self, node):
        return self.bytes_in.get(node, 0) + self.bytes_out.get(node, 0)


class TraceEntry(NamedTuple):
    time: float
    src: int
    dst: int
    kind: str
    offset: int
    length: int
    tag: object
    proc: str = None      # name of the issuing simulated process


class Fabric:
    """Node regions plus the cost model. Use ``port(src)`` to issue ops."""

    def __init__(self, config=None, sim=None):
        self.config = config or FabricConfig()
        self.sim = sim or Scheduler()
        self.stats = FabricStats()
        self.trace = None
        self._mem = {}
        self._kind = {}
        self._alive = {}
        self._buckets = {}

    def enable_trace(self):
        self.trace = []
        return self.trace

    # -- topology -----------------------------------------------------------
    def add_node(self, kind, size, node_id=None):
        if node_id is None:
            node_id = max(self._mem, default=-1) + 1
        if node_id in self._mem:
            raise ValueError("node %d already exists" % node_id)
        self._mem[node_id] = bytearray(size)
        self._kind[node_id] = NodeKind(kind)
        self._alive[node_id] = True
        if self._kind[node_id] is NodeKind.MN:
            rate = self.config.mn_bandwidth_cap / 1e6
            self._buckets[node_id] = TokenBucket(rate, self.config.bucket_burst)
            self.stats.queue_delay[node_id] = 0.0
        return node_id

    def node(self, node_id):
        return NodeId(node_id, self._kind[node_id])

    def nodes(self, kind=None):
        kind = None if kind is None else NodeKind(kind)
        return [n for n in sorted(self._mem) if kind is None or self._kind[n] is kind]

    def memory(self, node_id):
        return self._mem[node_id]

    def alive(self, node_id):
        return self._alive[node_id]

    def inject_failure(self, node_id):
        self._alive[node_id] = False

    def recover(self, node_id):
        """Bring a node back with a zeroed region."""
        mem = self._mem[node_id]
        mem[:] = bytes(len(mem))
        self._alive[node_id] = True
        if node_id in self._buckets:
            self._buckets[node_id] = TokenBucket(self.config.mn_bandwidth_cap / 1e6,
                                                 self.config.bucket_burst)

    def port(self, src):
        return Port(self, src)

    # -- helpers used by ports ------------------------------------------------
    def _check_range(self, dst, offset, length):
        mem = self._mem.get(dst)
        if mem is None:
            raise OutOfBounds("no node %r" % (dst,))
        if offset < 0 or length < 0 or offset + length > len(mem):
            raise OutOfBounds("range [%d, %d) outside node %d region of %d bytes"
                              % (offset, offset + length, dst, len(mem)))
        return mem

    def _queue(self, dst, nbytes):
        bucket = self._buckets.get(dst)
        if bucket is None:
            return 0.0
        delay = bucket.charge(self.sim.now, nbytes)
        if delay:
            self.stats.queue_delay[dst] += delay
        return delay


class Port:
    """One node's handle for issuing fabric operations (all are generators)."""

    __slots__ = ("fabric", "src", "sim", "cfg", "stats")

    def __init__(self, fabric, src):
        self.fabric = fabric
        self.src = src
        self.sim = fabric.sim
        self.cfg = fabric.config
        self.stats = fabric.stats

    def _dead(self, dst):
        # the caller waits out the timeout before learning the node is gone
        yield self.cfg.timeout
        raise NodeDead(dst)

    def _begin(self, dst, kind, offset, length, tag, nout, nin):
        fab = self.fabric
        if not fab._alive[self.src]:
            raise NodeDead(self.src, "issuing node %d is dead" % self.src)
        fab._check_range(dst, offset, length)
        self.stats._count(self.src, dst, kind, nout, nin)
        if fab.trace is not None:
            fab.trace.append(TraceEntry(self.sim.now, self.src, dst, kind, offset, length, tag,
                                        self.sim.current_name))
        return fab._queue(dst, nout + nin)

    def _record(self, kind, t0):
        if self.stats.keep_latency:
            self.stats.latency.setdefault(kind, []).append(self.sim.now - t0)

    def read(self, dst, offset, length, tag=None):
        t0 = self.sim.now
        fab = self.fabric
        if not fab._alive.get(dst, True):
            yield from self._dead(dst)
        q = self._begin(dst, "read", offset, length, tag, 0, length)
        half = self.cfg.base_rtt * 0.5
        yield half + q
        if not fab._alive[dst]:
            yield from self._dead(dst)
        data = bytes(fab._mem[dst][offset:offset + length])
        yield half + length * self.cfg.per_byte_cost
        self._record("read", t0)
        return data

    def write(self, dst, offset, data, tag=None):
        t0 = self.sim.now
        fab = self.fabric
        n = len(data)
        if not fab._alive.get(dst, True):
            yield from self._dead(dst)
        q = self._begin(dst, "write", offset, n, tag, n, 0)
        cfg = self.cfg
        half = cfg.base_rtt * 0.5
        xfer = n * cfg.per_byte_cost
        if cfg.torn_read_injection and n > 8:
            chunks = _word_chunks(offset, n, cfg.torn_chunks)
            yield half + q + xfer / len(chunks)
            step = xfer / len(chunks)
            for i, (lo, hi) in enumerate(chunks):
                if i:
                    yield step
                if not fab._alive[dst]:
                    yield from self._dead(dst)
                fab._mem[dst][offset + lo:offset + hi] = data[lo:hi]
        else:
            yield half + q + xfer
            if not fab._alive[dst]:
                yield from self._dead(dst)
            fab._mem[dst][offset:offset + n] = data
        yield half
        self._record("write", t0)

    def _atomic(self, dst, offset, kind, fn, tag):
        t0 = self.sim.now
        fab = self.fabric
        if offset % 8:
            raise Misaligned("atomic at unaligned offset %d" % offset)
        if not fab._alive.get(dst, True):
            yield from self._dead(dst)
        q = self._begin(dst, kind, offset, 8, tag, 8, 8)
        half = self.cfg.base_rtt * 0.5
        yield half + q
        if not fab._alive[dst]:
            yield from self._dead(dst)
        mem = fab._mem[dst]
        old = _U64.unpack_from(mem, offset)[0]
        new = fn(old)
        if new != old:
            _U64.pack_into(mem, offset, new)
        yield half
        self._record(kind, t0)
        return old

    def cas(self, dst, offset, expected, new, tag=None):
        return self._atomic(dst, offset, "cas",
                            lambda old: new if old == expected else old, tag)

    def faa(self, dst, offset, addend, tag=None):
        return self._atomic(dst, offset, "faa", lambda old: (old + addend) & _M64, tag)

    def send(self, dst, nbytes, tag=None):
        """One-way message of ``nbytes`` (used for RPC legs)."""
        fab = self.fabric
        if not fab._alive.get(dst, True):
            yield from self._dead(dst)
        if not fab._alive[self.src]:
            raise NodeDead(self.src, "issuing node %d is dead" % self.src)
        self.stats._count(self.src, dst, "send", nbytes, 0)
        if fab.trace is not None:
            fab.trace.append(TraceEntry(self.sim.now, self.src, dst, "send", 0, nbytes, tag,
                                        self.sim.current_name))
        q = fab._queue(dst, nbytes)
        yield self.cfg.base_rtt * 0.5 + q + nbytes * self.cfg.per_byte_cost
        if not fab._alive[dst]:
            yield from self._dead(dst)

    # -- operations on the issuing node's own region ----------------------------
    def local(self, nbytes=0):
        """Cost of one local memory operation; raises if this node died."""
        yield self.cfg.local_op_cost + nbytes * self.cfg.local_per_byte
        if not self.fabric._alive[self.src]:
            raise NodeDead(self.src, "node %d died during a local op" % self.src)

    @property
    def mem(self):
        return self.fabric._mem[self.src]


def _word_chunks(offset, n, max_chunks):
    """Split [0, n) at 8-byte-aligned absolute boundaries into <= max_chunks pieces."""
    first = (-offset) % 8
    cuts = list(range(first if first else 8, n, 8))
    if not cuts:
        return [(0, n)]
    k = min(max_chunks, len(cuts) + 1)
    pick = [cuts[(i * len(cuts)) // k] for i in range(1, k)] if k > 1 else []
    pick = sorted(set(pick))
    bounds = [0] + pick + [n]
    return [(bounds[i], bounds[i + 1]) for i in range(len(bounds) - 1)]


def read_u64(mem, offset):
    return _U64.unpack_from(mem, offset)[0]


def write_u64(mem, offset, value):
    _U64.pack_into(mem, offset, value & _M64)
