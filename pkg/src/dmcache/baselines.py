"""Comparison engines with the same generator API as ``CacheEngine``.

``NoCacheEngine`` sends every access to the memory node. ``CMCacheEngine``
caches on the CN but routes every read miss and write through a central
manager node that tracks owners and serializes requests per object.
"""

from collections import OrderedDict, deque
from dataclasses import dataclass, field

from .cache_core import EngineBase, OpTimeout
from .fabric import NodeDead
from .sim import Join

REQ_BYTES = 32
ACK_BYTES = 16


class NoCacheEngine(EngineBase):
    name = "nocache"

    def __init__(self, fabric, cn, coordinator=None):
        self._init_common(fabric, cn, coordinator)

    def read(self, obj, length, worker=0):
        return self._guard(self._read(obj, length, worker))

    def write(self, obj, data, worker=0):
        return self._guard(self._write(obj, bytes(data), worker))

    def _read(self, obj, length, worker):
        t0 = self.fabric.sim.now
        data = yield from self.port.read(obj.node, obj.offset, length, tag="data_read")
        self._event(worker, "read-bypass", t0, length)
        return data

    def _write(self, obj, data, worker):
        t0 = self.fabric.sim.now
        yield from self.port.write(obj.node, obj.offset, data, tag="data_write")
        self._event(worker, "write-bypass", t0, len(data))

    def read_nested(self, obj, length, ancestor, ancestor_len, worker=0):
        return self.read(obj, length, worker)

    def write_nested(self, obj, data, ancestor, ancestor_len, worker=0):
        return self.write(obj, data, worker)

    def cas(self, obj, expected, new, worker=0):
        return self._guard(self.port.cas(obj.node, obj.offset, expected, new, tag="app_atomic"))

    def faa(self, obj, addend, worker=0):
        return self._guard(self.port.faa(obj.node, obj.offset, addend, tag="app_atomic"))

    cache_read = read
    cache_write = write


@dataclass
class _Request:
    kind: str
    cn: int
    obj: object
    length: int = 0
    data: bytes = b""
    args: tuple = ()
    event: object = None
    submitted: float = 0.0
    result: object = None


@dataclass
class ManagerStats:
    rpcs: int = 0
    invalidations: int = 0
    queue_delay: list = field(default_factory=list)


class Manager:
    """Central coherence manager: ``workers`` servers pulling from per-object
    FIFO queues, with at most one request per object in service."""

    def __init__(self, fabric, node, workers=16, service_time=None, coordinator=None):
        self.fabric = fabric
        self.sim = fabric.sim
        self.node = node
        self.port = fabric.port(node)
        self.service_time = fabric.config.base_rtt if service_time is None else service_time
        self.coordinator = coordinator
        self.engines = {}
        self.owners = {}
        self.stats = ManagerStats()
        self.skip_invalidation = False     # mutation hook for validator tests
        self._queues = {}
        self._ready = deque()
        self._busy = set()
        self._idle = []
        for i in range(workers):
            self.sim.spawn(self._worker(), name="manager%d" % i)

    def submit(self, req):
        key = req.obj.pack()
        q = self._queues.get(key)
        if q is None:
            q = self._queues[key] = deque()
        q.append(req)
        if len(q) == 1 and key not in self._busy:
            self._ready.append(key)
            if self._idle:
                self._idle.pop().succeed()

    def _worker(self):
        while True:
            if not self._ready:
                ev = self.sim.event()
                self._idle.append(ev)
                yield ev
                continue
            key = self._ready.popleft()
            self._busy.add(key)
            req = self._queues[key].popleft()
            self.stats.rpcs += 1
            self.stats.queue_delay.append(self.sim.now - req.submitted)
            yield self.service_time
            try:
                req.result = yield from self._handle(key, req)
            except NodeDead as err:
                self._timeout(err.node)
                req.result = OpTimeout(err.node)
            nbytes = len(req.result) if isinstance(req.result, bytes) else ACK_BYTES
            try:
                yield from self.port.send(req.cn, nbytes, tag="rpc_reply")
            except NodeDead as err:
                self._timeout(err.node)
            req.event.succeed(req.result)
            self._busy.discard(key)
            if self._queues[key]:
                self._ready.append(key)
            else:
                del self._queues[key]

    def _timeout(self, node):
        if self.coordinator is not None:
            self.coordinator.report_timeout(self.node, node)

    def _handle(self, key, req):
        obj = req.obj
        if req.kind == "read":
            data = yield from self.port.read(obj.node, obj.offset, req.length, tag="data_read")
            self.owners.setdefault(key, set()).add(req.cn)
            return data
        yield from self._invalidate(key, req.cn)
        if req.kind == "write":
            yield from self.port.write(obj.node, obj.offset, req.data, tag="data_write")
            self.owners[key] = {req.cn}
            return None
        # atomics leave no cached copies behind
        self.owners[key] = set()
        if req.kind == "cas":
            return (yield from self.port.cas(obj.node, obj.offset, *req.args, tag="app_atomic"))
        return (yield from self.port.faa(obj.node, obj.offset, *req.args, tag="app_atomic"))

    def _invalidate(self, key, writer):
        if self.skip_invalidation:
            return
        live = set(self.coordinator.live_cns()) if self.coordinator is not None else None
        targets = [c for c in sorted(self.owners.get(key, ())) if c != writer
                   and (live is None or c in live)]
        if not targets:
            return
        self.stats.invalidations += len(targets)
        results = yield Join([self._invalidate_one(c, key) for c in targets])
        for c, res in zip(targets, results):
            if isinstance(res, NodeDead) and res.node == c:
                self._timeout(c)
            elif isinstance(res, Exception):
                raise res

    def _invalidate_one(self, cn, key):
        yield from self.port.send(cn, ACK_BYTES, tag="cm_invalidate")
        eng = self.engines.get(cn)
        if eng is not None:
            eng.drop(key)
        yield from self.fabric.port(cn).send(self.node, ACK_BYTES, tag="cm_ack")

    def reset_owners(self, live):
        self.owners = {}

    def drop_mn(self, mn):
        for key in list(self.owners):
            if key >> 48 == mn:
                del self.owners[key]


class CMCacheEngine(EngineBase):
    """CN side of the centralized scheme: a local object cache plus RPCs."""

    name = "cmcache"

    def __init__(self, fabric, cn, manager, capacity_bytes=1 << 26, coordinator=None):
        self._init_common(fabric, cn, coordinator)
        self.manager = manager
        manager.engines[cn] = self
        self.capacity = capacity_bytes
        self.cache = OrderedDict()     # key -> bytes
        self.gens = {}
        self._bytes = 0

    def drop(self, key):
        """Invalidation from the manager."""
        self.gens[key] = self.gens.get(key, 0) + 1
        data = self.cache.pop(key, None)
        if data is not None:
            self._bytes -= len(data)

    def _install(self, key, data):
        old = self.cache.pop(key, None)
        if old is not None:
            self._bytes -= len(old)
        while self.cache and self._bytes + len(data) > self.capacity:
            _, victim = self.cache.popitem(last=False)
            self._bytes -= len(victim)
            self.events["evict"] += 1
        if len(data) <= self.capacity:
            self.cache[key] = data
            self._bytes += len(data)

    def _rpc(self, req):
        req.event = self.fabric.sim.event()
        nbytes = REQ_BYTES + len(req.data)
        yield from self.port.send(self.manager.node, nbytes, tag="rpc")
        req.submitted = self.fabric.sim.now
        self.manager.submit(req)
        result = yield req.event
        if isinstance(result, Exception):
            raise result
        return result

    def read(self, obj, length, worker=0):
        return self._guard(self._read(obj, length, worker))

    def write(self, obj, data, worker=0):
        return self._guard(self._write(obj, bytes(data), worker))

    def _read(self, obj, length, worker):
        t0 = self.fabric.sim.now
        key = obj.pack()
        yield from self.port.local(length)
        data = self.cache.get(key)
        if data is not None and len(data) >= length and self.enabled:
            self.cache.move_to_end(key)
            self._event(worker, "read-hit", t0, 0)
            return data[:length]
        if not self.enabled:
            data = yield from self.port.read(obj.node, obj.offset, length, tag="data_read")
            self._event(worker, "read-bypass", t0, length)
            return data
        gen = self.gens.get(key, 0)
        data = yield from self._rpc(_Request("read", self.cn, obj, length=length))
        yield from self.port.local(length)
        if self.gens.get(key, 0) == gen and self.enabled:
            self._install(key, data)
        self._event(worker, "read-miss", t0, length)
        return data

    def _write(self, obj, data, worker):
        t0 = self.fabric.sim.now
        key = obj.pack()
        self.drop(key)
        yield from self._rpc(_Request("write", self.cn, obj, data=data))
        yield from self.port.local(len(data))
        if self.enabled:
            self.gens[key] = self.gens.get(key, 0) + 1
            self._install(key, data)
            self._event(worker, "write-cached", t0, len(data))
        else:
            self._event(worker, "write-bypass", t0, len(data))

    def read_nested(self, obj, length, ancestor, ancestor_len, worker=0):
        return self.read(obj, length, worker)

    def write_nested(self, obj, data, ancestor, ancestor_len, worker=0):
        return self.write(obj, data, worker)

    def cas(self, obj, expected, new, worker=0):
        return self._guard(self._rpc(_Request("cas", self.cn, obj, args=(expected, new))))

    def faa(self, obj, addend, worker=0):
        return self._guard(self._rpc(_Request("faa", self.cn, obj, args=(addend,))))

    def wipe(self, reset_owner=False, mn=None):
        for key in list(self.cache):
            if mn is None or key >> 48 == mn:
                self.drop(key)

    @property
    def invalidations(self):
        return 0

    @invalidations.setter
    def invalidations(self, value):
        pass

    cache_read = read
    cache_write = write
