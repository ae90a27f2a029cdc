"""Microbenchmark client: version-validated reads and lock-serialized writes.

Objects are framed as ``head u64 | payload | tail u64``. Every write stores
the same new version at both ends and fills the payload with the version's
low byte, so a torn image shows up as a head/tail mismatch.
"""

import math
import struct

from ..cache_core import OpTimeout
from ..fabric import NodeDead
from .history import OpRecord

_U64 = struct.Struct("<Q")
FRAME = 16
READ_RETRIES = 10_000
LOCK_RETRIES = 100_000
PROBE_EVERY = 64


class LockTimeout(Exception):
    pass


class ReadRetriesExceeded(Exception):
    pass


def encode(version, size):
    body = bytes([version & 0xFF]) * (size - FRAME)
    return _U64.pack(version) + body + _U64.pack(version)


def decode(buf):
    """(head, tail, payload_ok)."""
    head = _U64.unpack_from(buf, 0)[0]
    tail = _U64.unpack_from(buf, len(buf) - 8)[0]
    body = buf[8:len(buf) - 8]
    ok = body.count(head & 0xFF) == len(body)
    return head, tail, ok


def client_read(engine, addr, size, worker=0, history=None, obj=-1):
    """Read until a consistent image comes back; returns (version, image)."""
    sim = engine.fabric.sim
    for _ in range(READ_RETRIES):
        t0 = sim.now
        data = yield from engine.read(addr, size, worker)
        head, tail, ok = decode(data)
        if head == tail and ok:
            if history is not None:
                history.add(OpRecord(obj, "read", t0, sim.now, head, engine.cn))
            return head, data
        engine.events["torn"] += 1
    raise ReadRetriesExceeded("object %d stayed torn" % obj)


def _lock_token(cn, worker):
    return ((cn + 1) << 20) | (worker + 1)


def lock_holder(word):
    return (word >> 20) - 1


def acquire_lock(engine, lock, worker=0):
    port = engine.port
    coord = engine.coordinator
    token = _lock_token(engine.cn, worker)
    backoff = engine.fabric.config.base_rtt
    for attempt in range(LOCK_RETRIES):
        old = yield from port.cas(lock.node, lock.offset, 0, token, tag="bench_lock")
        if old == 0:
            return token
        holder = lock_holder(old)
        if coord is not None and not coord.is_live(holder):
            old2 = yield from port.cas(lock.node, lock.offset, old, token, tag="bench_lock")
            if old2 == old:
                return token
            continue
        if attempt % PROBE_EVERY == PROBE_EVERY - 1 and holder != engine.cn:
            # a silent holder may be dead; find out
            try:
                yield from port.read(holder, 0, 8, tag="liveness_probe")
            except NodeDead:
                if coord is not None:
                    coord.report_timeout(engine.cn, holder)
        yield backoff
    raise LockTimeout("lock at %r" % (lock,))


def release_lock(engine, lock, token):
    yield from engine.port.cas(lock.node, lock.offset, token, 0, tag="bench_lock")


def client_write(engine, addr, lock, size, worker=0, history=None, obj=-1):
    """Lock, read the current version, write version + 1, unlock. Returns the new version."""
    sim = engine.fabric.sim
    token = yield from acquire_lock(engine, lock, worker)
    try:
        version, _ = yield from client_read(engine, addr, size, worker, history, obj)
        new = version + 1
        t0 = sim.now
        if history is not None:
            history.write_started(obj, new)
        try:
            yield from engine.write(addr, encode(new, size), worker)
        except (OpTimeout, NodeDead):
            # the write may have landed in part; it stays open forever
            if history is not None:
                history.add(OpRecord(obj, "write", t0, math.inf, new, engine.cn))
            raise
        if history is not None:
            history.add(OpRecord(obj, "write", t0, sim.now, new, engine.cn))
    except Exception:
        try:
            yield from release_lock(engine, lock, token)
        except NodeDead as err:
            if err.node == engine.cn:
                raise
        raise
    yield from release_lock(engine, lock, token)
    return new
