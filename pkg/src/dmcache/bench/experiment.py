"""Wire a workload, clients and a coherence engine together and measure."""

from dataclasses import dataclass, field
import io
import math
import random

import numpy as np

from ..cache_core import EngineConfig, OpTimeout
from ..cluster import Cluster, ClusterConfig
from ..fabric import FabricConfig, NodeDead
from .client import LockTimeout, ReadRetriesExceeded, client_read, client_write, encode
from .history import History, OpRecord, validate_history
from .workload import WorkloadSpec, gen_synthetic, parse_trace, trace_ops

EVENT_CLASSES = ("read-hit", "read-miss", "write-cached", "read-bypass", "write-bypass")
JITTER = 0.05


@dataclass
class ScriptedEvent:
    at: int             # issued-op count that triggers it
    action: str         # "kill-cn", "kill-mn", "recover-mn"
    target: int = 0


@dataclass
class ExperimentConfig:
    workload: WorkloadSpec = field(default_factory=WorkloadSpec)
    coherence: str = "difache"
    owner_tracking: str = "auto"
    deterministic: bool = True
    torn: bool = False
    trace_file: str = None
    events: list = field(default_factory=list)
    record_history: bool = True
    timeline: bool = False
    trace: bool = False          # keep the full fabric op trace on the cluster
    fabric: FabricConfig = None
    engine: EngineConfig = None
    mns: int = 1
    index_buckets: int = None
    pool_bytes: int = None
    tracking_threshold: int = 32
    ops: object = None           # prebuilt OpStream, overrides the generator
    setup: object = None         # called with the cluster before clients start


@dataclass
class EventStats:
    count: int = 0
    p50: float = 0.0
    p99: float = 0.0
    bytes: int = 0


@dataclass
class Metrics:
    events: dict
    completed: int
    timeouts: int
    failures: int
    sim_time: float
    throughput: float          # completed ops per simulated second
    hit_rate: float
    invalidations: int
    mn_bytes: int
    hits_while_fenced: int = 0
    write_latency_p50: float = 0.0
    read_latency_p50: float = 0.0
    op_latency: dict = None
    fences: list = None

    def to_csv(self):
        out = io.StringIO()
        out.write("event_class,count,p50,p99,bytes\n")
        for ev in EVENT_CLASSES:
            s = self.events[ev]
            out.write("%s,%d,%.4f,%.4f,%d\n" % (ev, s.count, s.p50, s.p99, s.bytes))
        out.write("\nthroughput,hit_rate,invalidations,mn_bytes\n")
        out.write("%.4f,%.4f,%d,%d\n" % (self.throughput, self.hit_rate, self.invalidations,
                                         self.mn_bytes))
        return out.getvalue()


@dataclass
class Result:
    metrics: Metrics
    cluster: Cluster
    history: History
    ops: object
    timeline: list = None
    completions: list = None
    fired: list = None           # (sim time, action) of each scripted event

    def validate(self):
        return validate_history(self.history.ops)

    @property
    def csv(self):
        return self.metrics.to_csv()


def _percentiles(samples):
    if not samples:
        return 0.0, 0.0
    a = np.asarray(samples)
    return float(np.percentile(a, 50)), float(np.percentile(a, 99))


def build_ops(cfg):
    if cfg.ops is not None:
        return cfg.ops
    if cfg.trace_file:
        recs = parse_trace(cfg.trace_file)
        return trace_ops(recs, cfg.workload.total_ops or None)
    return gen_synthetic(cfg.workload)


def run_experiment(cfg):
    spec = cfg.workload
    ops = build_ops(cfg)
    fab = cfg.fabric or FabricConfig(seed=spec.seed)
    if cfg.torn != fab.torn_read_injection:
        fab = FabricConfig(**{**fab.__dict__, "torn_read_injection": cfg.torn})
    ccfg = ClusterConfig(
        cns=spec.cns, mns=cfg.mns, objects=len(ops.sizes), sizes=ops.sizes,
        coherence=cfg.coherence, owner_tracking=cfg.owner_tracking,
        tracking_threshold=cfg.tracking_threshold, index_buckets=cfg.index_buckets,
        pool_bytes=cfg.pool_bytes, fabric=fab, engine=cfg.engine or EngineConfig(),
        jitter=0.0 if cfg.deterministic else JITTER, seed=spec.seed)
    rng = None if cfg.deterministic else random.Random()
    cluster = Cluster(ccfg, rng=rng)
    if cfg.setup is not None:
        cfg.setup(cluster)
    return _run(cfg, cluster, ops)


def _run(cfg, cluster, ops):
    spec = cfg.workload
    sim = cluster.sim
    history = History()
    samples = {ev: [] for ev in EVENT_CLASSES}
    timeline = [] if cfg.timeline else None

    def sink(cn, ev, lat, nbytes):
        if ev in samples:
            samples[ev].append(lat)
        if timeline is not None:
            timeline.append((sim.now, ev))

    for eng in cluster.engines.values():
        eng.sink = sink
    if cfg.trace:
        cluster.fabric.enable_trace()

    def restore(mn):
        # the MN came back empty: rewrite every object at its newest started version
        mem = cluster.fabric.memory(mn)
        for i in range(len(ops.sizes)):
            node, _ = cluster.locate(i)
            if node != mn:
                continue
            v = history.max_started.get(i, 0)
            a = cluster.addr(i)
            size = cluster.size(i)
            mem[a.offset:a.offset + size] = encode(v, size)
            if cfg.record_history:
                history.add(OpRecord(i, "write", sim.now, sim.now, v, -1))

    cluster.coordinator.on_mn_recover.append(restore)
    script = sorted(cfg.events, key=lambda e: e.at)
    state = {"next": 0, "done": 0, "timeouts": 0, "failures": 0}
    completions = []
    lat = {"read": [], "write": []}
    objs = ops.objects
    writes = ops.writes
    total = len(objs)
    hist = history if cfg.record_history else _VersionOnly(history)

    fired = []

    def fire(ev):
        fired.append((sim.now, ev.action))
        if ev.action == "kill-cn":
            cluster.fabric.inject_failure(cluster.cns[ev.target])
        elif ev.action == "kill-mn":
            cluster.fabric.inject_failure(cluster.mns[ev.target])
        elif ev.action == "recover-mn":
            cluster.coordinator.recover_mn(cluster.mns[ev.target])
        else:
            raise ValueError("unknown scripted action %r" % ev.action)

    def take():
        i = state["next"]
        while script and script[0].at <= i:
            fire(script.pop(0))
        if i >= total:
            return None
        state["next"] = i + 1
        return i

    def client(cn, worker):
        eng = cluster.engines[cn]
        while True:
            i = take()
            if i is None:
                return
            o = int(objs[i])
            addr = cluster.addr(o)
            size = cluster.size(o)
            t0 = sim.now
            try:
                if writes[i]:
                    yield from client_write(eng, addr, cluster.lock_addr(o), size, worker, hist, o)
                    lat["write"].append(sim.now - t0)
                else:
                    yield from client_read(eng, addr, size, worker, hist, o)
                    lat["read"].append(sim.now - t0)
                state["done"] += 1
                completions.append(sim.now)
            except OpTimeout:
                state["timeouts"] += 1
            except (LockTimeout, ReadRetriesExceeded):
                state["failures"] += 1
            except NodeDead as err:
                if err.node == cn:
                    return
                state["timeouts"] += 1

    for cn in cluster.cns:
        for w in range(spec.clients_per_cn):
            sim.spawn(client(cn, w), name="client%d.%d" % (cn, w))
    sim.run()
    while script:
        fire(script.pop(0))
        sim.run()

    events = {}
    for ev in EVENT_CLASSES:
        count = sum(e.events[ev] for e in cluster.engines.values())
        nbytes = sum(e.event_bytes[ev] for e in cluster.engines.values())
        p50, p99 = _percentiles(samples[ev])
        events[ev] = EventStats(count, p50, p99, nbytes)
    reads = events["read-hit"].count + events["read-miss"].count + events["read-bypass"].count
    hit_rate = events["read-hit"].count / reads if reads else 0.0
    t = sim.now
    metrics = Metrics(
        events=events, completed=state["done"], timeouts=state["timeouts"],
        failures=state["failures"], sim_time=t,
        throughput=state["done"] / t * 1e6 if t > 0 else 0.0,
        hit_rate=hit_rate, invalidations=cluster.invalidations(),
        mn_bytes=cluster.mn_bytes(),
        hits_while_fenced=sum(e.hits_while_fenced for e in cluster.engines.values()),
        write_latency_p50=_percentiles(lat["write"])[0],
        read_latency_p50=_percentiles(lat["read"])[0],
        op_latency=lat, fences=list(cluster.coordinator.fences))
    return Result(metrics, cluster, history, ops, timeline, completions, fired)


class _VersionOnly:
    """History stand-in that keeps only the newest started version per object."""

    def __init__(self, history):
        self._h = history

    def write_started(self, obj, version):
        self._h.write_started(obj, version)

    def add(self, rec):
        if rec.kind == "write":
            self._h.write_started(rec.obj, rec.version)


def windowed_hit_rate(timeline, window):
    """Hit rate over consecutive windows of ``window`` read events."""
    flags = [ev == "read-hit" for _, ev in timeline if ev in ("read-hit", "read-miss",
                                                               "read-bypass")]
    out = []
    for i in range(0, len(flags) - window + 1, window):
        out.append(sum(flags[i:i + window]) / window)
    return out


def throughput_timeline(completions, bucket):
    if not completions:
        return []
    end = max(completions)
    n = int(math.floor(end / bucket)) + 1
    counts = np.bincount((np.asarray(completions) / bucket).astype(int), minlength=n)
    return (counts / bucket * 1e6).tolist()
