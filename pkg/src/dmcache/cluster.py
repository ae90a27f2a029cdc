"""Build a simulated cluster: fabric, MNs with object storage, CNs with engines."""

from dataclasses import dataclass, field

import numpy as np

from .baselines import CMCacheEngine, Manager, NoCacheEngine
from .cache_core import CacheEngine, CNLayout, EngineConfig
from .cache_index import IndexConfig
from .coordinator import Coordinator
from .fabric import Fabric, FabricConfig, NodeKind, RemoteAddr
from .owner_tracking import SLOT_BYTES, OwnerDirectory, TrackingPolicy
from .sim import Scheduler

COHERENCE = ("difache", "difache-noac", "cmcache", "nocache")
MN_RESERVED = 64  # offset 0 of every MN stays unused so no key packs to 0


def _pow2_at_least(n):
    return 1 << max(0, int(n - 1).bit_length())


def _align(n, a=8):
    return (n + a - 1) // a * a


@dataclass
class MNLayout:
    """Placement inside one MN region: objects, their lock words, owner
    directory and mode-lock table."""

    offsets: np.ndarray          # byte offset of each local object
    sizes: np.ndarray
    lock_base: int
    directory: OwnerDirectory
    mode_lock_base: int
    mode_lock_count: int
    nbytes: int

    def lock_offset(self, slot):
        return self.lock_base + 8 * slot


def build_mn_layout(sizes, dir_slots, mode_lock_count):
    sizes = np.asarray(sizes, dtype=np.int64)
    strides = (sizes + 7) // 8 * 8
    offsets = MN_RESERVED + np.concatenate(([0], np.cumsum(strides)[:-1])) if len(sizes) else \
        np.zeros(0, dtype=np.int64)
    end = MN_RESERVED + int(strides.sum())
    lock_base = _align(end, 64)
    dir_base = _align(lock_base + 8 * len(sizes), 64)
    directory = OwnerDirectory(dir_base, dir_slots)
    ml_base = _align(dir_base + dir_slots * SLOT_BYTES, 64)
    total = ml_base + 8 * mode_lock_count
    return MNLayout(offsets.astype(np.int64), sizes, lock_base, directory, ml_base,
                    mode_lock_count, total)


@dataclass
class ClusterConfig:
    cns: int = 8
    mns: int = 1
    objects: int = 1000
    object_size: int = 1024
    sizes: object = None                 # optional per-object sizes
    coherence: str = "difache"
    owner_tracking: str = "auto"
    tracking_threshold: int = 32
    index_buckets: int = None            # default: power of two >= 2 x objects
    pool_bytes: int = None               # default: room for every object
    mode_lock_count: int = 65536
    dir_slots: int = None                # default: 2 x objects per MN
    manager_workers: int = 16
    manager_service: float = None
    jitter: float = 0.0                  # > 0 with rng=None gives free-running mode
    seed: int = 0
    fabric: FabricConfig = field(default_factory=FabricConfig)
    engine: EngineConfig = field(default_factory=EngineConfig)

    def __post_init__(self):
        if self.coherence not in COHERENCE:
            raise ValueError("coherence must be one of %s" % (COHERENCE,))
        if self.cns < 1 or self.mns < 1 or self.objects < 1:
            raise ValueError("need at least one CN, one MN and one object")
        if self.owner_tracking not in ("broadcast", "ownerset", "auto"):
            raise ValueError("owner_tracking must be broadcast, ownerset or auto")


class Cluster:
    def __init__(self, cfg, sim=None, rng=None):
        self.cfg = cfg
        self.sim = sim or Scheduler(jitter=cfg.jitter, rng=rng)
        self.fabric = Fabric(cfg.fabric, self.sim)
        sizes = np.full(cfg.objects, cfg.object_size, dtype=np.int64) if cfg.sizes is None \
            else np.asarray(cfg.sizes, dtype=np.int64)
        if len(sizes) != cfg.objects:
            raise ValueError("sizes must have one entry per object")
        self.sizes = sizes
        self.coordinator = Coordinator(self.fabric, TrackingPolicy(cfg.owner_tracking,
                                                                   cfg.tracking_threshold))
        # objects are striped round-robin over MNs
        self.mns = []
        self.mn_layouts = {}
        per_mn = -(-cfg.objects // cfg.mns)
        dir_slots = cfg.dir_slots or max(64, 2 * per_mn)
        for m in range(cfg.mns):
            local = sizes[m::cfg.mns]
            layout = build_mn_layout(local, dir_slots, cfg.mode_lock_count)
            node = self.fabric.add_node(NodeKind.MN, layout.nbytes)
            self.mns.append(node)
            self.mn_layouts[node] = layout
            self.coordinator.register_mn(node, layout)
        self.manager = None
        if cfg.coherence == "cmcache":
            mgr = self.fabric.add_node(NodeKind.MANAGER, 64)
            self.manager = Manager(self.fabric, mgr, cfg.manager_workers, cfg.manager_service,
                                   self.coordinator)
            self.coordinator.manager = self.manager
        max_size = int(sizes.max())
        buckets = cfg.index_buckets or max(1024, _pow2_at_least(2 * cfg.objects))
        pool = cfg.pool_bytes
        if pool is None:
            pool = int(((sizes + 63) // 64 * 64).sum()) + 64 * max_size
        self.cn_layout = CNLayout(IndexConfig(num_buckets=buckets), pool)
        self.engines = {}
        self.cns = []
        for _ in range(cfg.cns):
            self.add_cn()

    def add_cn(self, fence=False, node_id=None):
        cfg = self.cfg
        if cfg.coherence in ("difache", "difache-noac"):
            size = self.cn_layout.nbytes
        else:
            size = 64
        node = self.fabric.add_node(NodeKind.CN, size, node_id)
        if cfg.coherence in ("difache", "difache-noac"):
            ecfg = cfg.engine
            if cfg.coherence == "difache-noac" and ecfg.adaptive:
                ecfg = EngineConfig(**{**ecfg.__dict__, "adaptive": False})
            eng = CacheEngine(self.fabric, node, self.cn_layout,
                              self.mn_layouts, self.coordinator, ecfg)
        elif cfg.coherence == "cmcache":
            eng = CMCacheEngine(self.fabric, node, self.manager, self.cn_layout.pool_bytes,
                                self.coordinator)
        else:
            eng = NoCacheEngine(self.fabric, node, self.coordinator)
        self.engines[node] = eng
        self.cns.append(node)
        if fence:
            self.coordinator.scale(add=eng)
        else:
            self.coordinator.register(eng)
        return node

    # -- object addressing ---------------------------------------------------------
    def locate(self, i):
        """(mn node, local slot) of object ``i``."""
        mn = self.mns[i % len(self.mns)]
        return mn, i // len(self.mns)

    def addr(self, i):
        mn, slot = self.locate(i)
        return RemoteAddr(mn, int(self.mn_layouts[mn].offsets[slot]))

    def lock_addr(self, i):
        mn, slot = self.locate(i)
        return RemoteAddr(mn, self.mn_layouts[mn].lock_offset(slot))

    def size(self, i):
        return int(self.sizes[i])

    def mn_bytes(self):
        return sum(self.fabric.stats.node_bytes(m) for m in self.mns)

    def invalidations(self):
        n = sum(e.invalidations for e in self.engines.values())
        if self.manager is not None:
            n += self.manager.stats.invalidations
        return n
